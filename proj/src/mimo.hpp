#pragma once

#include <cstdint>
#include <vector>

#include "common.hpp"

namespace semkb::mimo {

enum class ModelTag { los_like, nlos_like, from_file };

struct ChannelRealization {
  cmat h;                           // N_r x N_t complex gains
  std::int64_t t_index = 0;         // sample index
  double sample_interval_ms = 1.0;  // spacing between samples
};

struct ChannelTrace {
  std::vector<ChannelRealization> realizations;
  ModelTag model_tag = ModelTag::from_file;

  std::size_t length() const { return realizations.size(); }
  int n_r() const { return realizations.empty() ? 0 : static_cast<int>(realizations.front().h.rows()); }
  int n_t() const { return realizations.empty() ? 0 : static_cast<int>(realizations.front().h.cols()); }
  double sample_interval_ms() const {
    return realizations.empty() ? 0.0 : realizations.front().sample_interval_ms;
  }
  const cmat& h(std::size_t i) const { return realizations.at(i).h; }

  // strictly increasing t_index, consistent shapes, finite entries
  void validate() const;

  // contiguous sub-trace [first, first+count)
  ChannelTrace slice(std::size_t first, std::size_t count) const;
};

struct ChannelModelParams {
  int n_r = 16;
  int n_t = 16;
  double doppler_hz = 50.0;
  int path_count = 16;
  double k_factor_db = 10.0;  // +inf = pure LOS; -inf = pure scatter (K=0)
  double sample_interval_ms = 1.0;
};

// Rician sum-of-sinusoids generator: per antenna pair, a constant random-phase
// LOS term plus `path_count` Doppler-shifted scatter sinusoids, weighted so the
// per-entry mean power is 1 for every K.
ChannelTrace generate_trace(const ChannelModelParams& params, std::uint64_t seed, int length);

struct SvdTriple {
  cmat u;  // N_r x N_r unitary
  rvec s;  // min(N_r, N_t) singular values, descending
  cmat v;  // N_t x N_t unitary

  int n_r() const { return static_cast<int>(u.rows()); }
  int n_t() const { return static_cast<int>(v.rows()); }
  rmat sigma() const;  // N_r x N_t rectangular diagonal
};

SvdTriple svd_decompose(const cmat& h);

struct PrecodeConfig {
  int d = 4;              // spatial streams
  bool equalize = false;  // divide detected streams by singular values
};

// x = V_d z (transmit along the strongest right-singular directions)
cvec precode(const cvec& z, const SvdTriple& triple, const PrecodeConfig& cfg);

struct NoiseModel {
  double snr_db = 10.0;       // +inf = noiseless
  std::uint64_t rng_seed = 0;
};

// y = H x + n, noise variance set from the instantaneous transmit power:
// sigma^2 = |x|^2 / (N_r * 10^(snr_db/10)), split evenly over components.
cvec transmit(const cvec& x, const cmat& h, const NoiseModel& noise);

// First d entries of U^H y; with cfg.equalize each entry is divided by its
// singular value (values below 1e-12 zero the entry and report its index).
cvec detect(const cvec& y, const SvdTriple& triple, const PrecodeConfig& cfg,
            std::vector<int>* zeroed = nullptr);

// Uniform midrise quantization of real/imag parts after per-matrix max-abs
// scaling. Per-component bit budget = floor(bits_total / (2 * entries)), min 1.
cmat quantize_feedback(const cmat& v_d, std::int64_t bits_total);

}  // namespace semkb::mimo
