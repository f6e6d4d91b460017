#include "mimo.hpp"

#include <cmath>
#include <limits>

#include <Eigen/SVD>

namespace semkb::mimo {

void ChannelTrace::validate() const {
  if (realizations.empty()) fail(errc::invalid_input, "channel trace is empty");
  const int nr = n_r();
  const int nt = n_t();
  if (nr < 1 || nt < 1) fail(errc::config, "channel trace has zero antennas");
  std::int64_t prev = realizations.front().t_index - 1;
  for (const auto& r : realizations) {
    if (r.h.rows() != nr || r.h.cols() != nt)
      fail(errc::shape, "channel trace realizations disagree on antenna counts");
    if (r.t_index <= prev) fail(errc::invalid_input, "channel trace t_index not strictly increasing");
    if (!all_finite(r.h)) fail(errc::numeric, "channel trace contains non-finite entries");
    prev = r.t_index;
  }
}

ChannelTrace ChannelTrace::slice(std::size_t first, std::size_t count) const {
  if (first + count > realizations.size())
    fail(errc::invalid_input, "channel trace slice out of range");
  ChannelTrace out;
  out.model_tag = model_tag;
  out.realizations.assign(realizations.begin() + static_cast<std::ptrdiff_t>(first),
                          realizations.begin() + static_cast<std::ptrdiff_t>(first + count));
  return out;
}

ChannelTrace generate_trace(const ChannelModelParams& params, std::uint64_t seed, int length) {
  if (length <= 0) fail(errc::config, "generate_trace: length must be positive");
  if (params.n_r < 1 || params.n_t < 1) fail(errc::config, "generate_trace: zero antennas");
  if (params.path_count < 1) fail(errc::config, "generate_trace: path_count must be positive");
  if (!(params.sample_interval_ms > 0.0))
    fail(errc::config, "generate_trace: sample_interval_ms must be positive");
  if (params.doppler_hz < 0.0) fail(errc::config, "generate_trace: doppler_hz must be non-negative");

  const bool pure_los = std::isinf(params.k_factor_db) && params.k_factor_db > 0.0;
  double w_los = 1.0;
  double w_scatter = 0.0;
  if (!pure_los) {
    const double k_lin =
        std::isinf(params.k_factor_db) ? 0.0 : std::pow(10.0, params.k_factor_db / 10.0);
    w_los = std::sqrt(k_lin / (k_lin + 1.0));
    w_scatter = std::sqrt(1.0 / (k_lin + 1.0));
  }

  const int nr = params.n_r;
  const int nt = params.n_t;
  const int paths = params.path_count;
  const double omega_d = 2.0 * M_PI * params.doppler_hz;

  Rng rng(derive_seed(seed, "mimo.trace"));

  // Per-entry draws: LOS phase, then per path a Doppler frequency (Jakes
  // cosine-of-arrival-angle) and a phase. Drawn once; time only advances the
  // sinusoid arguments, which is what yields the Jakes autocorrelation shape.
  struct EntryPaths {
    double los_phase;
    std::vector<double> omega;  // per-path angular Doppler (rad/s)
    std::vector<double> phase;
  };
  std::vector<EntryPaths> entries(static_cast<std::size_t>(nr) * nt);
  for (auto& e : entries) {
    e.los_phase = rng.uniform(0.0, 2.0 * M_PI);
    e.omega.resize(paths);
    e.phase.resize(paths);
    for (int p = 0; p < paths; ++p) {
      e.omega[p] = omega_d * std::cos(rng.uniform(0.0, 2.0 * M_PI));
      e.phase[p] = rng.uniform(0.0, 2.0 * M_PI);
    }
  }

  const double scatter_scale = w_scatter / std::sqrt(static_cast<double>(paths));

  ChannelTrace trace;
  trace.model_tag = w_los > 0.0 ? ModelTag::los_like : ModelTag::nlos_like;
  trace.realizations.reserve(static_cast<std::size_t>(length));
  for (int t = 0; t < length; ++t) {
    const double time_s = static_cast<double>(t) * params.sample_interval_ms / 1000.0;
    ChannelRealization real;
    real.t_index = t;
    real.sample_interval_ms = params.sample_interval_ms;
    real.h.resize(nr, nt);
    for (int r = 0; r < nr; ++r) {
      for (int c = 0; c < nt; ++c) {
        const auto& e = entries[static_cast<std::size_t>(r) * nt + c];
        cplx value = w_los * std::polar(1.0, e.los_phase);
        if (scatter_scale > 0.0) {
          cplx sum{0.0, 0.0};
          for (int p = 0; p < paths; ++p)
            sum += std::polar(1.0, e.omega[p] * time_s + e.phase[p]);
          value += scatter_scale * sum;
        }
        real.h(r, c) = value;
      }
    }
    trace.realizations.push_back(std::move(real));
  }
  return trace;
}

rmat SvdTriple::sigma() const {
  rmat out = rmat::Zero(u.rows(), v.rows());
  for (int i = 0; i < s.size(); ++i) out(i, i) = s(i);
  return out;
}

SvdTriple svd_decompose(const cmat& h) {
  if (!all_finite(h)) fail(errc::numeric, "svd_decompose: non-finite input");
  Eigen::JacobiSVD<cmat> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  SvdTriple triple;
  triple.u = svd.matrixU();
  triple.v = svd.matrixV();
  triple.s = svd.singularValues();
  return triple;
}

static void check_stream_count(const SvdTriple& triple, const PrecodeConfig& cfg) {
  const int dmax = std::min(triple.n_r(), triple.n_t());
  if (cfg.d < 1 || cfg.d > dmax) fail(errc::config, "stream count d out of range");
}

cvec precode(const cvec& z, const SvdTriple& triple, const PrecodeConfig& cfg) {
  check_stream_count(triple, cfg);
  if (z.size() != cfg.d) fail(errc::shape, "precode: z length does not match stream count");
  return triple.v.leftCols(cfg.d) * z;
}

cvec transmit(const cvec& x, const cmat& h, const NoiseModel& noise) {
  if (x.size() != h.cols()) fail(errc::shape, "transmit: x length does not match N_t");
  cvec y = h * x;
  if (std::isinf(noise.snr_db)) return y;  // noiseless sentinel
  const double snr_lin = std::pow(10.0, noise.snr_db / 10.0);
  const double sigma2 = x.squaredNorm() / (static_cast<double>(h.rows()) * snr_lin);
  Rng rng(derive_seed(noise.rng_seed, "mimo.noise"));
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += rng.cgaussian(sigma2);
  return y;
}

cvec detect(const cvec& y, const SvdTriple& triple, const PrecodeConfig& cfg,
            std::vector<int>* zeroed) {
  check_stream_count(triple, cfg);
  if (y.size() != triple.n_r()) fail(errc::shape, "detect: y length does not match N_r");
  cvec out = (triple.u.adjoint() * y).head(cfg.d);
  if (cfg.equalize) {
    for (int i = 0; i < cfg.d; ++i) {
      if (triple.s(i) < 1e-12) {
        out(i) = cplx{0.0, 0.0};
        if (zeroed) zeroed->push_back(i);
      } else {
        out(i) /= triple.s(i);
      }
    }
  }
  return out;
}

cmat quantize_feedback(const cmat& v_d, std::int64_t bits_total) {
  if (bits_total <= 0) fail(errc::config, "quantize_feedback: bits_total must be positive");
  const std::int64_t components = 2 * v_d.rows() * v_d.cols();
  if (components == 0) fail(errc::invalid_input, "quantize_feedback: empty matrix");
  std::int64_t bits = bits_total / components;
  if (bits < 1) bits = 1;
  if (bits > 52) bits = 52;  // below double precision; finer levels are no-ops

  const double scale = v_d.cwiseAbs().maxCoeff() > 0.0
                           ? std::max(v_d.real().cwiseAbs().maxCoeff(),
                                      v_d.imag().cwiseAbs().maxCoeff())
                           : 0.0;
  if (scale == 0.0) return cmat::Zero(v_d.rows(), v_d.cols());

  const double step = 2.0 / std::ldexp(1.0, static_cast<int>(bits));
  const double top = 1.0 - step / 2.0;
  auto quantize = [&](double v) {
    const double q = step * (std::floor(v / scale / step) + 0.5);
    return scale * std::clamp(q, -top, top);
  };

  cmat out(v_d.rows(), v_d.cols());
  for (Eigen::Index r = 0; r < v_d.rows(); ++r)
    for (Eigen::Index c = 0; c < v_d.cols(); ++c)
      out(r, c) = cplx{quantize(v_d(r, c).real()), quantize(v_d(r, c).imag())};
  return out;
}

}  // namespace semkb::mimo
