#pragma once

#include <utility>
#include <vector>

#include "common.hpp"
#include "mimo.hpp"

namespace semkb::csi {

// Real view of a complex channel trace: one time series per antenna component.
// Row k = (r * N_t + c) * 2 + comp holds component comp (0 = real, 1 = imag)
// of antenna pair (r, c); columns index time.
struct CsiTensorReal {
  rmat series;  // [2 * N_r * N_t, T]
  int n_r = 0;
  int n_t = 0;
  double sample_interval_ms = 1.0;
  std::int64_t t_first = 0;  // t_index of column 0

  int t() const { return static_cast<int>(series.cols()); }
  int rows() const { return static_cast<int>(series.rows()); }
};

struct NormStats {
  double mu = 0.0;
  double sigma = 1.0;
};

// Sliding-window patches, one [N_patch, L_patch] matrix per component row.
struct PatchSet {
  std::vector<rmat> rows;
  int l_patch = 0;
  int stride = 0;
  NormStats stats;
  int n_r = 0;
  int n_t = 0;

  int n_patch() const { return rows.empty() ? 0 : static_cast<int>(rows.front().rows()); }
};

CsiTensorReal complex_to_real(const mimo::ChannelTrace& trace);

// exact inverse of complex_to_real
mimo::ChannelTrace real_to_complex(const CsiTensorReal& t);

// Global zero-mean/unit-std over all entries (population std). A constant
// tensor maps to all zeros with stats (mu, 1) so denormalize stays exact.
std::pair<CsiTensorReal, NormStats> normalize(const CsiTensorReal& t);

CsiTensorReal denormalize(const CsiTensorReal& t, const NormStats& stats);

// N_patch = floor((T - l_patch) / stride) + 1 contiguous windows per row.
PatchSet patch(const CsiTensorReal& t, int l_patch, int stride);

// Denormalizes a [2*N_r*N_t, T_pre] prediction and rebuilds the complex trace
// (t_index 0..T_pre-1; callers re-stamp time metadata as needed).
mimo::ChannelTrace to_csi(const rmat& flat, int t_pre, int n_r, int n_t, const NormStats& stats);

}  // namespace semkb::csi
