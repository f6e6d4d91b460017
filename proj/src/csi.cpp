#include "csi.hpp"

#include <cmath>

namespace semkb::csi {

CsiTensorReal complex_to_real(const mimo::ChannelTrace& trace) {
  if (trace.realizations.empty()) fail(errc::invalid_input, "complex_to_real: empty trace");
  trace.validate();
  const int nr = trace.n_r();
  const int nt = trace.n_t();
  const int t_len = static_cast<int>(trace.length());

  CsiTensorReal out;
  out.n_r = nr;
  out.n_t = nt;
  out.sample_interval_ms = trace.sample_interval_ms();
  out.t_first = trace.realizations.front().t_index;
  out.series.resize(2 * nr * nt, t_len);
  for (int t = 0; t < t_len; ++t) {
    const cmat& h = trace.h(static_cast<std::size_t>(t));
    for (int r = 0; r < nr; ++r) {
      for (int c = 0; c < nt; ++c) {
        const int k = (r * nt + c) * 2;
        out.series(k, t) = h(r, c).real();
        out.series(k + 1, t) = h(r, c).imag();
      }
    }
  }
  return out;
}

mimo::ChannelTrace real_to_complex(const CsiTensorReal& t) {
  if (t.rows() != 2 * t.n_r * t.n_t)
    fail(errc::shape, "real_to_complex: row count does not match antenna metadata");
  mimo::ChannelTrace trace;
  trace.model_tag = mimo::ModelTag::from_file;
  trace.realizations.reserve(static_cast<std::size_t>(t.t()));
  for (int col = 0; col < t.t(); ++col) {
    mimo::ChannelRealization real;
    real.t_index = t.t_first + col;
    real.sample_interval_ms = t.sample_interval_ms;
    real.h.resize(t.n_r, t.n_t);
    for (int r = 0; r < t.n_r; ++r) {
      for (int c = 0; c < t.n_t; ++c) {
        const int k = (r * t.n_t + c) * 2;
        real.h(r, c) = cplx{t.series(k, col), t.series(k + 1, col)};
      }
    }
    trace.realizations.push_back(std::move(real));
  }
  return trace;
}

std::pair<CsiTensorReal, NormStats> normalize(const CsiTensorReal& t) {
  const auto count = static_cast<double>(t.series.size());
  if (count < 2) fail(errc::invalid_input, "normalize: need at least 2 entries");

  NormStats stats;
  stats.mu = t.series.mean();

  // exact constancy check: roundoff in the mean must not produce a tiny
  // nonzero sigma for a flat tensor
  if (t.series.maxCoeff() == t.series.minCoeff()) {
    stats.mu = t.series.minCoeff();
    stats.sigma = 1.0;
    CsiTensorReal out = t;
    out.series.setZero();
    return {out, stats};
  }

  stats.sigma = std::sqrt((t.series.array() - stats.mu).square().sum() / count);
  CsiTensorReal out = t;
  out.series = (t.series.array() - stats.mu) / stats.sigma;
  return {out, stats};
}

CsiTensorReal denormalize(const CsiTensorReal& t, const NormStats& stats) {
  CsiTensorReal out = t;
  out.series = t.series.array() * stats.sigma + stats.mu;
  return out;
}

PatchSet patch(const CsiTensorReal& t, int l_patch, int stride) {
  if (l_patch < 1 || stride < 1) fail(errc::config, "patch: l_patch and stride must be positive");
  if (l_patch > t.t()) fail(errc::config, "patch: l_patch exceeds series length");

  const int n_patch = (t.t() - l_patch) / stride + 1;
  PatchSet set;
  set.l_patch = l_patch;
  set.stride = stride;
  set.n_r = t.n_r;
  set.n_t = t.n_t;
  set.rows.reserve(static_cast<std::size_t>(t.rows()));
  for (int k = 0; k < t.rows(); ++k) {
    rmat patches(n_patch, l_patch);
    for (int p = 0; p < n_patch; ++p)
      patches.row(p) = t.series.row(k).segment(p * stride, l_patch);
    set.rows.push_back(std::move(patches));
  }
  return set;
}

mimo::ChannelTrace to_csi(const rmat& flat, int t_pre, int n_r, int n_t, const NormStats& stats) {
  if (t_pre < 1 || n_r < 1 || n_t < 1) fail(errc::config, "to_csi: non-positive shape");
  if (flat.rows() != 2 * n_r * n_t || flat.cols() != t_pre)
    fail(errc::shape, "to_csi: flat prediction has wrong entry count");

  CsiTensorReal t;
  t.n_r = n_r;
  t.n_t = n_t;
  t.series = flat;
  return real_to_complex(denormalize(t, stats));
}

}  // namespace semkb::csi
