#include "doctest.h"

#include <cmath>

#include "common.hpp"
#include "csi.hpp"
#include "mimo.hpp"

using namespace semkb;
using namespace semkb::csi;

namespace {

mimo::ChannelTrace random_trace(int n_r, int n_t, int len, std::uint64_t seed) {
  Rng rng(seed);
  mimo::ChannelTrace trace;
  trace.model_tag = mimo::ModelTag::from_file;
  for (int t = 0; t < len; ++t) {
    mimo::ChannelRealization real;
    real.t_index = t;
    real.h.resize(n_r, n_t);
    for (int r = 0; r < n_r; ++r)
      for (int c = 0; c < n_t; ++c) real.h(r, c) = cplx{rng.gaussian(), rng.gaussian()};
    trace.realizations.push_back(std::move(real));
  }
  return trace;
}

mimo::ChannelTrace single_entry_trace(cplx value) {
  mimo::ChannelTrace trace;
  mimo::ChannelRealization real;
  real.t_index = 0;
  real.h = cmat::Constant(1, 1, value);
  trace.realizations.push_back(real);
  return trace;
}

}  // namespace

TEST_CASE("complex_to_real: definition on a 1x1 trace") {
  const auto tensor = complex_to_real(single_entry_trace(cplx{1.0, 2.0}));
  REQUIRE(tensor.rows() == 2);
  REQUIRE(tensor.t() == 1);
  CHECK(tensor.series(0, 0) == 1.0);
  CHECK(tensor.series(1, 0) == 2.0);
}

TEST_CASE("complex_to_real: exact round-trip") {
  const auto trace = random_trace(3, 4, 6, 17);
  const auto back = real_to_complex(complex_to_real(trace));
  REQUIRE(back.length() == trace.length());
  for (std::size_t t = 0; t < trace.length(); ++t) CHECK(back.h(t) == trace.h(t));
  CHECK(back.realizations[2].t_index == trace.realizations[2].t_index);
}

TEST_CASE("complex_to_real: real-valued trace has zero imaginary rows") {
  auto trace = random_trace(2, 2, 4, 23);
  for (auto& r : trace.realizations) r.h = r.h.real().cast<cplx>();
  const auto tensor = complex_to_real(trace);
  for (int k = 1; k < tensor.rows(); k += 2) CHECK(tensor.series.row(k).norm() == 0.0);
  CHECK_THROWS_AS(complex_to_real(mimo::ChannelTrace{}), error);
}

TEST_CASE("normalize: hand case {1, 3} and idempotence") {
  const auto [normed, stats] = normalize(complex_to_real(single_entry_trace(cplx{1.0, 3.0})));
  CHECK(stats.mu == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(stats.sigma == doctest::Approx(1.0).epsilon(1e-12));  // population std
  CHECK(normed.series(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(normed.series(1, 0) == doctest::Approx(1.0).epsilon(1e-12));

  // already standardized input is unchanged and reports stats (0, 1)
  const auto [again, stats2] = normalize(normed);
  CHECK(stats2.mu == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(stats2.sigma == doctest::Approx(1.0).epsilon(1e-9));
  CHECK((again.series - normed.series).norm() < 1e-9);
}

TEST_CASE("normalize: output statistics on random input") {
  const auto tensor = complex_to_real(random_trace(4, 4, 16, 31));
  const auto [normed, stats] = normalize(tensor);
  const double n = static_cast<double>(normed.series.size());
  const double mean = normed.series.mean();
  const double stddev = std::sqrt((normed.series.array() - mean).square().sum() / n);
  CHECK(std::abs(mean) <= 1e-9);
  CHECK(std::abs(stddev - 1.0) <= 1e-9);
  const auto restored = denormalize(normed, stats);
  CHECK((restored.series - tensor.series).norm() < 1e-9);
}

TEST_CASE("normalize: constant tensor maps to zeros with unit sigma") {
  const auto tensor = complex_to_real(single_entry_trace(cplx{5.0, 5.0}));
  const auto [normed, stats] = normalize(tensor);
  CHECK(normed.series.norm() == 0.0);
  CHECK(stats.mu == 5.0);
  CHECK(stats.sigma == 1.0);
  const auto restored = denormalize(normed, stats);
  CHECK(restored.series(0, 0) == 5.0);
  CHECK(restored.series(1, 0) == 5.0);
}

TEST_CASE("denormalize: identity stats and affine shift") {
  auto tensor = complex_to_real(single_entry_trace(cplx{0.0, 0.0}));
  CHECK(denormalize(tensor, NormStats{0.0, 1.0}).series == tensor.series);
  const auto shifted = denormalize(tensor, NormStats{5.0, 2.0});
  CHECK(shifted.series(0, 0) == 5.0);
  CHECK(shifted.series(1, 0) == 5.0);
}

TEST_CASE("patch: default geometry T=16 L=4 S=2 gives 7 windows") {
  const auto tensor = complex_to_real(random_trace(2, 2, 16, 41));
  const auto set = patch(tensor, 4, 2);
  CHECK(set.n_patch() == 7);
  REQUIRE(set.rows.size() == 8);
  // window p starts at p*stride
  for (int p = 0; p < 7; ++p)
    CHECK((set.rows[3].row(p).transpose() -
           tensor.series.row(3).segment(p * 2, 4).transpose())
              .norm() == 0.0);
}

TEST_CASE("patch: single window when T equals L") {
  const auto tensor = complex_to_real(random_trace(1, 2, 5, 43));
  const auto set = patch(tensor, 5, 3);
  CHECK(set.n_patch() == 1);
  CHECK((set.rows[0].row(0).transpose() - tensor.series.row(0).transpose()).norm() == 0.0);
}

TEST_CASE("patch: disjoint cover with S = L") {
  const auto tensor = complex_to_real(random_trace(1, 1, 8, 47));
  const auto set = patch(tensor, 4, 4);
  CHECK(set.n_patch() == 2);
  CHECK((set.rows[0].row(0).transpose() - tensor.series.row(0).head(4).transpose()).norm() == 0.0);
  CHECK((set.rows[0].row(1).transpose() - tensor.series.row(0).tail(4).transpose()).norm() == 0.0);
}

TEST_CASE("patch: window count matches direct enumeration") {
  Rng rng(53);
  for (int trial = 0; trial < 50; ++trial) {
    const int t_len = 2 + static_cast<int>(rng.below(40));
    const int l = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(t_len)));
    const int s = 1 + static_cast<int>(rng.below(8));
    const auto tensor = complex_to_real(random_trace(1, 1, t_len, 600 + trial));
    const auto set = patch(tensor, l, s);
    int direct = 0;
    for (int start = 0; start + l <= t_len; start += s) ++direct;
    CHECK(set.n_patch() == direct);
  }
}

TEST_CASE("patch: rejects oversized window") {
  const auto tensor = complex_to_real(random_trace(1, 1, 4, 59));
  CHECK_THROWS_AS(patch(tensor, 5, 1), error);
  CHECK_THROWS_AS(patch(tensor, 0, 1), error);
  CHECK_THROWS_AS(patch(tensor, 2, 0), error);
}

TEST_CASE("to_csi: inverse of the normalize/flatten pipeline") {
  const auto trace = random_trace(3, 2, 4, 61);
  const auto tensor = complex_to_real(trace);
  const auto [normed, stats] = normalize(tensor);
  const auto rebuilt = to_csi(normed.series, 4, 3, 2, stats);
  REQUIRE(rebuilt.length() == 4);
  for (std::size_t t = 0; t < 4; ++t) CHECK((rebuilt.h(t) - trace.h(t)).norm() < 1e-9);
}

TEST_CASE("to_csi: zero input yields the constant-mu trace") {
  const auto rebuilt = to_csi(rmat::Zero(2 * 2 * 3, 5), 5, 2, 3, NormStats{2.5, 4.0});
  for (std::size_t t = 0; t < 5; ++t)
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c) CHECK(rebuilt.h(t)(r, c) == cplx{2.5, 2.5});
}

TEST_CASE("to_csi: degenerate 1x1x1 round-trip and shape errors") {
  const auto trace = single_entry_trace(cplx{-0.25, 0.75});
  const auto [normed, stats] = normalize(complex_to_real(trace));
  const auto rebuilt = to_csi(normed.series, 1, 1, 1, stats);
  CHECK(std::abs(rebuilt.h(0)(0, 0) - trace.h(0)(0, 0)) < 1e-12);

  CHECK_THROWS_AS(to_csi(rmat::Zero(3, 1), 1, 1, 1, stats), error);
  CHECK_THROWS_AS(to_csi(rmat::Zero(2, 2), 1, 1, 1, stats), error);
}
