#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "cdg.hpp"
#include "doctest.h"
#include "eval.hpp"
#include "mimo.hpp"

using namespace semkb;

namespace {

mimo::ChannelTrace toy_trace(int n, std::size_t length, std::uint64_t seed) {
  mimo::ChannelModelParams p;
  p.n_r = n;
  p.n_t = n;
  p.doppler_hz = 40.0;
  p.path_count = 6;
  p.k_factor_db = 3.0;
  return mimo::generate_trace(p, seed, static_cast<int>(length));
}

}  // namespace

TEST_CASE("average_precision matches hand-computed rankings") {
  // all relevant items first
  CHECK(eval::average_precision({0, 1, 2, 3}, {0, 1}) == doctest::Approx(1.0));
  // single relevant item at rank 2 of 2
  CHECK(eval::average_precision({1, 0}, {0}) == doctest::Approx(0.5));
  // relevant at ranks 1 and 3: (1/1 + 2/3) / 2
  CHECK(eval::average_precision({5, 9, 7, 2}, {5, 7}) == doctest::Approx(5.0 / 6.0));
  // duplicated relevant ids collapse
  CHECK(eval::average_precision({1, 0}, {0, 0}) == doctest::Approx(0.5));
  // relevant id absent from the ranking still counts in the denominator
  CHECK(eval::average_precision({1, 0}, {0, 42}) == doctest::Approx(0.25));

  CHECK_THROWS_AS(eval::average_precision({0, 1}, {}), error);
}

TEST_CASE("average_precision ignores the order of trailing irrelevant items") {
  const std::vector<int> relevant = {3, 8};
  const std::vector<int> ranking = {3, 5, 8, 1, 6, 9, 4};
  const double base = eval::average_precision(ranking, relevant);

  std::vector<int> shuffled = ranking;  // permute only the tail after the last relevant hit
  std::swap(shuffled[3], shuffled[6]);
  std::swap(shuffled[4], shuffled[5]);
  CHECK(eval::average_precision(shuffled, relevant) == base);

  CHECK(base >= 0.0);
  CHECK(base <= 1.0);
}

TEST_CASE("map_score averages per-query precision") {
  eval::QueryResult perfect{{0, 1, 2}, {0}};
  eval::QueryResult half{{1, 0}, {0}};
  CHECK(eval::map_score({perfect}) == doctest::Approx(1.0));
  CHECK(eval::map_score({perfect, half}) == doctest::Approx(0.75));
  CHECK_THROWS_AS(eval::map_score({}), error);
}

TEST_CASE("rank_at_k thresholds and clamps") {
  eval::QueryResult top{{2, 0, 1}, {2}};
  eval::QueryResult deep{{4, 3, 1, 0, 2, 5}, {5}};  // relevant at rank 6

  CHECK(eval::rank_at_k({top}, 1) == doctest::Approx(1.0));
  CHECK(eval::rank_at_k({deep}, 5) == doctest::Approx(0.0));
  CHECK(eval::rank_at_k({deep}, 10) == doctest::Approx(1.0));  // clamped to gallery size
  CHECK(eval::rank_at_k({top, deep}, 5) == doctest::Approx(0.5));

  // non-decreasing in k whenever results are fixed
  double prev = 0.0;
  for (int k = 1; k <= 6; ++k) {
    const double r = eval::rank_at_k({top, deep}, k);
    CHECK(r >= prev);
    prev = r;
  }
  CHECK(eval::rank_at_k({eval::QueryResult{{0, 1}, {1}}}, 2) == doctest::Approx(1.0));

  CHECK_THROWS_AS(eval::rank_at_k({top}, 0), error);
  CHECK_THROWS_AS(eval::rank_at_k({}, 1), error);
  CHECK_THROWS_AS(eval::rank_at_k({eval::QueryResult{{0}, {}}}, 1), error);
}

TEST_CASE("nmse_metric is the training-side NMSE, identically") {
  const auto truth = toy_trace(2, 12, 5);
  const auto pred = toy_trace(2, 12, 6);
  CHECK(eval::nmse_metric(pred, truth) == cdg::nmse_loss(pred, truth));
  CHECK(eval::nmse_metric(truth, truth) == 0.0);

  auto zero = truth;
  for (auto& r : zero.realizations) r.h.setZero();
  CHECK(eval::nmse_metric(zero, truth) == 1.0);

  auto twice = truth;
  for (auto& r : twice.realizations) r.h *= 2.0;
  CHECK(eval::nmse_metric(twice, truth) == 1.0);
}

TEST_CASE("spearman_rho ranks, averages ties, and bounds itself") {
  const std::vector<double> xs = {10.0, 20.0, 30.0, 40.0};
  CHECK(eval::spearman_rho(xs, xs) == doctest::Approx(1.0));

  std::vector<double> rev = xs;
  std::reverse(rev.begin(), rev.end());
  CHECK(eval::spearman_rho(xs, rev) == doctest::Approx(-1.0));

  // hand case: rank displacement d = (0, -1, 1, 0), rho = 1 - 6*2/(4*15)
  CHECK(eval::spearman_rho(xs, {1.0, 3.0, 2.0, 4.0}) == doctest::Approx(0.8));

  // tied pair takes the average rank 2.5: rho = sqrt(0.9)
  CHECK(eval::spearman_rho({1.0, 2.0, 2.0, 3.0}, {1.0, 2.0, 3.0, 4.0}) ==
        doctest::Approx(std::sqrt(0.9)));

  // monotone but nonlinear is still a perfect rank match
  CHECK(eval::spearman_rho({1.0, 2.0, 3.0, 4.0}, {1.0, 8.0, 27.0, 64.0}) == doctest::Approx(1.0));

  CHECK_THROWS_AS(eval::spearman_rho({1.0, 2.0}, {1.0, 2.0}), error);
  CHECK_THROWS_AS(eval::spearman_rho({1.0, 2.0, 3.0}, {1.0, 2.0}), error);
  CHECK_THROWS_AS(eval::spearman_rho({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}), error);
  CHECK_THROWS_AS(
      eval::spearman_rho({1.0, std::numeric_limits<double>::quiet_NaN(), 3.0}, {1.0, 2.0, 3.0}),
      error);
}
