#include "eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace semkb::eval {

double average_precision(const std::vector<int>& ranking, const std::vector<int>& relevant) {
  const std::unordered_set<int> wanted(relevant.begin(), relevant.end());
  if (wanted.empty()) fail(errc::metric, "average_precision: empty relevant set");

  double sum = 0.0;
  int hits = 0;
  for (std::size_t pos = 0; pos < ranking.size(); ++pos) {
    if (wanted.count(ranking[pos]) != 0) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(pos + 1);
    }
  }
  return sum / static_cast<double>(wanted.size());
}

double map_score(const std::vector<QueryResult>& results) {
  if (results.empty()) fail(errc::metric, "map_score: no queries");
  double sum = 0.0;
  for (const auto& q : results) sum += average_precision(q.ranking, q.relevant);
  return sum / static_cast<double>(results.size());
}

double rank_at_k(const std::vector<QueryResult>& results, int k) {
  if (k < 1) fail(errc::invalid_input, "rank_at_k: k must be at least 1");
  if (results.empty()) fail(errc::metric, "rank_at_k: no queries");

  int hits = 0;
  for (const auto& q : results) {
    const std::unordered_set<int> wanted(q.relevant.begin(), q.relevant.end());
    if (wanted.empty()) fail(errc::metric, "rank_at_k: empty relevant set");
    const std::size_t depth = std::min<std::size_t>(q.ranking.size(), static_cast<std::size_t>(k));
    for (std::size_t pos = 0; pos < depth; ++pos) {
      if (wanted.count(q.ranking[pos]) != 0) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double nmse_metric(const mimo::ChannelTrace& pred, const mimo::ChannelTrace& truth) {
  return cdg::nmse_loss(pred, truth);
}

namespace {

// average ranks: tied runs share the mean of the positions they occupy
std::vector<double> average_ranks(const std::vector<double>& xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });

  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double shared = 0.5 * static_cast<double>(i + j) + 1.0;  // mean of 1-based positions
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size())
    fail(errc::invalid_input, "spearman_rho: length mismatch " + std::to_string(xs.size()) +
                                  " vs " + std::to_string(ys.size()));
  if (xs.size() < 3) fail(errc::invalid_input, "spearman_rho: need at least 3 points");
  for (double v : xs)
    if (!std::isfinite(v)) fail(errc::numeric, "spearman_rho: non-finite input");
  for (double v : ys)
    if (!std::isfinite(v)) fail(errc::numeric, "spearman_rho: non-finite input");

  const auto ra = average_ranks(xs);
  const auto rb = average_ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;

  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    const double da = ra[i] - ma;
    const double db = rb[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0)
    fail(errc::metric, "spearman_rho: constant input has no rank ordering");
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

}  // namespace semkb::eval
