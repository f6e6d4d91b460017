#pragma once

#include <vector>

#include "cdg.hpp"
#include "common.hpp"
#include "mimo.hpp"

namespace semkb::eval {

// One retrieval query: gallery indices ranked best-first (a permutation of the
// gallery) plus the indices that count as relevant for this query.
struct QueryResult {
  std::vector<int> ranking;
  std::vector<int> relevant;
};

// Mean over the relevant set of precision at each relevant item's rank.
// Relevant ids missing from the ranking contribute zero while still counting
// in the denominator; duplicates in `relevant` are collapsed.
double average_precision(const std::vector<int>& ranking, const std::vector<int>& relevant);

// mean per-query average precision
double map_score(const std::vector<QueryResult>& results);

// fraction of queries with at least one relevant item in the top k; k is
// clamped to each query's gallery size
double rank_at_k(const std::vector<QueryResult>& results, int k);

// channel-reconstruction error; delegates to the training-side definition so
// there is exactly one NMSE in the codebase
double nmse_metric(const mimo::ChannelTrace& pred, const mimo::ChannelTrace& truth);

// rank correlation with average ranks on ties; needs >= 3 points and
// non-constant inputs
double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace semkb::eval
