#pragma once

#include <algorithm>
#include <cmath>

// central finite difference of a scalar loss w.r.t. one parameter slot
template <typename LossFn>
double central_diff(double* slot, double h, LossFn&& loss) {
  const double orig = *slot;
  *slot = orig + h;
  const double up = loss();
  *slot = orig - h;
  const double down = loss();
  *slot = orig;
  return (up - down) / (2.0 * h);
}

inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}
