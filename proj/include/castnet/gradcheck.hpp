#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "castnet/errors.hpp"

namespace castnet {

// Compares an analytic gradient of a scalar function against central
// differences (f(x+h) - f(x-h)) / 2h, one coordinate at a time. Returns the
// largest |a - n| / max(|a|, |n|, 1e-8) over all coordinates.
inline double finite_difference_check(const std::function<double(std::span<const double>)>& f,
                                      std::span<const double> point, std::span<const double> analytic,
                                      double step) {
  if (point.size() != analytic.size()) {
    throw ShapeError("finite_difference_check: gradient length does not match point length");
  }
  std::vector<double> x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double up = f(x);
    x[i] = saved - step;
    const double down = f(x);
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace castnet
