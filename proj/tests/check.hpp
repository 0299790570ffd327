#pragma once

#include <algorithm>
#include <cmath>

namespace pplab::test {

/// |a - b| relative to the larger magnitude, with `floor` guarding near-zero entries.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central difference of f at the current value of *slot.
template <class F>
double central_diff(double* slot, double h, F&& f) {
  const double keep = *slot;
  *slot = keep + h;
  const double up = f();
  *slot = keep - h;
  const double down = f();
  *slot = keep;
  return (up - down) / (2.0 * h);
}

}  // namespace pplab::test
