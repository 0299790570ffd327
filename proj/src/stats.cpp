#include "pplab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "pplab/errors.hpp"

namespace pplab {

namespace {

// Ranks plus the number of extra members in tie groups.
std::pair<Eigen::VectorXd, int> rank_with_ties(std::span<const double> xs) {
  const std::size_t n = xs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  Eigen::VectorXd r(static_cast<Eigen::Index>(n));
  int ties = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && xs[order[j]] == xs[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) r[static_cast<Eigen::Index>(order[k])] = avg;
    ties += static_cast<int>(j - i - 1);
    i = j;
  }
  return {r, ties};
}

}  // namespace

Eigen::VectorXd average_ranks(std::span<const double> xs) { return rank_with_ties(xs).first; }

CorrelationResult spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ShapeError("spearman: inputs differ in length");
  if (xs.size() < 3) throw InputError("spearman: need at least 3 points");
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw InputError("spearman: non-finite value");
  const auto [rx, tx] = rank_with_ties(xs);
  const auto [ry, ty] = rank_with_ties(ys);
  const int n = static_cast<int>(xs.size());
  if (tx == n - 1 || ty == n - 1) throw UndefinedCorrelation("spearman: constant input");

  if (tx == 0 && ty == 0) {
    // Distinct ranks: the classical formula is exact in integer arithmetic.
    std::int64_t d2 = 0;
    for (int i = 0; i < n; ++i) {
      const auto d = static_cast<std::int64_t>(rx[i]) - static_cast<std::int64_t>(ry[i]);
      d2 += d * d;
    }
    const auto nn = static_cast<std::int64_t>(n);
    const double rho = 1.0 - 6.0 * static_cast<double>(d2) / static_cast<double>(nn * (nn * nn - 1));
    return {rho, n, 0};
  }
  const Eigen::ArrayXd cx = rx.array() - rx.mean();
  const Eigen::ArrayXd cy = ry.array() - ry.mean();
  double rho = (cx * cy).sum() / std::sqrt((cx * cx).sum() * (cy * cy).sum());
  rho = std::clamp(rho, -1.0, 1.0);
  return {rho, n, tx + ty};
}

PolyFit::PolyFit(std::span<const double> xs, std::span<const double> ys, int degree) {
  if (xs.size() != ys.size()) throw ShapeError("polyfit: inputs differ in length");
  if (degree < 0) throw ConfigError("polyfit: degree must be >= 0");
  if (xs.size() < static_cast<std::size_t>(degree) + 1) throw InputError("polyfit: need at least degree + 1 points");
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (!std::isfinite(xs[i]) || !std::isfinite(ys[i])) throw InputError("polyfit: non-finite value");
  lo_ = *std::min_element(xs.begin(), xs.end());
  hi_ = *std::max_element(xs.begin(), xs.end());
  if (!(hi_ > lo_) && degree > 0) throw NumericalError("polyfit: rank-deficient system (all x equal)");

  const auto n = static_cast<Eigen::Index>(xs.size());
  Eigen::MatrixXd a(n, degree + 1);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double t = hi_ > lo_ ? (2.0 * xs[static_cast<std::size_t>(i)] - lo_ - hi_) / (hi_ - lo_) : 0.0;
    a(i, 0) = 1.0;
    if (degree >= 1) a(i, 1) = t;
    for (int k = 2; k <= degree; ++k) a(i, k) = 2.0 * t * a(i, k - 1) - a(i, k - 2);
    b[i] = ys[static_cast<std::size_t>(i)];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(a);
  if (qr.rank() < degree + 1) throw NumericalError("polyfit: rank-deficient system");
  coef_ = qr.solve(b);
}

double PolyFit::operator()(double x) const {
  const double eps = 1e-9 * std::max(1.0, hi_ - lo_);
  if (!(x >= lo_ - eps && x <= hi_ + eps)) throw DomainError("polyfit: x outside the fitted range");
  const double t = hi_ > lo_ ? std::clamp((2.0 * x - lo_ - hi_) / (hi_ - lo_), -1.0, 1.0) : 0.0;
  // Clenshaw recurrence.
  double b1 = 0.0, b2 = 0.0;
  for (Eigen::Index k = coef_.size() - 1; k >= 1; --k) {
    const double b0 = coef_[k] + 2.0 * t * b1 - b2;
    b2 = b1;
    b1 = b0;
  }
  return coef_[0] + t * b1 - b2;
}

Eigen::VectorXd PolyFit::operator()(std::span<const double> xs) const {
  Eigen::VectorXd out(static_cast<Eigen::Index>(xs.size()));
  for (std::size_t i = 0; i < xs.size(); ++i) out[static_cast<Eigen::Index>(i)] = (*this)(xs[i]);
  return out;
}

double relative_performance(const Performance& num, const Performance& den) {
  if (!(num.rate > 0.0) || !(den.rate > 0.0)) throw DomainError("relative_performance: rates must be positive");
  if (!(num.distortion >= 0.0)) throw DomainError("relative_performance: negative distortion");
  const double pd = den.distortion / den.rate;
  if (!(pd > 0.0)) throw DomainError("relative_performance: denominator performance is zero");
  return (num.distortion / num.rate) / pd;
}

double std_error_mean(double sigma2, long m) {
  if (m < 1) throw ConfigError("std_error_mean: batch size must be >= 1");
  if (!(sigma2 >= 0.0)) throw DomainError("std_error_mean: variance must be non-negative");
  return std::sqrt(sigma2) / std::sqrt(static_cast<double>(m));
}

}  // namespace pplab
