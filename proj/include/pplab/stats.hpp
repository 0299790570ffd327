#pragma once

// Rank correlation, polynomial smoothing and small helpers used to turn
// per-point evaluations into curves.

#include <Eigen/Dense>

#include <span>

namespace pplab {

struct CorrelationResult {
  double rho;
  int n;
  int tie_count;  // sum over tie groups, both sides, of (group size - 1)
};

/// Average ranks, 1-based; tied values share the mean of their positions.
Eigen::VectorXd average_ranks(std::span<const double> xs);

/// Spearman's rho: Pearson correlation of average ranks. Throws ShapeError on
/// length mismatch, InputError for fewer than 3 points or non-finite values,
/// UndefinedCorrelation when either side is constant.
CorrelationResult spearman(std::span<const double> xs, std::span<const double> ys);

/// Least-squares Chebyshev fit on [min(xs), max(xs)] mapped to [-1, 1].
class PolyFit {
 public:
  PolyFit(std::span<const double> xs, std::span<const double> ys, int degree = 20);

  double operator()(double x) const;
  Eigen::VectorXd operator()(std::span<const double> xs) const;
  int degree() const { return static_cast<int>(coef_.size()) - 1; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

 private:
  double lo_ = 0.0;
  double hi_ = 0.0;
  Eigen::VectorXd coef_;
};

inline PolyFit polyfit_smooth(std::span<const double> xs, std::span<const double> ys, int degree = 20) {
  return PolyFit(xs, ys, degree);
}

struct Performance {
  double distortion;
  double rate;
};

/// (D1 / R1) / (D2 / R2).
double relative_performance(const Performance& num, const Performance& den);

/// sqrt(sigma2 / m).
double std_error_mean(double sigma2, long m);

}  // namespace pplab
