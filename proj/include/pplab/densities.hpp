#pragma once

// Analytic densities used as training distributions, as loss weights and as
// the base of the equalization response.

#include <Eigen/Dense>
#include "json.hpp"

#include <array>
#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pplab/rng.hpp"

namespace pplab {

class Density1D {
 public:
  enum class Kind { gaussian, student_t, uniform };

  static Density1D gaussian(double mu, double sigma);
  static Density1D student_t(double nu, double mu, double sigma);
  static Density1D uniform(double a, double b);

  Kind kind() const { return kind_; }
  double mu() const { return mu_; }
  double sigma() const { return sigma_; }
  double nu() const { return nu_; }
  double lo() const { return a_; }
  double hi() const { return b_; }

  double pdf(double x) const;
  double log_pdf(double x) const;
  /// d/dx log pdf. DomainError outside the open support.
  double score(double x) const;
  double median() const;
  double sample(Rng& rng) const;

  nlohmann::json to_json() const;
  static Density1D from_json(const nlohmann::json& j);

 private:
  Kind kind_ = Kind::gaussian;
  double mu_ = 0.0, sigma_ = 1.0, nu_ = 1.0, a_ = 0.0, b_ = 1.0;
  double log_norm_ = 0.0;
};

/// Two independent scaled Student-t coordinates: x = mu + scale * t_nu.
struct StudentT2D {
  std::array<double, 2> mu{0.0, 0.0};
  std::array<double, 2> scale{0.5, 0.2};
  double nu = 2.0;

  void validate() const;
  Density1D marginal(int axis) const { return Density1D::student_t(nu, mu[axis], scale[axis]); }
};

struct UniformBox2D {
  std::array<double, 2> lo{-40.0, -40.0};
  std::array<double, 2> hi{40.0, 40.0};

  void validate() const;
  double area() const { return (hi[0] - lo[0]) * (hi[1] - lo[1]); }
};

using Density = std::variant<Density1D, StudentT2D, UniformBox2D>;

int dimension(const Density& d);
double pdf(const Density& d, std::span<const double> x);
double log_pdf(const Density& d, std::span<const double> x);
/// Writes one sample of dimension(d) values into `out`.
void sample_into(const Density& d, Rng& rng, std::span<double> out);
/// n i.i.d. samples as a (dim x n) matrix.
Eigen::MatrixXd sample(const Density& d, int n, Rng& rng);

nlohmann::json density_to_json(const Density& d);
Density density_from_json(const nlohmann::json& j);

/// Factorized response S with per-coordinate slope pdf_i(x_i)^gamma.
/// S_i(x) = anchor + integral from the median of base_i to x of pdf_i^gamma,
/// where anchor is 0.5 for gamma == 1 (so S_i is the CDF) and 0 otherwise;
/// for heavy tails with gamma < 1 the integral from -inf diverges.
class Equalizer {
 public:
  Equalizer(std::vector<Density1D> base, double gamma);
  static Equalizer for_student_t(const StudentT2D& d, double gamma);

  std::size_t dimension() const { return base_.size(); }
  double gamma() const { return gamma_; }
  const std::vector<Density1D>& base() const { return base_; }

  Eigen::VectorXd transform(const Eigen::VectorXd& x) const;
  /// Diagonal of the Jacobian, pdf_i(x_i)^gamma.
  Eigen::VectorXd slope(const Eigen::VectorXd& x) const;
  /// ||S(x1) - S(x2)||, each coordinate integrated directly between x1_i and x2_i.
  double distance(const Eigen::VectorXd& x1, const Eigen::VectorXd& x2) const;

 private:
  double integral(std::size_t axis, double from, double to) const;

  std::vector<Density1D> base_;
  double gamma_;
};

inline Eigen::VectorXd equalizer_transform(const Equalizer& eq, const Eigen::VectorXd& x) {
  return eq.transform(x);
}
inline double equalized_distance(const Equalizer& eq, const Eigen::VectorXd& x1, const Eigen::VectorXd& x2) {
  return eq.distance(x1, x2);
}

/// Adaptive Simpson quadrature to absolute tolerance `tol`. Throws
/// NumericalError when the recursion depth is exhausted without converging.
double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol = 1e-9,
                        int max_depth = 50);

}  // namespace pplab
