#include "pplab/densities.hpp"

#include <cmath>
#include <numbers>

#include "pplab/errors.hpp"

namespace pplab {

namespace {

void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw InputError(std::string(what) + ": non-finite argument");
}

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

}  // namespace

Density1D Density1D::gaussian(double mu, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(mu)) throw ConfigError("gaussian: sigma must be positive");
  Density1D d;
  d.kind_ = Kind::gaussian;
  d.mu_ = mu;
  d.sigma_ = sigma;
  d.log_norm_ = -std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
  return d;
}

Density1D Density1D::student_t(double nu, double mu, double sigma) {
  if (!(sigma > 0.0) || !(nu > 0.0) || !std::isfinite(mu))
    throw ConfigError("student_t: nu and sigma must be positive");
  Density1D d;
  d.kind_ = Kind::student_t;
  d.nu_ = nu;
  d.mu_ = mu;
  d.sigma_ = sigma;
  d.log_norm_ = std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
                0.5 * std::log(nu * std::numbers::pi) - std::log(sigma);
  return d;
}

Density1D Density1D::uniform(double a, double b) {
  if (!(a < b) || !std::isfinite(a) || !std::isfinite(b)) throw ConfigError("uniform: need a < b");
  Density1D d;
  d.kind_ = Kind::uniform;
  d.a_ = a;
  d.b_ = b;
  d.log_norm_ = -std::log(b - a);
  return d;
}

double Density1D::log_pdf(double x) const {
  require_finite(x, "log_pdf");
  switch (kind_) {
    case Kind::gaussian: {
      const double z = (x - mu_) / sigma_;
      return log_norm_ - 0.5 * z * z;
    }
    case Kind::student_t: {
      const double z = (x - mu_) / sigma_;
      return log_norm_ - 0.5 * (nu_ + 1.0) * std::log1p(z * z / nu_);
    }
    case Kind::uniform:
      return (x >= a_ && x <= b_) ? log_norm_ : -std::numeric_limits<double>::infinity();
  }
  return 0.0;
}

double Density1D::pdf(double x) const { return std::exp(log_pdf(x)); }

double Density1D::score(double x) const {
  require_finite(x, "score");
  switch (kind_) {
    case Kind::gaussian:
      return -(x - mu_) / (sigma_ * sigma_);
    case Kind::student_t: {
      const double z = (x - mu_) / sigma_;
      return -(nu_ + 1.0) * z / (nu_ + z * z) / sigma_;
    }
    case Kind::uniform:
      if (!(x > a_ && x < b_)) throw DomainError("score: x outside the open support of the uniform density");
      return 0.0;
  }
  return 0.0;
}

double Density1D::median() const { return kind_ == Kind::uniform ? 0.5 * (a_ + b_) : mu_; }

double Density1D::sample(Rng& rng) const {
  switch (kind_) {
    case Kind::gaussian:
      return rng.normal(mu_, sigma_);
    case Kind::student_t:
      return mu_ + sigma_ * rng.student_t(nu_);
    case Kind::uniform:
      return rng.uniform(a_, b_);
  }
  return 0.0;
}

nlohmann::json Density1D::to_json() const {
  switch (kind_) {
    case Kind::gaussian:
      return {{"kind", "gaussian"}, {"mu", mu_}, {"sigma", sigma_}};
    case Kind::student_t:
      return {{"kind", "student_t"}, {"nu", nu_}, {"mu", mu_}, {"sigma", sigma_}};
    case Kind::uniform:
      return {{"kind", "uniform"}, {"a", a_}, {"b", b_}};
  }
  return {};
}

Density1D Density1D::from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "gaussian") return gaussian(j.value("mu", 0.0), j.value("sigma", 1.0));
  if (kind == "student_t") return student_t(j.value("nu", 2.0), j.value("mu", 0.0), j.value("sigma", 1.0));
  if (kind == "uniform") return uniform(j.value("a", 0.0), j.value("b", 1.0));
  throw ConfigError("unknown 1D density kind '" + kind + "'");
}

void StudentT2D::validate() const {
  if (!(nu > 0.0) || !(scale[0] > 0.0) || !(scale[1] > 0.0))
    throw ConfigError("student_t_2d: nu and scale entries must be positive");
}

void UniformBox2D::validate() const {
  if (!(lo[0] < hi[0]) || !(lo[1] < hi[1])) throw ConfigError("uniform_box_2d: need lo < hi");
}

int dimension(const Density& d) {
  return std::visit(Overloaded{[](const Density1D&) { return 1; }, [](const StudentT2D&) { return 2; },
                               [](const UniformBox2D&) { return 2; }},
                    d);
}

double log_pdf(const Density& d, std::span<const double> x) {
  if (static_cast<int>(x.size()) != dimension(d)) throw ShapeError("density: wrong point dimension");
  return std::visit(
      Overloaded{[&](const Density1D& g) { return g.log_pdf(x[0]); },
                 [&](const StudentT2D& t) { return t.marginal(0).log_pdf(x[0]) + t.marginal(1).log_pdf(x[1]); },
                 [&](const UniformBox2D& b) {
                   require_finite(x[0], "log_pdf");
                   require_finite(x[1], "log_pdf");
                   const bool inside = x[0] >= b.lo[0] && x[0] <= b.hi[0] && x[1] >= b.lo[1] && x[1] <= b.hi[1];
                   return inside ? -std::log(b.area()) : -std::numeric_limits<double>::infinity();
                 }},
      d);
}

double pdf(const Density& d, std::span<const double> x) {
  if (const auto* b = std::get_if<UniformBox2D>(&d)) {
    if (x.size() != 2) throw ShapeError("density: wrong point dimension");
    const double lp = log_pdf(d, x);
    return std::isinf(lp) ? 0.0 : 1.0 / b->area();
  }
  return std::exp(log_pdf(d, x));
}

void sample_into(const Density& d, Rng& rng, std::span<double> out) {
  if (static_cast<int>(out.size()) != dimension(d)) throw ShapeError("sample_into: wrong output size");
  std::visit(Overloaded{[&](const Density1D& g) { out[0] = g.sample(rng); },
                        [&](const StudentT2D& t) {
                          out[0] = t.mu[0] + t.scale[0] * rng.student_t(t.nu);
                          out[1] = t.mu[1] + t.scale[1] * rng.student_t(t.nu);
                        },
                        [&](const UniformBox2D& b) {
                          out[0] = rng.uniform(b.lo[0], b.hi[0]);
                          out[1] = rng.uniform(b.lo[1], b.hi[1]);
                        }},
             d);
}

Eigen::MatrixXd sample(const Density& d, int n, Rng& rng) {
  if (n < 1) throw ConfigError("sample: n must be >= 1");
  const int dim = dimension(d);
  Eigen::MatrixXd out(dim, n);
  for (int i = 0; i < n; ++i) sample_into(d, rng, std::span<double>(out.col(i).data(), dim));
  return out;
}

nlohmann::json density_to_json(const Density& d) {
  return std::visit(Overloaded{[](const Density1D& g) { return g.to_json(); },
                               [](const StudentT2D& t) {
                                 return nlohmann::json{{"kind", "student_t_2d"},
                                                       {"mu", t.mu},
                                                       {"scale", t.scale},
                                                       {"nu", t.nu}};
                               },
                               [](const UniformBox2D& b) {
                                 return nlohmann::json{{"kind", "uniform_box_2d"}, {"lo", b.lo}, {"hi", b.hi}};
                               }},
                    d);
}

Density density_from_json(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "student_t_2d") {
    StudentT2D t;
    if (j.contains("mu")) t.mu = j.at("mu").get<std::array<double, 2>>();
    if (j.contains("scale")) t.scale = j.at("scale").get<std::array<double, 2>>();
    t.nu = j.value("nu", 2.0);
    t.validate();
    return t;
  }
  if (kind == "uniform_box_2d") {
    UniformBox2D b;
    if (j.contains("lo")) b.lo = j.at("lo").get<std::array<double, 2>>();
    if (j.contains("hi")) b.hi = j.at("hi").get<std::array<double, 2>>();
    b.validate();
    return b;
  }
  return Density1D::from_json(j);
}

// ---------------------------------------------------------------------------

namespace {

double simpson_step(const std::function<double(double)>& f, double a, double fa, double b, double fb,
                    double m, double fm, double whole, double tol, int depth, bool& failed) {
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  if (depth <= 0) {
    failed = true;
    return left + right + delta / 15.0;
  }
  return simpson_step(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1, failed) +
         simpson_step(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1, failed);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol, int max_depth) {
  if (a == b) return 0.0;
  if (b < a) return -adaptive_simpson(f, b, a, tol, max_depth);
  bool failed = false;
  // Force a few levels of subdivision so a narrow peak is not missed by the
  // first three samples.
  double total = 0.0;
  constexpr int kPieces = 8;
  const double h = (b - a) / kPieces;
  for (int k = 0; k < kPieces; ++k) {
    const double lo = a + k * h, hi = (k + 1 == kPieces) ? b : a + (k + 1) * h;
    const double flo = f(lo), fhi = f(hi), mid = 0.5 * (lo + hi), fmid = f(mid);
    const double piece = (hi - lo) / 6.0 * (flo + 4.0 * fmid + fhi);
    total += simpson_step(f, lo, flo, hi, fhi, mid, fmid, piece, tol / kPieces, max_depth, failed);
  }
  if (failed || !std::isfinite(total)) throw NumericalError("adaptive_simpson: did not converge");
  return total;
}

Equalizer::Equalizer(std::vector<Density1D> base, double gamma) : base_(std::move(base)), gamma_(gamma) {
  if (base_.empty()) throw ConfigError("equalizer: needs at least one coordinate");
  if (!(gamma_ > 0.0) || gamma_ > 1.0) throw ConfigError("equalizer: gamma must lie in (0, 1]");
}

Equalizer Equalizer::for_student_t(const StudentT2D& d, double gamma) {
  d.validate();
  return Equalizer({d.marginal(0), d.marginal(1)}, gamma);
}

double Equalizer::integral(std::size_t axis, double from, double to) const {
  const Density1D& g = base_[axis];
  const double gamma = gamma_;
  auto f = [&](double t) { return std::exp(gamma * g.log_pdf(t)); };
  return adaptive_simpson(f, from, to, 1e-9);
}

Eigen::VectorXd Equalizer::transform(const Eigen::VectorXd& x) const {
  if (static_cast<std::size_t>(x.size()) != base_.size()) throw ShapeError("equalizer: wrong point dimension");
  const double anchor = gamma_ == 1.0 ? 0.5 : 0.0;
  Eigen::VectorXd s(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    require_finite(x[i], "equalizer_transform");
    s[i] = anchor + integral(static_cast<std::size_t>(i), base_[i].median(), x[i]);
  }
  return s;
}

Eigen::VectorXd Equalizer::slope(const Eigen::VectorXd& x) const {
  if (static_cast<std::size_t>(x.size()) != base_.size()) throw ShapeError("equalizer: wrong point dimension");
  Eigen::VectorXd s(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) s[i] = std::exp(gamma_ * base_[i].log_pdf(x[i]));
  return s;
}

double Equalizer::distance(const Eigen::VectorXd& x1, const Eigen::VectorXd& x2) const {
  if (static_cast<std::size_t>(x1.size()) != base_.size() || x2.size() != x1.size())
    throw ShapeError("equalizer: wrong point dimension");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x1.size(); ++i) {
    require_finite(x1[i], "equalized_distance");
    require_finite(x2[i], "equalized_distance");
    const double d = integral(static_cast<std::size_t>(i), x1[i], x2[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

}  // namespace pplab
