#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "check.hpp"
#include "pplab/densities.hpp"
#include "pplab/errors.hpp"

using namespace pplab;
using std::numbers::pi;

namespace {

double median(std::vector<double> v) {
  std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

// Integral over the real line with x = tan(theta), midpoint rule in theta.
double integrate_line(const std::function<double(double)>& f, int n = 20000) {
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double th = -pi / 2 + (i + 0.5) * pi / n;
    const double c = std::cos(th);
    s += f(std::tan(th)) / (c * c);
  }
  return s * pi / n;
}

}  // namespace

TEST_CASE("rng streams are reproducible") {
  Rng a(123), b(123), c(124);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const double x = a.normal();
    CHECK(x == b.normal());
    differs = differs || x != c.normal();
  }
  CHECK(differs);
  Rng u(5);
  for (int i = 0; i < 1000; ++i) {
    const double v = u.uniform();
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("pdf examples") {
  const Density1D t = Density1D::student_t(2.0, 0.0, 1.0);
  CHECK(t.pdf(0.0) == doctest::Approx(1.0 / (2.0 * std::sqrt(2.0))).epsilon(1e-14));
  const Density st = StudentT2D{};
  const double origin[2] = {0.0, 0.0};
  CHECK(pdf(st, origin) == doctest::Approx(1.25).epsilon(1e-14));
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const double x[2] = {rng.normal(0, 3), rng.normal(0, 3)};
    const double mx[2] = {-x[0], -x[1]};
    CHECK(pdf(st, x) == pdf(st, mx));
    CHECK(log_pdf(st, x) == doctest::Approx(std::log(pdf(st, x))).epsilon(1e-13));
  }
  const double bad[2] = {NAN, 0.0};
  CHECK_THROWS_AS(pdf(st, bad), InputError);
  CHECK_THROWS_AS(t.pdf(INFINITY), InputError);
  const double three[3] = {0, 0, 0};
  CHECK_THROWS_AS(pdf(st, std::span<const double>(three, 3)), ShapeError);

  const Density box = UniformBox2D{{0.0, 0.0}, {2.0, 4.0}};
  const double in[2] = {1.0, 1.0}, out[2] = {3.0, 1.0};
  CHECK(pdf(box, in) == 0.125);
  CHECK(pdf(box, out) == 0.0);
}

TEST_CASE("1D densities integrate to one") {
  for (const auto& d : {Density1D::gaussian(0.3, 0.7), Density1D::student_t(2.0, -1.0, 0.5),
                        Density1D::student_t(5.0, 0.0, 2.0)})
    CHECK(std::abs(integrate_line([&](double x) { return d.pdf(x); }) - 1.0) <= 1e-6);
  const Density1D u = Density1D::uniform(-1.0, 3.0);
  CHECK(u.pdf(0.0) == 0.25);
  CHECK(u.pdf(3.5) == 0.0);
}

TEST_CASE("2D Student-t integrates to one on a wide grid") {
  const Density st = StudentT2D{};
  const int n = 600;
  double s = 0.0;
  for (int i = 0; i < n; ++i) {
    const double a = -pi / 2 + (i + 0.5) * pi / n;
    for (int j = 0; j < n; ++j) {
      const double b = -pi / 2 + (j + 0.5) * pi / n;
      const double x[2] = {std::tan(a), std::tan(b)};
      s += pdf(st, x) / (std::cos(a) * std::cos(a) * std::cos(b) * std::cos(b));
    }
  }
  CHECK(std::abs(s * (pi / n) * (pi / n) - 1.0) <= 1e-2);
}

TEST_CASE("sampling") {
  Rng rng(2025);
  const Eigen::MatrixXd s = sample(StudentT2D{}, 100000, rng);
  for (int d = 0; d < 2; ++d) {
    std::vector<double> v(static_cast<std::size_t>(s.cols()));
    for (Eigen::Index i = 0; i < s.cols(); ++i) v[static_cast<std::size_t>(i)] = s(d, i);
    CHECK(std::abs(median(v)) <= 0.02);
  }
  const Eigen::MatrixXd b = sample(UniformBox2D{{0.0, 0.0}, {1.0, 1.0}}, 100000, rng);
  CHECK(std::abs(b.row(0).mean() - 0.5) <= 0.01);
  CHECK(std::abs(b.row(1).mean() - 0.5) <= 0.01);
  Rng r1(8), r2(8);
  CHECK(sample(StudentT2D{}, 50, r1) == sample(StudentT2D{}, 50, r2));
  CHECK_THROWS_AS(sample(StudentT2D{}, 0, r1), ConfigError);
}

TEST_CASE("score") {
  const Density1D g = Density1D::gaussian(0.0, 1.0);
  CHECK(g.score(0.0) == 0.0);
  CHECK(g.score(2.0) == -2.0);
  Rng rng(1);
  for (const auto& d : {Density1D::gaussian(0.5, 1.3), Density1D::student_t(2.0, 0.0, 0.5),
                        Density1D::student_t(7.0, 1.0, 2.0)}) {
    for (int i = 0; i < 30; ++i) {
      double x = rng.normal(0.0, 3.0);
      const double fd = pplab::test::central_diff(&x, 1e-5, [&] { return d.log_pdf(x); });
      CHECK(std::abs(d.score(x) - fd) <= 1e-6);
    }
  }
  const Density1D u = Density1D::uniform(0.0, 1.0);
  CHECK(u.score(0.5) == 0.0);
  CHECK_THROWS_AS(u.score(1.5), DomainError);
}

TEST_CASE("Gaussian |score| and 1/pdf rank identically around the mode") {
  const Density1D g = Density1D::gaussian(0.0, 1.0);
  std::vector<double> a, b;
  for (int i = 0; i < 201; ++i) {
    const double x = 3.0 * (2 * i - 200) / 200.0;
    a.push_back(std::abs(g.score(x)));
    b.push_back(1.0 / g.pdf(x));
  }
  // the orders agree exactly, ties included
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a.size(); ++j) CHECK((a[i] < a[j]) == (b[i] < b[j]));
}

TEST_CASE("equalizer") {
  const StudentT2D st;
  const Equalizer eq1 = Equalizer::for_student_t(st, 1.0);
  const Eigen::VectorXd mid = eq1.transform(Eigen::Vector2d(0.0, 0.0));
  CHECK(mid[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(mid[1] == doctest::Approx(0.5).epsilon(1e-9));
  // CDF of the standard t with nu = 2 is 1/2 + t / (2 sqrt(2 + t^2))
  const double t = 1.3 / 0.5;
  CHECK(eq1.transform(Eigen::Vector2d(1.3, 0.0))[0] == doctest::Approx(0.5 + t / (2 * std::sqrt(2 + t * t))).epsilon(1e-8));

  for (double gamma : {1.0, 1.0 / 3.0}) {
    const Equalizer eq = Equalizer::for_student_t(st, gamma);
    double prev = -INFINITY;
    for (double x = -20.0; x <= 20.0; x += 0.37) {
      const double s = eq.transform(Eigen::Vector2d(x, 0.0))[0];
      CHECK(s > prev);
      prev = s;
    }
    Rng rng(17);
    for (int i = 0; i < 25; ++i) {
      const Eigen::Vector2d x(rng.normal(0, 1.0), rng.normal(0, 0.4));
      for (int axis = 0; axis < 2; ++axis) {
        Eigen::Vector2d x2 = x;
        x2[axis] += 1e-4;
        const double ratio = (eq.transform(x2) - eq.transform(x)).norm() / 1e-4;
        const double predicted = std::pow(st.marginal(axis).pdf(x[axis]), gamma);
        CHECK(std::abs(ratio / predicted - 1.0) <= 1e-2);
        CHECK(eq.slope(x)[axis] == doctest::Approx(predicted).epsilon(1e-12));
      }
      const Eigen::Vector2d y(rng.normal(), rng.normal());
      CHECK(eq.distance(x, x) == 0.0);
      CHECK(eq.distance(x, y) == doctest::Approx(eq.distance(y, x)).epsilon(1e-12));
      CHECK(eq.distance(x, y) == doctest::Approx((eq.transform(x) - eq.transform(y)).norm()).epsilon(1e-6));
    }
  }
  CHECK_THROWS_AS(Equalizer({}, 1.0), ConfigError);
  CHECK_THROWS_AS(Equalizer::for_student_t(st, 1.5), ConfigError);
  CHECK_THROWS_AS(eq1.transform(Eigen::Vector3d::Zero()), ShapeError);
}

TEST_CASE("adaptive simpson") {
  CHECK(adaptive_simpson([](double x) { return std::sin(x); }, 0.0, pi) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK_THROWS_AS(adaptive_simpson([](double x) { return 1.0 / x; }, -1.0, 1.0, 1e-12, 8), NumericalError);
}

TEST_CASE("density json round trip") {
  const Density st = StudentT2D{{0.1, -0.2}, {0.5, 0.3}, 3.0};
  const Density back = density_from_json(density_to_json(st));
  const double x[2] = {0.7, -1.1};
  CHECK(pdf(back, x) == pdf(st, x));
  CHECK(density_to_json(st)["kind"] == "student_t_2d");
  const Density1D g = Density1D::from_json(Density1D::student_t(4.0, 1.0, 2.0).to_json());
  CHECK(g.pdf(0.3) == Density1D::student_t(4.0, 1.0, 2.0).pdf(0.3));
  CHECK_THROWS_AS(density_from_json({{"kind", "laplace"}}), ConfigError);
}
