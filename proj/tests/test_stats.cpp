#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "pplab/errors.hpp"
#include "pplab/rng.hpp"
#include "pplab/stats.hpp"

using namespace pplab;

namespace {

// Rank oracle: 1 + #smaller + (#equal - 1) / 2, computed pairwise.
std::vector<long double> naive_ranks(const std::vector<double>& v) {
  std::vector<long double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    long smaller = 0, equal = 0;
    for (double w : v) {
      smaller += w < v[i];
      equal += w == v[i];
    }
    r[i] = 1.0L + smaller + (equal - 1) / 2.0L;
  }
  return r;
}

double pearson_oracle(const std::vector<long double>& a, const std::vector<long double>& b) {
  const long double n = static_cast<long double>(a.size());
  long double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  long double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return static_cast<double>(sab / std::sqrt(saa * sbb));
}

// Tie-free closed form 1 - 6 sum d^2 / (n (n^2 - 1)) in exact integer arithmetic.
double rank_formula_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = naive_ranks(x), ry = naive_ranks(y);
  long long d2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const long long d = static_cast<long long>(rx[i]) - static_cast<long long>(ry[i]);
    d2 += d * d;
  }
  const long long n = static_cast<long long>(x.size());
  return 1.0 - static_cast<double>(6 * d2) / static_cast<double>(n * (n * n - 1));
}

}  // namespace

TEST_CASE("spearman examples") {
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{10, 20, 30}).rho == 1.0);
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}).rho == -1.0);
  const auto r = spearman(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 3, 2, 4});
  CHECK(r.rho == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(r.n == 4);
  CHECK(r.tie_count == 0);
}

TEST_CASE("spearman with ties matches frozen reference values") {
  // reference values from scipy.stats.spearmanr
  const auto a = spearman(std::vector<double>{1, 2, 2, 3, 5, 5, 5, 8}, std::vector<double>{2, 1, 4, 4, 3, 9, 9, 0});
  CHECK(a.rho == doctest::Approx(0.09318388040070494).epsilon(1e-13));
  CHECK(a.tie_count == 1 + 2 + 1 + 1);
  const auto b = spearman(std::vector<double>{0.5, 0.5, 1, 2, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(b.rho == doctest::Approx(0.9710083124552246).epsilon(1e-13));
}

TEST_CASE("spearman errors") {
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2}), ShapeError);
  CHECK_THROWS_AS(spearman(std::vector<double>{1, 2}, std::vector<double>{1, 2}), InputError);
  CHECK_THROWS_AS(spearman(std::vector<double>{1, NAN, 3}, std::vector<double>{1, 2, 3}), InputError);
  CHECK_THROWS_AS(spearman(std::vector<double>{2, 2, 2}, std::vector<double>{1, 2, 3}), UndefinedCorrelation);
}

TEST_CASE("spearman equals the rank-formula oracle on 1000 tie-free instances") {
  Rng rng(2024);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 3 + static_cast<int>(rng.uniform() * 60);
    std::vector<double> x(n), y(n);
    for (int i = 0; i < n; ++i) {
      x[i] = rng.normal();
      y[i] = 0.3 * x[i] + rng.normal();
    }
    const auto r = spearman(x, y);
    REQUIRE(r.tie_count == 0);
    mismatches += r.rho != rank_formula_oracle(x, y);
  }
  CHECK(mismatches == 0);
}

TEST_CASE("spearman matches the average-rank oracle on 1000 tied instances") {
  Rng rng(77);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 3 + static_cast<int>(rng.uniform() * 60);
    std::vector<double> x(n), y(n);
    for (int i = 0; i < n; ++i) {
      x[i] = std::floor(rng.uniform() * 5);
      y[i] = std::floor(x[i] + rng.uniform() * 4);
    }
    x[0] = 0.0;
    x[1] = 4.0;
    y[0] = 0.0;
    y[1] = 7.0;
    x[2] = x[0];  // at least one tie
    const double oracle = pearson_oracle(naive_ranks(x), naive_ranks(y));
    worst = std::max(worst, std::abs(spearman(x, y).rho - oracle));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("spearman properties") {
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> x(40), y(40), ex(40), cy(40);
    for (int i = 0; i < 40; ++i) {
      x[i] = rng.normal();
      y[i] = x[i] + rng.normal();
      ex[i] = std::exp(x[i]);
      cy[i] = y[i] * y[i] * y[i];
    }
    CHECK(spearman(ex, cy).rho == spearman(x, y).rho);
    CHECK(spearman(x, x).rho == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(std::abs(spearman(x, y).rho) <= 1.0);
  }
}

TEST_CASE("average ranks share tied positions") {
  const auto r = average_ranks(std::vector<double>{3.0, 1.0, 3.0, 2.0});
  CHECK(r[0] == 3.5);
  CHECK(r[1] == 1.0);
  CHECK(r[2] == 3.5);
  CHECK(r[3] == 2.0);
}

TEST_CASE("polyfit reproduces low-degree polynomials") {
  std::vector<double> xs(60), ys(60), cs(60, 2.5);
  for (int i = 0; i < 60; ++i) {
    xs[i] = -1.0 + 4.0 * i / 59.0;
    ys[i] = 1.0 - 2.0 * xs[i] + 0.5 * xs[i] * xs[i];
  }
  const PolyFit fit(xs, ys, 20);
  CHECK(fit.degree() == 20);
  for (int i = 0; i < 60; ++i) CHECK(std::abs(fit(xs[i]) - ys[i]) <= 1e-8);
  const PolyFit flat(xs, cs, 20);
  for (double x : {-1.0, 0.3, 2.9}) CHECK(flat(x) == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("polyfit of sin on [0, pi] with degree 20") {
  std::vector<double> xs(200), ys(200);
  for (int i = 0; i < 200; ++i) {
    xs[i] = std::numbers::pi * i / 199.0;
    ys[i] = std::sin(xs[i]);
  }
  const auto fit = polyfit_smooth(xs, ys);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) worst = std::max(worst, std::abs(fit(xs[i]) - ys[i]));
  CHECK(worst <= 1e-6);
  CHECK_THROWS_AS(fit(4.0), DomainError);
}

TEST_CASE("polyfit rejects underdetermined fits") {
  std::vector<double> xs{0, 1, 2, 3}, ys{1, 2, 3, 4};
  CHECK_THROWS(PolyFit(xs, ys, 20));
  std::vector<double> same(30, 1.0), vals(30, 0.0);
  CHECK_THROWS_AS(PolyFit(same, vals, 3), NumericalError);
}

TEST_CASE("relative performance") {
  CHECK(relative_performance({1.0, 2.0}, {1.0, 2.0}) == 1.0);
  CHECK(relative_performance({1.0, 2.0}, {2.0, 2.0}) == 0.5);
  const Performance a{0.3, 1.7}, b{0.9, 2.2};
  CHECK(relative_performance(a, b) * relative_performance(b, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(relative_performance({1.0, 0.0}, {1.0, 1.0}), DomainError);
  CHECK_THROWS_AS(relative_performance({1.0, 1.0}, {0.0, 1.0}), DomainError);
}

TEST_CASE("standard error of the mean") {
  CHECK(std_error_mean(0.0, 10) == 0.0);
  CHECK(std_error_mean(4.0, 4) == 1.0);
  CHECK(std_error_mean(3.0, 64) == doctest::Approx(std_error_mean(3.0, 16) / 2).epsilon(1e-15));
  CHECK_THROWS_AS(std_error_mean(1.0, 0), ConfigError);
}
