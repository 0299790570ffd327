#include <doctest.h>

#include <cmath>
#include <vector>

#include "check.hpp"
#include "pplab/mlp.hpp"

using namespace pplab;
using pplab::test::central_diff;
using pplab::test::rel_err;

TEST_CASE("mlp_forward examples") {
  const Eigen::Vector2d x(1.5, -0.3);
  const MlpParams zero = MlpParams::zeros({2, 5, 3});
  CHECK(mlp_forward(zero, x).isZero(0.0));

  MlpParams id = MlpParams::zeros({2, 2});
  id.weights[0].setIdentity();
  CHECK(mlp_forward(id, x) == x);

  MlpParams chain = MlpParams::zeros({1, 1, 1});
  chain.weights[0](0, 0) = 1.0;
  chain.weights[1](0, 0) = 1.0;
  CHECK(mlp_forward(chain, Eigen::VectorXd::Zero(1))[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  CHECK_THROWS_AS(mlp_forward(zero, Eigen::VectorXd::Zero(3)), ShapeError);
}

TEST_CASE("softplus is stable and hidden activations positive") {
  MlpParams p = MlpParams::zeros({1, 1, 1});
  p.weights[0](0, 0) = 1.0;
  p.weights[1](0, 0) = 1.0;
  CHECK(mlp_forward(p, Eigen::VectorXd::Constant(1, 800.0))[0] == doctest::Approx(800.0));
  const double tiny = mlp_forward(p, Eigen::VectorXd::Constant(1, -700.0))[0];
  CHECK(tiny > 0.0);
  CHECK(std::isfinite(tiny));
}

TEST_CASE("mlp_backward examples") {
  Rng rng(3);
  const MlpParams p = init_mlp({2, 3, 2}, rng);
  const auto g = mlp_backward(p, Eigen::Vector2d(0.2, -1.0), Eigen::Vector2d::Zero());
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    CHECK(g.params.weights[l].isZero(0.0));
    CHECK(g.params.biases[l].isZero(0.0));
  }
  CHECK(g.input.isZero(0.0));

  MlpParams lin = MlpParams::zeros({1, 1});
  lin.weights[0](0, 0) = 0.7;
  lin.biases[0](0) = -0.2;
  const auto gl = mlp_backward(lin, Eigen::VectorXd::Constant(1, 1.9), Eigen::VectorXd::Ones(1));
  CHECK(gl.params.weights[0](0, 0) == 1.9);
  CHECK(gl.params.biases[0](0) == 1.0);
  CHECK(gl.input[0] == 0.7);

  CHECK_THROWS_AS(mlp_backward(p, Eigen::Vector2d::Zero(), Eigen::VectorXd::Zero(3)), ShapeError);
}

TEST_CASE("mlp_backward matches central differences on 25 random networks") {
  Rng rng(11);
  double worst = 0.0;
  for (int t = 0; t < 25; ++t) {
    std::vector<int> dims{1 + static_cast<int>(rng.uniform() * 4)};
    const int depth = 1 + static_cast<int>(rng.uniform() * 3);
    for (int l = 0; l < depth; ++l) dims.push_back(1 + static_cast<int>(rng.uniform() * 6));
    MlpParams p = init_mlp(dims, rng);
    for (auto& b : p.biases)
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = rng.normal(0.0, 0.5);
    Eigen::VectorXd x(dims.front()), up(dims.back());
    for (auto& v : x) v = rng.normal();
    for (auto& v : up) v = rng.normal();
    const auto g = mlp_backward(p, x, up);
    auto objective = [&] { return up.dot(mlp_forward(p, x)); };
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
      for (Eigen::Index i = 0; i < p.weights[l].size(); ++i)
        worst = std::max(worst, rel_err(g.params.weights[l].data()[i],
                                        central_diff(p.weights[l].data() + i, 1e-5, objective), 1e-4));
      for (Eigen::Index i = 0; i < p.biases[l].size(); ++i)
        worst = std::max(worst, rel_err(g.params.biases[l][i], central_diff(p.biases[l].data() + i, 1e-5, objective), 1e-4));
    }
    for (Eigen::Index i = 0; i < x.size(); ++i)
      worst = std::max(worst, rel_err(g.input[i], central_diff(x.data() + i, 1e-5, objective), 1e-4));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("batched forward and backward agree with the per-sample routines") {
  Rng rng(8);
  const MlpParams p = init_mlp({3, 7, 4, 2}, rng);
  Eigen::MatrixXd x(3, 5), up(2, 5);
  for (auto& v : x.reshaped()) v = rng.normal();
  for (auto& v : up.reshaped()) v = rng.normal();
  MlpTape<double> tape;
  const Eigen::MatrixXd y = forward_batch<double>(p, x, &tape);
  MlpParams gsum = p.zeros_like();
  const Eigen::MatrixXd gin = backward_batch<double>(p, tape, up, gsum);
  MlpParams acc = p.zeros_like();
  for (int b = 0; b < 5; ++b) {
    CHECK((y.col(b) - mlp_forward(p, x.col(b))).norm() <= 1e-12);
    const auto g = mlp_backward(p, x.col(b), up.col(b));
    CHECK((gin.col(b) - g.input).norm() <= 1e-12);
    acc.add_scaled(g.params, 1.0);
  }
  for (std::size_t l = 0; l < p.num_layers(); ++l) CHECK((acc.weights[l] - gsum.weights[l]).norm() <= 1e-12);
}

TEST_CASE("init_mlp") {
  Rng a(42), b(42);
  const MlpParams pa = init_mlp({2, 100, 100, 2}, a);
  const MlpParams pb = init_mlp({2, 100, 100, 2}, b);
  CHECK(pa.parameter_count() == 10602);
  for (std::size_t l = 0; l < pa.num_layers(); ++l) {
    CHECK(pa.weights[l] == pb.weights[l]);
    CHECK(pa.biases[l].isZero(0.0));
    CHECK(pa.weights[l].cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(static_cast<double>(pa.dims[l])));
  }
  CHECK_NOTHROW(pa.validate());
  Rng r(0);
  CHECK_THROWS_AS(init_mlp({}, r), ConfigError);
  CHECK_THROWS_AS(init_mlp({2, 0, 1}, r), ConfigError);
}

TEST_CASE("validate rejects broken parameters") {
  MlpParams p = MlpParams::zeros({2, 3});
  p.weights[0](1, 1) = NAN;
  CHECK_THROWS_AS(p.validate(), InputError);
  MlpParams q = MlpParams::zeros({2, 3});
  q.biases[0].resize(4);
  CHECK_THROWS_AS(q.validate(), ShapeError);
}

TEST_CASE("adam_step") {
  Rng rng(1);
  MlpParams p = init_mlp({2, 3, 1}, rng);
  const MlpParams zero = p.zeros_like();

  SUBCASE("zero gradients leave parameters unchanged") {
    AdamState<double> st;
    auto [q, st1] = adam_step(p, zero, st);
    for (std::size_t l = 0; l < p.num_layers(); ++l) CHECK(q.weights[l] == p.weights[l]);
    CHECK(st1.step_count == 1);
    MlpParams g = zero;
    g.weights[0].setConstant(0.5);
    auto [q2, st2] = adam_step(p, g, AdamState<double>{});
    auto [q3, st3] = adam_step(q2, zero, st2);
    CHECK(st3.step_count == 2);
    CHECK(st3.first_moment[0][0] == doctest::Approx(0.9 * st2.first_moment[0][0]));
    CHECK(st3.second_moment[0][0] == doctest::Approx(0.999 * st2.second_moment[0][0]));
  }

  SUBCASE("first step moves each parameter by about lr against the gradient sign") {
    MlpParams g = zero;
    g.weights[0](0, 0) = 0.37;
    g.weights[0](1, 0) = -2.0;
    auto [q, st] = adam_step(p, g, AdamState<double>{});
    // t = 1: m = 0.1 g, v = 0.001 g^2, lr_t = lr sqrt(0.001) / 0.1
    const double expect = 1e-3 * 0.37 / (0.37 + 1e-8 / std::sqrt(0.001));
    CHECK(p.weights[0](0, 0) - q.weights[0](0, 0) == doctest::Approx(expect).epsilon(1e-9));
    CHECK(q.weights[0](1, 0) - p.weights[0](1, 0) == doctest::Approx(1e-3).epsilon(1e-6));
  }

  SUBCASE("non-finite gradient") {
    MlpParams g = zero;
    g.biases[0][1] = INFINITY;
    CHECK_THROWS_AS(adam_step(p, g, AdamState<double>{}), TrainingDiverged);
  }

  SUBCASE("determinism") {
    auto run = [&] {
      MlpParams q = p;
      AdamState<double> st;
      Rng r(9);
      for (int i = 0; i < 50; ++i) {
        MlpParams g = q.zeros_like();
        for (auto& w : g.weights)
          for (auto& v : w.reshaped()) v = r.normal();
        std::tie(q, st) = adam_step(q, g, st);
      }
      return q;
    };
    const MlpParams a = run(), b = run();
    for (std::size_t l = 0; l < a.num_layers(); ++l) CHECK(a.weights[l] == b.weights[l]);
  }
}
