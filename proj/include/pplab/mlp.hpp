#pragma once

// Dense feed-forward networks with softplus hidden layers and a linear output
// layer. Batched routines work column-wise: a batch is a (features x samples)
// matrix. Everything is templated on the scalar so training can run in single
// precision while checks and evaluation stay in double.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "pplab/errors.hpp"
#include "pplab/rng.hpp"

namespace pplab {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
struct BasicMlp {
  std::vector<int> dims;
  std::vector<Mat<T>> weights;  // weights[l] is dims[l+1] x dims[l]
  std::vector<Vec<T>> biases;

  std::size_t num_layers() const { return weights.size(); }
  int input_dim() const { return dims.front(); }
  int output_dim() const { return dims.back(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
    return n;
  }

  static BasicMlp zeros(const std::vector<int>& dims) {
    if (dims.size() < 2) throw ConfigError("mlp needs at least an input and an output dimension");
    BasicMlp p;
    p.dims = dims;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      if (dims[l] < 1 || dims[l + 1] < 1) throw ConfigError("mlp dimensions must be >= 1");
      p.weights.push_back(Mat<T>::Zero(dims[l + 1], dims[l]));
      p.biases.push_back(Vec<T>::Zero(dims[l + 1]));
    }
    return p;
  }

  BasicMlp zeros_like() const { return zeros(dims); }

  template <class U>
  BasicMlp<U> cast() const {
    BasicMlp<U> out;
    out.dims = dims;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      out.weights.push_back(weights[l].template cast<U>());
      out.biases.push_back(biases[l].template cast<U>());
    }
    return out;
  }

  /// Throws ShapeError when the matrices do not chain with `dims`, InputError
  /// when a parameter is not finite.
  void validate() const {
    if (dims.size() < 2 || weights.size() + 1 != dims.size() || biases.size() != weights.size())
      throw ShapeError("mlp layer count does not match dims");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != dims[l + 1] || weights[l].cols() != dims[l] ||
          biases[l].size() != dims[l + 1])
        throw ShapeError("mlp layer " + std::to_string(l) + " has inconsistent shape");
      if (!weights[l].allFinite() || !biases[l].allFinite())
        throw InputError("mlp layer " + std::to_string(l) + " has non-finite parameters");
    }
  }

  /// In-place axpy over every parameter: this += alpha * other.
  void add_scaled(const BasicMlp& other, T alpha) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] += alpha * other.weights[l];
      biases[l] += alpha * other.biases[l];
    }
  }

  void set_zero() {
    for (auto& w : weights) w.setZero();
    for (auto& b : biases) b.setZero();
  }
};

using MlpParams = BasicMlp<double>;

/// Values cached by the batched forward pass for the backward pass.
template <class T>
struct MlpTape {
  std::vector<Mat<T>> inputs;  // inputs[l] feeds layer l; inputs[0] is the batch
  std::vector<Mat<T>> slopes;  // softplus derivative per hidden layer
};

namespace detail {

/// Stable softplus of z into `act`; `e` is scratch that ends up holding
/// sigmoid(z) when `want_slope` is set.
template <class T>
void softplus_with_slope(const Mat<T>& z, Mat<T>& act, Mat<T>& e, bool want_slope) {
  // softplus(z) = max(z, 0) + log1p(exp(-|z|)); exp(-|z|) is shared with the slope.
  e.resize(z.rows(), z.cols());
  act.resize(z.rows(), z.cols());
  e.array() = (-z.array().abs()).exp();
  act.array() = z.array().max(T(0)) + e.array().log1p();
  if (want_slope) e.array() = (z.array() >= T(0)).select(T(1), e.array()) / (T(1) + e.array());
}

}  // namespace detail

/// Forward pass for a batch (one sample per column). With a tape, the layer
/// inputs and activation slopes are kept for backward_batch; reusing a tape
/// across calls reuses its buffers.
template <class T>
Mat<T> forward_batch(const BasicMlp<T>& p, const Mat<T>& x, MlpTape<T>* tape = nullptr) {
  if (x.rows() != p.input_dim())
    throw ShapeError("mlp input has " + std::to_string(x.rows()) + " rows, expected " +
                     std::to_string(p.input_dim()));
  const std::size_t n_layers = p.num_layers();
  if (tape) {
    tape->inputs.resize(n_layers);
    tape->slopes.resize(n_layers - 1);
    tape->inputs[0] = x;
  }
  Mat<T> z, scratch, ping[2];
  const Mat<T>* cur = &x;
  for (std::size_t l = 0; l < n_layers; ++l) {
    z.resize(p.weights[l].rows(), cur->cols());
    z.noalias() = p.weights[l] * *cur;
    z.colwise() += p.biases[l];
    if (l + 1 == n_layers) break;
    Mat<T>& act = tape ? tape->inputs[l + 1] : ping[l % 2];
    detail::softplus_with_slope(z, act, tape ? tape->slopes[l] : scratch, tape != nullptr);
    cur = &act;
  }
  return z;
}

/// Reverse pass for a batch. `upstream` is dLoss/dOutput (out_dim x batch).
/// Parameter gradients are written into `grads` (overwritten, summed over the
/// batch); returns dLoss/dInput.
template <class T>
Mat<T> backward_batch(const BasicMlp<T>& p, const MlpTape<T>& tape, const Mat<T>& upstream,
                      BasicMlp<T>& grads) {
  const std::size_t n_layers = p.num_layers();
  if (tape.inputs.size() != n_layers) throw ShapeError("mlp tape does not match network");
  if (upstream.rows() != p.output_dim() || upstream.cols() != tape.inputs[0].cols())
    throw ShapeError("mlp upstream gradient has wrong shape");
  if (grads.dims != p.dims) grads = p.zeros_like();
  Mat<T> g = upstream;
  for (std::size_t l = n_layers; l-- > 0;) {
    grads.weights[l].noalias() = g * tape.inputs[l].transpose();
    grads.biases[l] = g.rowwise().sum();
    Mat<T> gin(p.weights[l].cols(), g.cols());
    gin.noalias() = p.weights[l].transpose() * g;
    if (l > 0) gin.array() *= tape.slopes[l - 1].array();
    g = std::move(gin);
  }
  return g;
}

inline Eigen::VectorXd mlp_forward(const MlpParams& p, const Eigen::VectorXd& x) {
  return forward_batch<double>(p, x);
}

struct MlpGradients {
  MlpParams params;
  Eigen::VectorXd input;
};

inline MlpGradients mlp_backward(const MlpParams& p, const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& upstream) {
  if (upstream.size() != p.output_dim()) throw ShapeError("upstream gradient has wrong length");
  MlpTape<double> tape;
  forward_batch<double>(p, x, &tape);
  MlpGradients out{p.zeros_like(), {}};
  out.input = backward_batch<double>(p, tape, upstream, out.params);
  return out;
}

/// Weights uniform in +-1/sqrt(fan_in), biases zero.
inline MlpParams init_mlp(const std::vector<int>& dims, Rng& rng) {
  if (dims.empty()) throw ConfigError("init_mlp: empty dims");
  MlpParams p = MlpParams::zeros(dims);
  for (auto& w : p.weights) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = rng.uniform(-bound, bound);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// A contiguous trainable tensor and its gradient.
template <class T>
struct ParamBlock {
  T* value;
  const T* grad;
  std::size_t size;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::int64_t step_count = 0;
};

/// One Adam update with bias correction folded into the step size:
/// lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t), theta -= lr_t * m / (sqrt(v) + eps).
/// All gradients are checked before anything is modified.
template <class T>
void adam_update(std::span<const ParamBlock<T>> blocks, AdamState<T>& st) {
  for (const auto& b : blocks)
    for (std::size_t i = 0; i < b.size; ++i)
      if (!std::isfinite(static_cast<double>(b.grad[i])))
        throw TrainingDiverged("non-finite gradient", st.step_count + 1);
  if (st.first_moment.empty()) {
    for (const auto& b : blocks) {
      st.first_moment.emplace_back(b.size, T(0));
      st.second_moment.emplace_back(b.size, T(0));
    }
  }
  if (st.first_moment.size() != blocks.size()) throw ShapeError("adam state does not match parameters");
  const auto& c = st.config;
  st.step_count += 1;
  const double t = static_cast<double>(st.step_count);
  const T lr_t = static_cast<T>(c.lr * std::sqrt(1.0 - std::pow(c.beta2, t)) / (1.0 - std::pow(c.beta1, t)));
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2), eps = static_cast<T>(c.eps);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    const auto& b = blocks[k];
    auto& m = st.first_moment[k];
    auto& v = st.second_moment[k];
    if (m.size() != b.size) throw ShapeError("adam moment shape mismatch");
    for (std::size_t i = 0; i < b.size; ++i) {
      const T g = b.grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      b.value[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps);
    }
  }
}

template <class T>
void append_blocks(BasicMlp<T>& params, const BasicMlp<T>& grads, std::vector<ParamBlock<T>>& out) {
  if (grads.dims != params.dims) throw ShapeError("gradient shape does not match parameters");
  for (std::size_t l = 0; l < params.num_layers(); ++l) {
    out.push_back({params.weights[l].data(), grads.weights[l].data(),
                   static_cast<std::size_t>(params.weights[l].size())});
    out.push_back({params.biases[l].data(), grads.biases[l].data(),
                   static_cast<std::size_t>(params.biases[l].size())});
  }
}

/// Functional form: returns the updated parameters and optimizer state.
template <class T>
std::pair<BasicMlp<T>, AdamState<T>> adam_step(BasicMlp<T> params, const BasicMlp<T>& grads,
                                               AdamState<T> state) {
  std::vector<ParamBlock<T>> blocks;
  append_blocks(params, grads, blocks);
  adam_update<T>(blocks, state);
  return {std::move(params), std::move(state)};
}

}  // namespace pplab
