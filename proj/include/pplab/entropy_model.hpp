#pragma once

// Factorized density over the noisy latent. Each latent dimension owns a
// piecewise-linear CDF on a fixed uniform knot grid over [-K, K]; the mass of
// every knot interval is a softmax of free logits, so the CDF is monotone for
// any parameter values. The probability of a unit bin centred on y is
// CDF(y + 1/2) - CDF(y - 1/2).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "pplab/errors.hpp"
#include "pplab/mlp.hpp"

namespace pplab {

inline constexpr double kMassFloor = 1e-9;

template <class T>
struct BasicFactorizedDensity {
  double halfwidth = 30.0;
  int knots = 121;
  Mat<T> logits;  // (knots - 1) x latent dims

  static BasicFactorizedDensity uniform(int dims, double halfwidth = 30.0, int knots = 121) {
    if (dims < 0 || knots < 2 || !(halfwidth > 0.0)) throw ConfigError("factorized density: bad grid");
    BasicFactorizedDensity m;
    m.halfwidth = halfwidth;
    m.knots = knots;
    m.logits = Mat<T>::Zero(knots - 1, dims);
    return m;
  }

  int dims() const { return static_cast<int>(logits.cols()); }
  int intervals() const { return knots - 1; }
  double bin_width() const { return 2.0 * halfwidth / intervals(); }

  template <class U>
  BasicFactorizedDensity<U> cast() const {
    BasicFactorizedDensity<U> out;
    out.halfwidth = halfwidth;
    out.knots = knots;
    out.logits = logits.template cast<U>();
    return out;
  }

  /// Interval masses, one softmax column per latent dimension.
  Mat<T> probabilities() const {
    Mat<T> p(logits.rows(), logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
      const T mx = logits.col(c).maxCoeff();
      p.col(c) = (logits.col(c).array() - mx).exp().matrix();
      p.col(c) /= p.col(c).sum();
    }
    return p;
  }
};

using FactorizedDensity = BasicFactorizedDensity<double>;

/// Batched rate evaluation with optional exact gradients.
template <class T>
class RateEvaluator {
 public:
  explicit RateEvaluator(const BasicFactorizedDensity<T>& m)
      : m_(m), probs_(m.probabilities()), cum_(m.knots, m.dims()), width_(m.bin_width()) {
    for (Eigen::Index c = 0; c < probs_.cols(); ++c) {
      T acc = 0;
      cum_(0, c) = 0;
      for (int j = 0; j < m.intervals(); ++j) {
        acc += probs_(j, c);
        cum_(j + 1, c) = acc;
      }
    }
  }

  const Mat<T>& probabilities() const { return probs_; }

  T cdf(int dim, T v) const {
    const Locate p = locate(v);
    return cum_(p.interval, dim) + probs_(p.interval, dim) * p.frac;
  }

  /// Bits per sample (length B). `grad_y` receives weight_b * d bits_b / d y
  /// and `grad_logits` accumulates sum_b weight_b * d bits_b / d logits. The
  /// number of components clamped into [-K, K] is added to `clamped`.
  Vec<T> bits(const Mat<T>& y, const Vec<T>* weights = nullptr, Mat<T>* grad_y = nullptr,
              Mat<T>* grad_logits = nullptr, long* clamped = nullptr) const {
    if (y.rows() != m_.dims()) throw ShapeError("rate: latent dimension does not match entropy model");
    const bool want_grad = grad_y || grad_logits;
    if (want_grad && (!weights || weights->size() != y.cols()))
      throw ShapeError("rate: gradient weights must have one entry per sample");
    Vec<T> out = Vec<T>::Zero(y.cols());
    if (grad_y) grad_y->setZero(y.rows(), y.cols());
    Mat<T> grad_probs;
    if (grad_logits) grad_probs = Mat<T>::Zero(probs_.rows(), probs_.cols());
    const T k = static_cast<T>(m_.halfwidth);
    const T ln2 = static_cast<T>(std::numbers::ln2);
    for (Eigen::Index b = 0; b < y.cols(); ++b) {
      for (Eigen::Index d = 0; d < y.rows(); ++d) {
        T v = y(d, b);
        bool was_clamped = false;
        if (v < -k || v > k) {
          v = std::clamp(v, -k, k);
          was_clamped = true;
          if (clamped) ++*clamped;
        }
        const Locate hi = locate(v + T(0.5));
        const Locate lo = locate(v - T(0.5));
        const int dd = static_cast<int>(d);
        const T mass = (cum_(hi.interval, dd) + probs_(hi.interval, dd) * hi.frac) -
                       (cum_(lo.interval, dd) + probs_(lo.interval, dd) * lo.frac);
        const bool floored = !(mass > static_cast<T>(kMassFloor));
        const T used = floored ? static_cast<T>(kMassFloor) : mass;
        out[b] += -std::log(used) / ln2;
        if (!want_grad || floored) continue;
        const T dbits_dmass = -(*weights)[b] / (mass * ln2);
        if (grad_y && !was_clamped) {
          const T dmass_dy = (slope(hi, dd) - slope(lo, dd)) / static_cast<T>(width_);
          (*grad_y)(d, b) = dbits_dmass * dmass_dy;
        }
        if (grad_logits) {
          // d cdf(v) / d p_j is 1 below the containing interval, frac inside it.
          for (int j = lo.interval; j <= hi.interval; ++j) {
            const T g_hi = j < hi.interval ? T(1) : hi.frac;
            const T g_lo = j < lo.interval ? T(1) : (j == lo.interval ? lo.frac : T(0));
            grad_probs(j, d) += dbits_dmass * (g_hi - g_lo);
          }
        }
      }
    }
    if (grad_logits) {
      grad_logits->resize(probs_.rows(), probs_.cols());
      for (Eigen::Index c = 0; c < probs_.cols(); ++c) {
        const T dot = probs_.col(c).dot(grad_probs.col(c));
        grad_logits->col(c) = (probs_.col(c).array() * (grad_probs.col(c).array() - dot)).matrix();
      }
    }
    return out;
  }

 private:
  struct Locate {
    int interval;
    T frac;
    bool inside;  // strictly inside [-K, K]: the CDF has a slope there
  };

  // CDF slope (times the interval width); at an interior knot the two
  // one-sided slopes are averaged.
  T slope(const Locate& at, int d) const {
    if (!at.inside) return T(0);
    if (at.frac == T(0) && at.interval > 0) return T(0.5) * (probs_(at.interval, d) + probs_(at.interval - 1, d));
    return probs_(at.interval, d);
  }

  Locate locate(T v) const {
    const T k = static_cast<T>(m_.halfwidth);
    const int n = m_.intervals();
    if (v <= -k) return {0, T(0), false};
    if (v >= k) return {n - 1, T(1), false};
    const T t = (v + k) / static_cast<T>(width_);
    int idx = static_cast<int>(std::floor(t));
    idx = std::clamp(idx, 0, n - 1);
    const T frac = std::clamp(t - static_cast<T>(idx), T(0), T(1));
    return {idx, frac, true};
  }

  const BasicFactorizedDensity<T>& m_;
  Mat<T> probs_;
  Mat<T> cum_;  // knots x dims, cum_(j) = CDF at knot j
  double width_;
};

/// Sum over latent dimensions of -log2 P(bin around y_i).
inline double rate_bits(const FactorizedDensity& m, const Eigen::VectorXd& y) {
  return RateEvaluator<double>(m).bits(y)[0];
}

struct RateGradient {
  Eigen::MatrixXd logits;
  Eigen::VectorXd y;
};

inline RateGradient rate_grad(const FactorizedDensity& m, const Eigen::VectorXd& y) {
  RateEvaluator<double> ev(m);
  Eigen::VectorXd w = Eigen::VectorXd::Ones(1);
  Eigen::MatrixXd gy, gl;
  ev.bits(y, &w, &gy, &gl);
  return {gl, gy.col(0)};
}

/// Total probability of the integer-centred bins inside (-K, K), per dimension.
inline Eigen::VectorXd total_discrete_mass(const FactorizedDensity& m) {
  RateEvaluator<double> ev(m);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(m.dims());
  const int k = static_cast<int>(std::floor(m.halfwidth));
  for (int d = 0; d < m.dims(); ++d)
    for (int c = -k; c <= k; ++c) out[d] += ev.cdf(d, c + 0.5) - ev.cdf(d, c - 0.5);
  return out;
}

}  // namespace pplab
