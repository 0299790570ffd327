#pragma once

// Rate-distortion autoencoders: encoder -> quantizer -> decoder with a
// factorized entropy model supplying the rate. Training replaces rounding by
// additive uniform noise (or by the soft nearest-center assignment for
// fixed-alphabet models) and minimizes  mean_b [ w_r(x_b) R_b + lambda w_d(x_b) D_b ].

#include <Eigen/Dense>
#include "json.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "pplab/densities.hpp"
#include "pplab/entropy_model.hpp"
#include "pplab/image.hpp"
#include "pplab/mlp.hpp"
#include "pplab/rng.hpp"

namespace pplab {

struct QuantizerMode {
  enum class Kind { round, additive_uniform_noise, soft_centers, identity };
  Kind kind = Kind::round;
  std::vector<double> centers;  // soft_centers only, strictly increasing
  double scale = 1.0;           // soft_centers sharpness s

  static QuantizerMode round() { return {}; }
  static QuantizerMode noise() { return {Kind::additive_uniform_noise, {}, 1.0}; }
  static QuantizerMode identity() { return {Kind::identity, {}, 1.0}; }
  static QuantizerMode soft(std::vector<double> centers, double s = 1.0);

  void validate() const;
  nlohmann::json to_json() const;
  static QuantizerMode from_json(const nlohmann::json& j);
};

/// round: nearest integer, halves away from zero. noise: y + U(-1/2, 1/2).
/// soft_centers: softmax(-s (y - c_j)^2)-weighted average of the centers.
Eigen::VectorXd quantize(const QuantizerMode& mode, const Eigen::VectorXd& y, Rng& rng);
/// Nearest center, ties to the lower center.
double nearest_center(const std::vector<double>& centers, double y);
/// Soft assignment and its derivative d y_hat / d y = 2 s Var_w(c).
double soft_quantize(const std::vector<double>& centers, double s, double y, double* derivative = nullptr);

struct CompressModel {
  MlpParams encoder;
  MlpParams decoder;
  FactorizedDensity entropy;
  QuantizerMode quantizer;  // evaluation-time quantizer
  nlohmann::json meta = nlohmann::json::object();

  int input_dim() const { return encoder.input_dim(); }
  int latent_dim() const { return encoder.output_dim(); }
  void validate() const;
};

CompressModel make_model(int input_dim, const std::vector<int>& encoder_hidden, int latent_dim,
                         const std::vector<int>& decoder_hidden, QuantizerMode quantizer, Rng& rng);

Eigen::VectorXd encode(const CompressModel& m, const Eigen::VectorXd& x);
Eigen::VectorXd decode(const CompressModel& m, const Eigen::VectorXd& y_hat);
/// Deterministic hard quantization used at evaluation.
Eigen::VectorXd hard_quantize(const CompressModel& m, const Eigen::VectorXd& y);
/// decode(hard_quantize(encode(x))).
Eigen::VectorXd reconstruct(const CompressModel& m, const Eigen::VectorXd& x);
Eigen::MatrixXd encode_batch(const CompressModel& m, const Eigen::MatrixXd& x);
Eigen::MatrixXd reconstruct_batch(const CompressModel& m, const Eigen::MatrixXd& x);

enum class DistortionKind { sse, mse, rmse, msssim, nlpd };
std::string to_string(DistortionKind k);
DistortionKind distortion_from_string(const std::string& s);

/// Distortion between two signals given as columns. Image kinds need the patch
/// geometry; `grad` (optional) receives d D / d x_hat. For msssim the
/// distortion is 1 - MS-SSIM.
double distortion(DistortionKind kind, const Eigen::VectorXd& x, const Eigen::VectorXd& x_hat, int height = 0,
                  int width = 0, Eigen::VectorXd* grad = nullptr);

enum class LossVariant { plain, prob_weighted, inv_prob_weighted, no_data_weighted };
std::string to_string(LossVariant v);
LossVariant loss_variant_from_string(const std::string& s);

/// Patches of pixels drawn i.i.d. uniform in [0, 1].
struct UniformNoisePatches {
  int height = 16;
  int width = 16;
};

/// A fixed list of patches visited in order (sequential) or drawn uniformly.
struct PatchSet {
  std::vector<Patch> patches;
  bool sequential = false;
};

using DataSpec = std::variant<Density, UniformNoisePatches, PatchSet>;

enum class Precision { f32, f64 };

struct TrainConfig {
  double lambda = 1.0;
  LossVariant variant = LossVariant::plain;
  double weight_exponent = 0.1;
  DistortionKind distortion = DistortionKind::sse;
  std::int64_t steps = 500000;
  int batch = 4096;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  DataSpec data = Density{StudentT2D{}};
  /// Density behind the probability weights; defaults to the data density.
  std::optional<Density> weight_density;
  std::vector<int> encoder_hidden{100, 100};
  std::vector<int> decoder_hidden{100, 100};
  int latent_dim = 2;
  QuantizerMode quantizer = QuantizerMode::round();
  /// Soft-center models only: forward with the hard assignment, backward
  /// through the soft one.
  bool straight_through = false;
  std::int64_t checkpoint_every = 1000;
  Precision precision = Precision::f32;
  /// Standard deviation of Gaussian noise added to the encoder input while
  /// the distortion is measured against the clean sample (denoising training).
  double input_noise = 0.0;
  double adam_eps = 1e-8;

  void validate() const;
  int input_dim() const;
  nlohmann::json to_json() const;
  /// Patch sets are not serialized; callers re-attach them.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct CurvePoint {
  std::int64_t step;
  double rate_bpp;    // training estimate (noisy latent), bits per signal component
  double distortion;  // unweighted mean distortion
  double loss;        // weighted objective
};

struct TrainResult {
  CompressModel model;
  std::vector<CurvePoint> curve;
  long clamped_latents = 0;
};

/// Called after every optimizer step with the batch just used; `snapshot`
/// materializes the current model on demand.
using StepHook = std::function<void(std::int64_t step, const Eigen::MatrixXd& batch,
                                    const std::function<CompressModel()>& snapshot)>;

TrainResult train(const TrainConfig& cfg);
/// Start from an existing model (its quantizer is kept).
TrainResult train(const TrainConfig& cfg, CompressModel init, Rng& rng, const StepHook& hook = {});
/// Samples from `box`, weights the whole per-sample loss by p_tau(x)^exponent.
TrainResult train_no_data(TrainConfig cfg, const UniformBox2D& box, const Density& p_tau);

/// Objective value and gradients for a given batch and quantization noise
/// (noise ignored for soft/identity models). `x_in`, when given, is the
/// corrupted encoder input. Exposed for gradient checks.
struct LossGradient {
  double loss = 0.0;
  double rate_bits = 0.0;   // mean bits per sample
  double distortion = 0.0;  // mean unweighted distortion
  MlpParams encoder;
  MlpParams decoder;
  Eigen::MatrixXd logits;
};
LossGradient loss_and_gradient(const CompressModel& m, const TrainConfig& cfg, const Eigen::MatrixXd& x,
                               const Eigen::MatrixXd& noise, const Eigen::MatrixXd* x_in = nullptr);

struct RateDistortion {
  double rate_bpp;
  double distortion;
};

/// Hard quantization; rate is mean bits / input dimension. For fixed-alphabet
/// models the rate is the alphabet bound latent_dim * log2(L) / input_dim.
RateDistortion eval_rate_distortion(const CompressModel& m, const Eigen::MatrixXd& points, DistortionKind kind,
                                    int height = 0, int width = 0);
/// Per-point rate (bpp) and distortion.
std::vector<RateDistortion> eval_points(const CompressModel& m, const Eigen::MatrixXd& points, DistortionKind kind,
                                        int height = 0, int width = 0);

struct EntropyBound {
  double bits;
  double bpp;
};
/// (W * H) / (2^n * 2^n) * m * log2(L).
EntropyBound entropy_upper_bound(int height, int width, int n_downsamples, int channels, int num_centers);

nlohmann::json mlp_to_json(const MlpParams& p);
MlpParams mlp_from_json(const nlohmann::json& j);
nlohmann::json model_to_json(const CompressModel& m);
CompressModel model_from_json(const nlohmann::json& j);
void save_model(const std::string& path, const CompressModel& m);
CompressModel load_model(const std::string& path);

}  // namespace pplab
