#include "pplab/compress.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <numbers>
#include <type_traits>
#ifdef __SSE__
#include <xmmintrin.h>
#endif

#include "pplab/errors.hpp"

namespace pplab {

// --- quantizers --------------------------------------------------------------

QuantizerMode QuantizerMode::soft(std::vector<double> centers, double s) {
  QuantizerMode q{Kind::soft_centers, std::move(centers), s};
  q.validate();
  return q;
}

void QuantizerMode::validate() const {
  if (kind != Kind::soft_centers) return;
  if (centers.size() < 2) throw ConfigError("soft_centers: need at least two centers");
  for (std::size_t i = 1; i < centers.size(); ++i)
    if (!(centers[i] > centers[i - 1])) throw ConfigError("soft_centers: centers must be strictly increasing");
  if (!(scale > 0.0)) throw ConfigError("soft_centers: scale must be positive");
}

nlohmann::json QuantizerMode::to_json() const {
  switch (kind) {
    case Kind::round:
      return {{"kind", "round"}};
    case Kind::additive_uniform_noise:
      return {{"kind", "additive_uniform_noise"}};
    case Kind::identity:
      return {{"kind", "identity"}};
    case Kind::soft_centers:
      return {{"kind", "soft_centers"}, {"centers", centers}, {"s", scale}};
  }
  return {};
}

QuantizerMode QuantizerMode::from_json(const nlohmann::json& j) {
  const std::string k = j.at("kind").get<std::string>();
  if (k == "round") return round();
  if (k == "additive_uniform_noise") return noise();
  if (k == "identity") return identity();
  if (k == "soft_centers") return soft(j.at("centers").get<std::vector<double>>(), j.value("s", 1.0));
  throw ConfigError("unknown quantizer kind '" + k + "'");
}

double nearest_center(const std::vector<double>& centers, double y) {
  double best = centers.front();
  for (double c : centers)
    if (std::abs(y - c) < std::abs(y - best)) best = c;
  return best;
}

double soft_quantize(const std::vector<double>& centers, double s, double y, double* derivative) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double c : centers) mx = std::max(mx, -s * (y - c) * (y - c));
  double z = 0.0, m1 = 0.0, m2 = 0.0;
  for (double c : centers) {
    const double w = std::exp(-s * (y - c) * (y - c) - mx);
    z += w;
    m1 += w * c;
    m2 += w * c * c;
  }
  const double mean = m1 / z;
  if (derivative) *derivative = 2.0 * s * std::max(0.0, m2 / z - mean * mean);
  return mean;
}

Eigen::VectorXd quantize(const QuantizerMode& mode, const Eigen::VectorXd& y, Rng& rng) {
  mode.validate();
  Eigen::VectorXd out(y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    switch (mode.kind) {
      case QuantizerMode::Kind::round:
        out[i] = std::round(y[i]);
        break;
      case QuantizerMode::Kind::additive_uniform_noise:
        out[i] = y[i] + rng.uniform(-0.5, 0.5);
        break;
      case QuantizerMode::Kind::soft_centers:
        out[i] = soft_quantize(mode.centers, mode.scale, y[i]);
        break;
      case QuantizerMode::Kind::identity:
        out[i] = y[i];
        break;
    }
  }
  return out;
}

// --- model -------------------------------------------------------------------

void CompressModel::validate() const {
  encoder.validate();
  decoder.validate();
  quantizer.validate();
  if (encoder.output_dim() != decoder.input_dim())
    throw ShapeError("model: encoder output and decoder input dimensions differ");
  if (encoder.input_dim() != decoder.output_dim())
    throw ShapeError("model: decoder output does not match the signal dimension");
  const bool uses_rate = quantizer.kind == QuantizerMode::Kind::round ||
                         quantizer.kind == QuantizerMode::Kind::additive_uniform_noise;
  if (uses_rate && entropy.dims() != encoder.output_dim())
    throw ShapeError("model: entropy model dimension differs from the latent dimension");
}

CompressModel make_model(int input_dim, const std::vector<int>& encoder_hidden, int latent_dim,
                         const std::vector<int>& decoder_hidden, QuantizerMode quantizer, Rng& rng) {
  std::vector<int> enc{input_dim};
  enc.insert(enc.end(), encoder_hidden.begin(), encoder_hidden.end());
  enc.push_back(latent_dim);
  std::vector<int> dec{latent_dim};
  dec.insert(dec.end(), decoder_hidden.begin(), decoder_hidden.end());
  dec.push_back(input_dim);
  CompressModel m;
  m.encoder = init_mlp(enc, rng);
  m.decoder = init_mlp(dec, rng);
  m.entropy = FactorizedDensity::uniform(latent_dim);
  m.quantizer = std::move(quantizer);
  m.validate();
  return m;
}

namespace {

double hard_value(const QuantizerMode& q, double y) {
  switch (q.kind) {
    case QuantizerMode::Kind::round:
    case QuantizerMode::Kind::additive_uniform_noise:
      return std::round(y);
    case QuantizerMode::Kind::soft_centers:
      return nearest_center(q.centers, y);
    case QuantizerMode::Kind::identity:
      return y;
  }
  return y;
}

bool uses_entropy_model(const QuantizerMode& q) {
  return q.kind == QuantizerMode::Kind::round || q.kind == QuantizerMode::Kind::additive_uniform_noise;
}

}  // namespace

Eigen::VectorXd encode(const CompressModel& m, const Eigen::VectorXd& x) { return mlp_forward(m.encoder, x); }

Eigen::VectorXd decode(const CompressModel& m, const Eigen::VectorXd& y_hat) {
  return mlp_forward(m.decoder, y_hat);
}

Eigen::VectorXd hard_quantize(const CompressModel& m, const Eigen::VectorXd& y) {
  return y.unaryExpr([&](double v) { return hard_value(m.quantizer, v); });
}

Eigen::VectorXd reconstruct(const CompressModel& m, const Eigen::VectorXd& x) {
  return decode(m, hard_quantize(m, encode(m, x)));
}

Eigen::MatrixXd encode_batch(const CompressModel& m, const Eigen::MatrixXd& x) {
  return forward_batch<double>(m.encoder, x);
}

Eigen::MatrixXd reconstruct_batch(const CompressModel& m, const Eigen::MatrixXd& x) {
  Eigen::MatrixXd y = encode_batch(m, x);
  y = y.unaryExpr([&](double v) { return hard_value(m.quantizer, v); });
  return forward_batch<double>(m.decoder, y);
}

// --- distortion ----------------------------------------------------------------

std::string to_string(DistortionKind k) {
  switch (k) {
    case DistortionKind::sse:
      return "sse";
    case DistortionKind::mse:
      return "mse";
    case DistortionKind::rmse:
      return "rmse";
    case DistortionKind::msssim:
      return "msssim";
    case DistortionKind::nlpd:
      return "nlpd";
  }
  return "?";
}

DistortionKind distortion_from_string(const std::string& s) {
  if (s == "sse") return DistortionKind::sse;
  if (s == "mse") return DistortionKind::mse;
  if (s == "rmse") return DistortionKind::rmse;
  if (s == "msssim") return DistortionKind::msssim;
  if (s == "nlpd") return DistortionKind::nlpd;
  throw ConfigError("unknown distortion '" + s + "'");
}

double distortion(DistortionKind kind, const Eigen::VectorXd& x, const Eigen::VectorXd& x_hat, int height, int width,
                  Eigen::VectorXd* grad) {
  if (x.size() != x_hat.size()) throw ShapeError("distortion: signals differ in length");
  const double n = static_cast<double>(x.size());
  switch (kind) {
    case DistortionKind::sse: {
      if (grad) *grad = 2.0 * (x_hat - x);
      return (x_hat - x).squaredNorm();
    }
    case DistortionKind::mse: {
      if (grad) *grad = 2.0 * (x_hat - x) / n;
      return (x_hat - x).squaredNorm() / n;
    }
    case DistortionKind::rmse: {
      const double r = std::sqrt((x_hat - x).squaredNorm() / n);
      if (grad) *grad = r > 0.0 ? Eigen::VectorXd((x_hat - x) / (n * r)) : Eigen::VectorXd::Zero(x.size());
      return r;
    }
    case DistortionKind::msssim:
    case DistortionKind::nlpd: {
      if (height * width != x.size()) throw ShapeError("distortion: patch geometry does not match signal length");
      const Image a = image_from_row_major(height, width, {x.data(), static_cast<std::size_t>(x.size())});
      const Image b = image_from_row_major(height, width, {x_hat.data(), static_cast<std::size_t>(x_hat.size())});
      Image g;
      double value;
      if (kind == DistortionKind::nlpd) {
        value = nlpd_with_grad(a, b, grad ? &g : nullptr);
      } else {
        MsssimConfig cfg;
        cfg.smooth = 1e-2;
        value = 1.0 - msssim_with_grad(a, b, grad ? &g : nullptr, cfg);
        if (grad) g = -g;
      }
      if (grad) {
        const auto rm = row_major(g);
        *grad = Eigen::Map<const Eigen::VectorXd>(rm.data(), static_cast<Eigen::Index>(rm.size()));
      }
      return value;
    }
  }
  return 0.0;
}

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::plain:
      return "plain";
    case LossVariant::prob_weighted:
      return "prob_weighted";
    case LossVariant::inv_prob_weighted:
      return "inv_prob_weighted";
    case LossVariant::no_data_weighted:
      return "no_data_weighted";
  }
  return "?";
}

LossVariant loss_variant_from_string(const std::string& s) {
  if (s == "plain" || s == "L1") return LossVariant::plain;
  if (s == "prob_weighted" || s == "L2") return LossVariant::prob_weighted;
  if (s == "inv_prob_weighted" || s == "L3") return LossVariant::inv_prob_weighted;
  if (s == "no_data_weighted") return LossVariant::no_data_weighted;
  throw ConfigError("unknown loss variant '" + s + "'");
}

// --- config --------------------------------------------------------------------

int TrainConfig::input_dim() const {
  if (const auto* d = std::get_if<Density>(&data)) return dimension(*d);
  if (const auto* u = std::get_if<UniformNoisePatches>(&data)) return u->height * u->width;
  const auto& ps = std::get<PatchSet>(data);
  if (ps.patches.empty()) throw ConfigError("patch set is empty");
  return ps.patches.front().height() * ps.patches.front().width();
}

namespace {

std::pair<int, int> patch_geometry(const TrainConfig& cfg) {
  if (const auto* u = std::get_if<UniformNoisePatches>(&cfg.data)) return {u->height, u->width};
  if (const auto* ps = std::get_if<PatchSet>(&cfg.data))
    if (!ps->patches.empty()) return {ps->patches.front().height(), ps->patches.front().width()};
  return {0, 0};
}

bool is_image_distortion(DistortionKind k) { return k == DistortionKind::msssim || k == DistortionKind::nlpd; }

}  // namespace

void TrainConfig::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be positive");
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  if (!(input_noise >= 0.0)) throw ConfigError("input_noise must be >= 0");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  quantizer.validate();
  if (quantizer.kind == QuantizerMode::Kind::additive_uniform_noise)
    throw ConfigError("quantizer: use 'round' for models trained with additive noise");
  if (variant != LossVariant::plain && !weight_density && !std::holds_alternative<Density>(data))
    throw ConfigError("probability-weighted variants need a density");
  if (const auto* ps = std::get_if<PatchSet>(&data)) {
    if (ps->patches.empty()) throw ConfigError("patch set is empty");
    for (const auto& p : ps->patches)
      if (p.height() != ps->patches.front().height() || p.width() != ps->patches.front().width())
        throw ConfigError("patch set mixes patch sizes");
  }
  if (is_image_distortion(distortion) && patch_geometry(*this).first == 0)
    throw ConfigError("image distortions need patch data");
  if (weight_density && dimension(*weight_density) != input_dim())
    throw ConfigError("weight density dimension differs from the data dimension");
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j;
  j["lambda"] = lambda;
  j["loss_variant"] = to_string(variant);
  j["weight_exponent"] = weight_exponent;
  j["distortion"] = to_string(distortion);
  j["steps"] = steps;
  j["batch"] = batch;
  j["lr"] = lr;
  j["seed"] = seed;
  if (const auto* d = std::get_if<Density>(&data)) {
    j["data"] = density_to_json(*d);
  } else if (const auto* u = std::get_if<UniformNoisePatches>(&data)) {
    j["data"] = {{"kind", "uniform_noise_patches"}, {"height", u->height}, {"width", u->width}};
  } else {
    const auto& ps = std::get<PatchSet>(data);
    j["data"] = {{"kind", "patch_set"}, {"count", ps.patches.size()}, {"sequential", ps.sequential}};
  }
  if (weight_density) j["weight_density"] = density_to_json(*weight_density);
  j["encoder_hidden"] = encoder_hidden;
  j["decoder_hidden"] = decoder_hidden;
  j["latent_dim"] = latent_dim;
  j["quantizer"] = quantizer.to_json();
  j["straight_through"] = straight_through;
  j["checkpoint_every"] = checkpoint_every;
  j["precision"] = precision == Precision::f32 ? "f32" : "f64";
  if (input_noise > 0.0) j["input_noise"] = input_noise;
  if (adam_eps != 1e-8) j["adam_eps"] = adam_eps;
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lambda = j.value("lambda", c.lambda);
  if (j.contains("loss_variant")) c.variant = loss_variant_from_string(j.at("loss_variant").get<std::string>());
  c.weight_exponent = j.value("weight_exponent", c.weight_exponent);
  if (j.contains("distortion")) c.distortion = distortion_from_string(j.at("distortion").get<std::string>());
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.seed = j.value("seed", c.seed);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    const std::string kind = d.at("kind").get<std::string>();
    if (kind == "uniform_noise_patches") {
      c.data = UniformNoisePatches{d.value("height", 16), d.value("width", 16)};
    } else if (kind == "patch_set") {
      c.data = PatchSet{{}, d.value("sequential", false)};
    } else {
      c.data = density_from_json(d);
    }
  }
  if (j.contains("weight_density")) c.weight_density = density_from_json(j.at("weight_density"));
  c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
  c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  if (j.contains("quantizer")) c.quantizer = QuantizerMode::from_json(j.at("quantizer"));
  c.straight_through = j.value("straight_through", c.straight_through);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.input_noise = j.value("input_noise", c.input_noise);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  if (j.contains("precision")) {
    const auto p = j.at("precision").get<std::string>();
    if (p == "f32") c.precision = Precision::f32;
    else if (p == "f64") c.precision = Precision::f64;
    else throw ConfigError("precision must be f32 or f64");
  }
  return c;
}

// --- the objective ----------------------------------------------------------------

namespace {

template <class T>
struct Working {
  BasicMlp<T> encoder;
  BasicMlp<T> decoder;
  BasicFactorizedDensity<T> entropy;
};

template <class T>
struct StepGrads {
  double loss = 0.0;
  double rate_bits = 0.0;
  double distortion = 0.0;
  BasicMlp<T> encoder;
  BasicMlp<T> decoder;
  Mat<T> logits;
};

struct SampleWeights {
  Eigen::VectorXd rate;
  Eigen::VectorXd dist;
};

SampleWeights sample_weights(const TrainConfig& cfg, const Eigen::MatrixXd& x) {
  const Eigen::Index n = x.cols();
  SampleWeights w{Eigen::VectorXd::Ones(n), Eigen::VectorXd::Constant(n, cfg.lambda)};
  if (cfg.variant == LossVariant::plain) return w;
  const Density& dens = cfg.weight_density ? *cfg.weight_density : std::get<Density>(cfg.data);
  for (Eigen::Index b = 0; b < n; ++b) {
    const double lp = log_pdf(dens, {x.col(b).data(), static_cast<std::size_t>(x.rows())});
    switch (cfg.variant) {
      case LossVariant::prob_weighted:
        w.dist[b] = cfg.lambda * std::exp(cfg.weight_exponent * lp);
        break;
      case LossVariant::inv_prob_weighted:
        w.dist[b] = cfg.lambda * std::exp(-cfg.weight_exponent * lp);
        break;
      case LossVariant::no_data_weighted: {
        const double q = std::exp(cfg.weight_exponent * lp);
        w.rate[b] = q;
        w.dist[b] = cfg.lambda * q;
        break;
      }
      case LossVariant::plain:
        break;
    }
  }
  return w;
}

// Buffers reused from one step to the next.
template <class T>
struct Workspace {
  MlpTape<T> enc_tape;
  MlpTape<T> dec_tape;
};

template <class T>
void compute_step(const Working<T>& wm, const QuantizerMode& q, const TrainConfig& cfg, const Eigen::MatrixXd& x,
                  const Eigen::MatrixXd& noise, const Eigen::MatrixXd* x_in, StepGrads<T>& out, long* clamped,
                  Workspace<T>& ws) {
  const Eigen::Index B = x.cols();
  const auto [ph, pw] = patch_geometry(cfg);
  const SampleWeights w = sample_weights(cfg, x);
  const Mat<T> xt = x.cast<T>();

  MlpTape<T>& enc_tape = ws.enc_tape;
  MlpTape<T>& dec_tape = ws.dec_tape;
  if (x_in && (x_in->rows() != x.rows() || x_in->cols() != B)) throw ShapeError("corrupted input has wrong shape");
  const Mat<T> y = forward_batch<T>(wm.encoder, x_in ? Mat<T>(x_in->cast<T>()) : xt, &enc_tape);
  Mat<T> y_tilde = y;
  Mat<T> dquant;  // soft quantizer derivative
  const bool rate_on = uses_entropy_model(q);
  if (rate_on) {
    if (noise.rows() != y.rows() || noise.cols() != B) throw ShapeError("quantization noise has wrong shape");
    y_tilde += noise.cast<T>();
  } else if (q.kind == QuantizerMode::Kind::soft_centers) {
    dquant.resize(y.rows(), y.cols());
    for (Eigen::Index b = 0; b < B; ++b)
      for (Eigen::Index d = 0; d < y.rows(); ++d) {
        double der;
        const double yv = static_cast<double>(y(d, b));
        const double soft = soft_quantize(q.centers, q.scale, yv, &der);
        y_tilde(d, b) = static_cast<T>(cfg.straight_through ? nearest_center(q.centers, yv) : soft);
        dquant(d, b) = static_cast<T>(der);
      }
  }
  const Mat<T> x_hat = forward_batch<T>(wm.decoder, y_tilde, &dec_tape);

  // distortion
  Mat<T> g_xhat(x_hat.rows(), B);
  Eigen::VectorXd dist(B);
  const T invB = T(1) / static_cast<T>(B);
  if (cfg.distortion == DistortionKind::sse || cfg.distortion == DistortionKind::mse) {
    const Mat<T> diff = x_hat - xt;
    const T norm = cfg.distortion == DistortionKind::mse ? T(1) / static_cast<T>(x.rows()) : T(1);
    const Vec<T> sq = diff.colwise().squaredNorm().transpose();
    for (Eigen::Index b = 0; b < B; ++b) {
      dist[b] = static_cast<double>(sq[b] * norm);
      g_xhat.col(b) = diff.col(b) * (T(2) * norm * static_cast<T>(w.dist[b]) * invB);
    }
  } else {
    Eigen::VectorXd g;
    for (Eigen::Index b = 0; b < B; ++b) {
      dist[b] = distortion(cfg.distortion, x.col(b), x_hat.col(b).template cast<double>(), ph, pw, &g);
      g_xhat.col(b) = (g * (w.dist[b] / static_cast<double>(B))).cast<T>();
    }
  }

  Mat<T> g_ytilde = backward_batch<T>(wm.decoder, dec_tape, g_xhat, out.decoder);
  Eigen::VectorXd bits = Eigen::VectorXd::Zero(B);
  if (rate_on) {
    RateEvaluator<T> rate(wm.entropy);
    const Vec<T> rw = (w.rate / static_cast<double>(B)).cast<T>();
    Mat<T> g_rate_y;
    bits = rate.bits(y_tilde, &rw, &g_rate_y, &out.logits, clamped).template cast<double>();
    g_ytilde += g_rate_y;
  } else {
    out.logits = Mat<T>::Zero(wm.entropy.logits.rows(), wm.entropy.logits.cols());
  }
  if (q.kind == QuantizerMode::Kind::soft_centers) g_ytilde.array() *= dquant.array();
  backward_batch<T>(wm.encoder, enc_tape, g_ytilde, out.encoder);

  out.loss = (w.rate.cwiseProduct(bits) + w.dist.cwiseProduct(dist)).mean();
  out.rate_bits = bits.mean();
  out.distortion = dist.mean();
}

template <class T>
Working<T> to_working(const CompressModel& m) {
  return {m.encoder.cast<T>(), m.decoder.cast<T>(), m.entropy.cast<T>()};
}

template <class T>
void from_working(const Working<T>& wm, CompressModel& m) {
  m.encoder = wm.encoder.template cast<double>();
  m.decoder = wm.decoder.template cast<double>();
  m.entropy = wm.entropy.template cast<double>();
}

void fill_batch(const TrainConfig& cfg, std::int64_t step, Rng& rng, Eigen::MatrixXd& x) {
  const int dim = cfg.input_dim();
  x.resize(dim, cfg.batch);
  if (const auto* d = std::get_if<Density>(&cfg.data)) {
    for (int b = 0; b < cfg.batch; ++b) sample_into(*d, rng, {x.col(b).data(), static_cast<std::size_t>(dim)});
  } else if (std::holds_alternative<UniformNoisePatches>(cfg.data)) {
    for (int b = 0; b < cfg.batch; ++b)
      for (int i = 0; i < dim; ++i) x(i, b) = rng.uniform();
  } else {
    const auto& ps = std::get<PatchSet>(cfg.data);
    const auto n = static_cast<std::int64_t>(ps.patches.size());
    for (int b = 0; b < cfg.batch; ++b) {
      const std::int64_t idx = ps.sequential ? ((step - 1) * cfg.batch + b) % n
                                             : static_cast<std::int64_t>(rng.uniform() * static_cast<double>(n));
      const auto v = ps.patches[static_cast<std::size_t>(idx)].row_major();
      for (int i = 0; i < dim; ++i) x(i, b) = v[i];
    }
  }
}

template <class T>
TrainResult train_impl(const TrainConfig& cfg, CompressModel model, Rng& rng, const StepHook& hook) {
#ifdef __GLIBC__
  // Per-step temporaries are a few MB; keep them on the heap instead of a
  // fresh mmap (and page faults) every step.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
#ifdef __SSE__
  // float training flushes subnormals to zero
  struct FlushDenormals {
    unsigned saved = _mm_getcsr();
    FlushDenormals() {
      if constexpr (std::is_same_v<T, float>) _mm_setcsr(saved | 0x8040);
    }
    ~FlushDenormals() { _mm_setcsr(saved); }
  } flush;
#endif
  Working<T> wm = to_working<T>(model);
  AdamState<T> adam;
  adam.config.lr = cfg.lr;
  adam.config.eps = cfg.adam_eps;
  StepGrads<T> g;
  g.encoder = wm.encoder.zeros_like();
  g.decoder = wm.decoder.zeros_like();
  TrainResult res;
  Eigen::MatrixXd x, x_in, noise;
  Workspace<T> ws;
  const bool rate_on = uses_entropy_model(model.quantizer);
  double acc_rate = 0.0, acc_dist = 0.0, acc_loss = 0.0;
  std::int64_t acc_n = 0;
  const double dim = static_cast<double>(cfg.input_dim());
  for (std::int64_t step = 1; step <= cfg.steps; ++step) {
    fill_batch(cfg, step, rng, x);
    if (rate_on) {
      noise.resize(cfg.latent_dim, cfg.batch);
      for (Eigen::Index b = 0; b < noise.cols(); ++b)
        for (Eigen::Index d = 0; d < noise.rows(); ++d) noise(d, b) = rng.uniform(-0.5, 0.5);
    }
    if (cfg.input_noise > 0.0) {
      x_in.resize(x.rows(), x.cols());
      for (Eigen::Index b = 0; b < x.cols(); ++b)
        for (Eigen::Index d = 0; d < x.rows(); ++d) x_in(d, b) = x(d, b) + cfg.input_noise * rng.normal();
    }
    compute_step<T>(wm, model.quantizer, cfg, x, noise, cfg.input_noise > 0.0 ? &x_in : nullptr, g,
                    &res.clamped_latents, ws);
    if (!std::isfinite(g.loss)) throw TrainingDiverged("non-finite loss", step);
    std::vector<ParamBlock<T>> blocks;
    append_blocks(wm.encoder, g.encoder, blocks);
    append_blocks(wm.decoder, g.decoder, blocks);
    if (rate_on)
      blocks.push_back({wm.entropy.logits.data(), g.logits.data(), static_cast<std::size_t>(g.logits.size())});
    adam_update<T>(blocks, adam);

    acc_rate += g.rate_bits / dim;
    acc_dist += g.distortion;
    acc_loss += g.loss;
    ++acc_n;
    if (step % cfg.checkpoint_every == 0 || step == cfg.steps) {
      res.curve.push_back({step, acc_rate / acc_n, acc_dist / acc_n, acc_loss / acc_n});
      acc_rate = acc_dist = acc_loss = 0.0;
      acc_n = 0;
    }
    if (hook) {
      const std::function<CompressModel()> snapshot = [&]() {
        CompressModel m = model;
        from_working(wm, m);
        return m;
      };
      hook(step, x, snapshot);
    }
  }
  from_working(wm, model);
  model.meta = {{"config", cfg.to_json()}, {"seed", cfg.seed}, {"final_step", cfg.steps}};
  res.model = std::move(model);
  return res;
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const QuantizerMode q = cfg.quantizer;
  CompressModel init = make_model(cfg.input_dim(), cfg.encoder_hidden, cfg.latent_dim, cfg.decoder_hidden, q, rng);
  return train(cfg, std::move(init), rng);
}

TrainResult train(const TrainConfig& cfg, CompressModel init, Rng& rng, const StepHook& hook) {
  cfg.validate();
  init.validate();
  if (init.input_dim() != cfg.input_dim() || init.latent_dim() != cfg.latent_dim)
    throw ShapeError("initial model does not match the training configuration");
  if (cfg.precision == Precision::f32) return train_impl<float>(cfg, std::move(init), rng, hook);
  return train_impl<double>(cfg, std::move(init), rng, hook);
}

TrainResult train_no_data(TrainConfig cfg, const UniformBox2D& box, const Density& p_tau) {
  box.validate();
  cfg.data = Density{box};
  cfg.weight_density = p_tau;
  cfg.variant = LossVariant::no_data_weighted;
  return train(cfg);
}

LossGradient loss_and_gradient(const CompressModel& m, const TrainConfig& cfg, const Eigen::MatrixXd& x,
                               const Eigen::MatrixXd& noise, const Eigen::MatrixXd* x_in) {
  m.validate();
  const Working<double> wm = to_working<double>(m);
  StepGrads<double> g;
  g.encoder = wm.encoder.zeros_like();
  g.decoder = wm.decoder.zeros_like();
  Workspace<double> ws;
  compute_step<double>(wm, m.quantizer, cfg, x, noise, x_in, g, nullptr, ws);
  return {g.loss, g.rate_bits, g.distortion, std::move(g.encoder), std::move(g.decoder), std::move(g.logits)};
}

// --- evaluation ----------------------------------------------------------------------

std::vector<RateDistortion> eval_points(const CompressModel& m, const Eigen::MatrixXd& points, DistortionKind kind,
                                        int height, int width) {
  if (points.cols() == 0) throw InputError("eval: empty test set");
  m.validate();
  Eigen::MatrixXd y = encode_batch(m, points);
  y = y.unaryExpr([&](double v) { return hard_value(m.quantizer, v); });
  const Eigen::MatrixXd x_hat = forward_batch<double>(m.decoder, y);
  const double dim = static_cast<double>(points.rows());
  Eigen::VectorXd bits = Eigen::VectorXd::Zero(points.cols());
  if (uses_entropy_model(m.quantizer)) {
    bits = RateEvaluator<double>(m.entropy).bits(y);
  } else if (m.quantizer.kind == QuantizerMode::Kind::soft_centers) {
    bits.setConstant(m.latent_dim() * std::log2(static_cast<double>(m.quantizer.centers.size())));
  }
  std::vector<RateDistortion> out;
  out.reserve(static_cast<std::size_t>(points.cols()));
  for (Eigen::Index b = 0; b < points.cols(); ++b)
    out.push_back({bits[b] / dim, distortion(kind, points.col(b), x_hat.col(b), height, width)});
  return out;
}

RateDistortion eval_rate_distortion(const CompressModel& m, const Eigen::MatrixXd& points, DistortionKind kind,
                                    int height, int width) {
  const auto per = eval_points(m, points, kind, height, width);
  RateDistortion mean{0.0, 0.0};
  for (const auto& p : per) {
    mean.rate_bpp += p.rate_bpp;
    mean.distortion += p.distortion;
  }
  mean.rate_bpp /= static_cast<double>(per.size());
  mean.distortion /= static_cast<double>(per.size());
  return mean;
}

EntropyBound entropy_upper_bound(int height, int width, int n_downsamples, int channels, int num_centers) {
  if (height < 1 || width < 1 || n_downsamples < 0 || channels < 0)
    throw ConfigError("entropy_upper_bound: dimensions must be positive");
  if (num_centers < 2) throw ConfigError("entropy_upper_bound: need at least two centers");
  const double cells = static_cast<double>(height) * width / std::ldexp(1.0, 2 * n_downsamples);
  const double bits = cells * channels * std::log2(static_cast<double>(num_centers));
  return {bits, bits / (static_cast<double>(height) * width)};
}

// --- serialization ---------------------------------------------------------------------

nlohmann::json mlp_to_json(const MlpParams& p) {
  nlohmann::json w = nlohmann::json::array(), b = nlohmann::json::array();
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < p.weights[l].rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(p.weights[l].cols()));
      for (Eigen::Index c = 0; c < p.weights[l].cols(); ++c) row[static_cast<std::size_t>(c)] = p.weights[l](r, c);
      rows.push_back(row);
    }
    w.push_back(rows);
    b.push_back(std::vector<double>(p.biases[l].data(), p.biases[l].data() + p.biases[l].size()));
  }
  return {{"dims", p.dims}, {"weights", w}, {"biases", b}};
}

MlpParams mlp_from_json(const nlohmann::json& j) {
  MlpParams p = MlpParams::zeros(j.at("dims").get<std::vector<int>>());
  const auto& w = j.at("weights");
  const auto& b = j.at("biases");
  if (w.size() != p.num_layers() || b.size() != p.num_layers()) throw ShapeError("mlp json: wrong layer count");
  for (std::size_t l = 0; l < p.num_layers(); ++l) {
    if (w[l].size() != static_cast<std::size_t>(p.weights[l].rows())) throw ShapeError("mlp json: wrong row count");
    for (Eigen::Index r = 0; r < p.weights[l].rows(); ++r) {
      const auto row = w[l][static_cast<std::size_t>(r)].get<std::vector<double>>();
      if (row.size() != static_cast<std::size_t>(p.weights[l].cols())) throw ShapeError("mlp json: wrong column count");
      for (Eigen::Index c = 0; c < p.weights[l].cols(); ++c) p.weights[l](r, c) = row[static_cast<std::size_t>(c)];
    }
    const auto bias = b[l].get<std::vector<double>>();
    if (bias.size() != static_cast<std::size_t>(p.biases[l].size())) throw ShapeError("mlp json: wrong bias length");
    for (std::size_t i = 0; i < bias.size(); ++i) p.biases[l][static_cast<Eigen::Index>(i)] = bias[i];
  }
  p.validate();
  return p;
}

nlohmann::json model_to_json(const CompressModel& m) {
  nlohmann::json logits = nlohmann::json::array();
  for (Eigen::Index d = 0; d < m.entropy.logits.cols(); ++d)
    logits.push_back(std::vector<double>(m.entropy.logits.col(d).data(),
                                         m.entropy.logits.col(d).data() + m.entropy.logits.rows()));
  return {{"encoder", mlp_to_json(m.encoder)},
          {"decoder", mlp_to_json(m.decoder)},
          {"entropy", {{"knots_halfwidth", m.entropy.halfwidth}, {"knots", m.entropy.knots}, {"logits", logits}}},
          {"quantizer", m.quantizer.to_json()},
          {"meta", m.meta}};
}

CompressModel model_from_json(const nlohmann::json& j) {
  CompressModel m;
  m.encoder = mlp_from_json(j.at("encoder"));
  m.decoder = mlp_from_json(j.at("decoder"));
  const auto& e = j.at("entropy");
  const auto logits = e.at("logits").get<std::vector<std::vector<double>>>();
  m.entropy = FactorizedDensity::uniform(static_cast<int>(logits.size()), e.value("knots_halfwidth", 30.0),
                                         e.value("knots", 121));
  for (std::size_t d = 0; d < logits.size(); ++d) {
    if (logits[d].size() != static_cast<std::size_t>(m.entropy.intervals()))
      throw ShapeError("entropy json: wrong logit count");
    for (std::size_t i = 0; i < logits[d].size(); ++i)
      m.entropy.logits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = logits[d][i];
  }
  m.quantizer = QuantizerMode::from_json(j.at("quantizer"));
  m.meta = j.value("meta", nlohmann::json::object());
  m.validate();
  return m;
}

void save_model(const std::string& path, const CompressModel& m) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << model_to_json(m).dump() << '\n';
}

CompressModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  return model_from_json(nlohmann::json::parse(in));
}

}  // namespace pplab
