#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "check.hpp"
#include "pplab/compress.hpp"
#include "pplab/errors.hpp"

using namespace pplab;
using pplab::test::central_diff;
using pplab::test::rel_err;

namespace {

CompressModel zero_model(int dim = 2, int latent = 2) {
  Rng rng(0);
  CompressModel m = make_model(dim, {4}, latent, {4}, QuantizerMode::round(), rng);
  m.encoder.set_zero();
  m.decoder.set_zero();
  return m;
}

TrainConfig small_config(double lambda, std::int64_t steps) {
  TrainConfig c;
  c.lambda = lambda;
  c.steps = steps;
  c.batch = 128;
  c.lr = 1e-2;
  c.encoder_hidden = {16};
  c.decoder_hidden = {16};
  c.checkpoint_every = steps;
  c.precision = Precision::f64;
  return c;
}

// Every trainable scalar of a model: encoder, decoder, logits.
std::vector<double*> parameter_slots(CompressModel& m) {
  std::vector<double*> out;
  for (MlpParams* p : {&m.encoder, &m.decoder})
    for (std::size_t l = 0; l < p->num_layers(); ++l) {
      for (Eigen::Index i = 0; i < p->weights[l].size(); ++i) out.push_back(p->weights[l].data() + i);
      for (Eigen::Index i = 0; i < p->biases[l].size(); ++i) out.push_back(p->biases[l].data() + i);
    }
  for (Eigen::Index i = 0; i < m.entropy.logits.size(); ++i) out.push_back(m.entropy.logits.data() + i);
  return out;
}

std::vector<double> flat_gradient(const LossGradient& g) {
  std::vector<double> out;
  for (const MlpParams* p : {&g.encoder, &g.decoder})
    for (std::size_t l = 0; l < p->num_layers(); ++l) {
      out.insert(out.end(), p->weights[l].data(), p->weights[l].data() + p->weights[l].size());
      out.insert(out.end(), p->biases[l].data(), p->biases[l].data() + p->biases[l].size());
    }
  out.insert(out.end(), g.logits.data(), g.logits.data() + g.logits.size());
  return out;
}

}  // namespace

TEST_CASE("encode and decode") {
  const CompressModel z = zero_model();
  const Eigen::Vector2d x(0.3, -1.2);
  CHECK(encode(z, x).isZero(0.0));
  CHECK(decode(z, Eigen::Vector2d(1, -1)).isZero(0.0));
  Rng rng(5);
  const CompressModel m = make_model(2, {8}, 3, {8}, QuantizerMode::round(), rng);
  CHECK(encode(m, x).size() == 3);
  CHECK(encode(m, x) == encode(m, x));
  CHECK(decode(m, Eigen::Vector3d(1, 0, 2)).size() == 2);
  CHECK(decode(m, Eigen::Vector3d(1, 0, 2)) == decode(m, Eigen::Vector3d(1, 0, 2)));
  CHECK_THROWS_AS(encode(m, Eigen::Vector3d::Zero()), ShapeError);
  CHECK_THROWS_AS(decode(m, Eigen::Vector2d::Zero()), ShapeError);
}

TEST_CASE("quantize examples") {
  Rng rng(1);
  const auto soft = QuantizerMode::soft({-1.0, 1.0}, 1.0);
  CHECK(quantize(soft, Eigen::VectorXd::Zero(1), rng)[0] == 0.0);
  CHECK(quantize(soft, Eigen::VectorXd::Constant(1, 0.5), rng)[0] == doctest::Approx(std::tanh(1.0)).epsilon(1e-14));
  CHECK(quantize(QuantizerMode::round(), Eigen::Vector2d(1.4, -0.5), rng) == Eigen::Vector2d(1.0, -1.0));
  CHECK(quantize(QuantizerMode::round(), Eigen::Vector2d(2.5, -2.4), rng) == Eigen::Vector2d(3.0, -2.0));
  CHECK(quantize(QuantizerMode::identity(), Eigen::Vector2d(0.3, 7.1), rng) == Eigen::Vector2d(0.3, 7.1));
  for (int i = 0; i < 100; ++i) {
    const double y = rng.normal(0.0, 3.0);
    const double q = quantize(QuantizerMode::noise(), Eigen::VectorXd::Constant(1, y), rng)[0];
    CHECK(std::abs(q - y) <= 0.5);
  }
  CHECK_THROWS_AS(QuantizerMode::soft({1.0}), ConfigError);
  CHECK_THROWS_AS(QuantizerMode::soft({1.0, 0.0}), ConfigError);
  CHECK_THROWS_AS(QuantizerMode::soft({0.0, 1.0}, 0.0), ConfigError);
}

TEST_CASE("soft quantizer hardens to nearest-center assignment") {
  const std::vector<double> centers{-2, -1, 0, 1, 2};
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const double y = rng.uniform(-4.0, 4.0);
    if (std::abs(y - std::round(y + 0.5) + 0.5) < 1e-3) continue;  // skip midpoints
    CHECK(soft_quantize(centers, 1e4, y) == doctest::Approx(nearest_center(centers, y)).epsilon(1e-12));
  }
  CHECK(nearest_center({-1.0, 1.0}, 0.0) == -1.0);
  double der = 0.0;
  const double y = 0.3;
  soft_quantize(centers, 1.7, y, &der);
  double yy = y;
  CHECK(der == doctest::Approx(central_diff(&yy, 1e-6, [&] { return soft_quantize(centers, 1.7, yy); })).epsilon(1e-7));
}

TEST_CASE("eval_rate_distortion") {
  CompressModel m = zero_model();
  // bin [-1/2, 1/2] holds half the mass in each latent dimension
  m.entropy.logits.setConstant(std::log(0.5 / 118.0));
  m.entropy.logits.row(59).setConstant(std::log(0.25));
  m.entropy.logits.row(60).setConstant(std::log(0.25));
  Rng rng(3);
  const Eigen::MatrixXd pts = sample(StudentT2D{}, 50, rng);
  const auto rd = eval_rate_distortion(m, pts, DistortionKind::sse);
  CHECK(rd.rate_bpp == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rd.distortion == doctest::Approx(pts.colwise().squaredNorm().mean()).epsilon(1e-12));
  for (const auto& p : eval_points(m, pts, DistortionKind::sse)) CHECK(p.rate_bpp >= 0.0);

  // a linear model that reproduces integer points exactly
  CompressModel id = zero_model();
  id.encoder = MlpParams::zeros({2, 2});
  id.encoder.weights[0].setIdentity();
  id.decoder = MlpParams::zeros({2, 2});
  id.decoder.weights[0].setIdentity();
  const Eigen::MatrixXd ints = (Eigen::MatrixXd(2, 3) << 1, 0, -3, 2, 5, 0).finished();
  CHECK(eval_rate_distortion(id, ints, DistortionKind::sse).distortion == 0.0);
  CHECK_THROWS_AS(eval_rate_distortion(id, Eigen::MatrixXd(2, 0), DistortionKind::sse), InputError);
}

TEST_CASE("entropy_upper_bound") {
  const auto a = entropy_upper_bound(64, 64, 4, 64, 2);
  CHECK(a.bits == 1024.0);
  CHECK(a.bpp == 0.25);
  const auto b = entropy_upper_bound(64, 64, 4, 64, 5);
  CHECK(b.bits == doctest::Approx(1024.0 * std::log2(5.0)).epsilon(1e-15));
  CHECK(b.bpp == doctest::Approx(0.5805).epsilon(1e-3));
  CHECK(entropy_upper_bound(64, 64, 4, 0, 2).bits == 0.0);
  CHECK_THROWS_AS(entropy_upper_bound(64, 64, 4, 64, 1), ConfigError);
}

TEST_CASE("distortion kinds") {
  const Eigen::Vector2d x(1.0, 2.0), y(1.5, 1.0);
  CHECK(distortion(DistortionKind::sse, x, y) == 1.25);
  CHECK(distortion(DistortionKind::mse, x, y) == 0.625);
  CHECK(distortion(DistortionKind::rmse, x, y) == doctest::Approx(std::sqrt(0.625)));
  CHECK_THROWS_AS(distortion(DistortionKind::nlpd, x, y), ShapeError);
  for (auto k : {DistortionKind::sse, DistortionKind::mse, DistortionKind::rmse, DistortionKind::msssim, DistortionKind::nlpd})
    CHECK(distortion_from_string(to_string(k)) == k);
  CHECK(loss_variant_from_string("L2") == LossVariant::prob_weighted);
  CHECK(loss_variant_from_string("L3") == LossVariant::inv_prob_weighted);
  CHECK_THROWS_AS(distortion_from_string("psnr"), ConfigError);
}

TEST_CASE("joint loss gradient matches central differences on 24 random models") {
  Rng rng(99);
  double worst = 0.0;
  const LossVariant variants[] = {LossVariant::plain, LossVariant::prob_weighted, LossVariant::inv_prob_weighted,
                                  LossVariant::no_data_weighted};
  const DistortionKind kinds[] = {DistortionKind::sse, DistortionKind::mse, DistortionKind::rmse};
  for (int t = 0; t < 24; ++t) {
    TrainConfig cfg;
    cfg.lambda = std::exp(rng.uniform(-1.0, 4.0));
    cfg.variant = variants[t % 4];
    cfg.distortion = kinds[t % 3];
    const int latent = 1 + t % 3;
    cfg.latent_dim = latent;
    if (t % 6 == 5) cfg.quantizer = QuantizerMode::soft({-2, -1, 0, 1, 2}, 1.3);
    CompressModel m = make_model(2, {5}, latent, {4}, cfg.quantizer, rng);
    for (auto& v : m.entropy.logits.reshaped()) v = rng.normal();
    for (auto& b : m.encoder.biases) b.setConstant(rng.normal());
    Eigen::MatrixXd x = sample(StudentT2D{}, 6, rng);
    Eigen::MatrixXd noise(latent, 6);
    for (auto& v : noise.reshaped()) v = rng.uniform(-0.5, 0.5);
    const auto g = loss_and_gradient(m, cfg, x, noise);
    const auto analytic = flat_gradient(g);
    auto slots = parameter_slots(m);
    REQUIRE(slots.size() == analytic.size());
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const double fd = central_diff(slots[i], 1e-6, [&] { return loss_and_gradient(m, cfg, x, noise).loss; });
      worst = std::max(worst, rel_err(analytic[i], fd, 1e-3));
    }
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("image-distortion losses have exact gradients") {
  Rng rng(7);
  for (auto kind : {DistortionKind::nlpd, DistortionKind::msssim}) {
    TrainConfig cfg;
    cfg.data = UniformNoisePatches{16, 16};
    cfg.distortion = kind;
    cfg.latent_dim = 4;
    cfg.quantizer = QuantizerMode::soft({-1.0, 1.0}, 1.0);
    CompressModel m = make_model(256, {6}, 4, {6}, cfg.quantizer, rng);
    Eigen::MatrixXd x(256, 2);
    for (auto& v : x.reshaped()) v = rng.uniform(0.1, 0.9);
    const auto g = loss_and_gradient(m, cfg, x, Eigen::MatrixXd());
    const auto analytic = flat_gradient(g);
    auto slots = parameter_slots(m);
    double worst = 0.0;
    for (int k = 0; k < 60; ++k) {
      const std::size_t i = static_cast<std::size_t>(rng.uniform() * static_cast<double>(slots.size() - m.entropy.logits.size()));
      const double fd = central_diff(slots[i], 1e-6, [&] { return loss_and_gradient(m, cfg, x, Eigen::MatrixXd()).loss; });
      worst = std::max(worst, rel_err(analytic[i], fd, 1e-3));
    }
    CHECK(worst <= 1e-3);
  }
}

TEST_CASE("training is deterministic and follows the rate-distortion tradeoff") {
  const TrainConfig low = small_config(1e-6, 1500);
  const TrainResult a = train(low);
  const TrainResult b = train(low);
  for (std::size_t l = 0; l < a.model.encoder.num_layers(); ++l)
    CHECK(a.model.encoder.weights[l] == b.model.encoder.weights[l]);
  CHECK(a.model.entropy.logits == b.model.entropy.logits);
  REQUIRE(a.curve.size() == 1);
  CHECK(a.curve.back().step == 1500);

  Rng rng(404);
  const Eigen::MatrixXd test = sample(StudentT2D{}, 2000, rng);
  const auto rd_low = eval_rate_distortion(a.model, test, DistortionKind::sse);
  CHECK(rd_low.rate_bpp <= 0.5);
  const auto rd_high = eval_rate_distortion(train(small_config(1e4, 1500)).model, test, DistortionKind::sse);
  CHECK(rd_high.distortion < rd_low.distortion);
}

TEST_CASE("constant probability weights reproduce the plain loss bit for bit") {
  TrainConfig plain = small_config(10.0, 40);
  plain.data = Density{Density1D::uniform(0.0, 1.0)};
  plain.checkpoint_every = 10;
  TrainConfig weighted = plain;
  weighted.variant = LossVariant::prob_weighted;
  const auto a = train(plain), b = train(weighted);
  for (std::size_t l = 0; l < a.model.decoder.num_layers(); ++l)
    CHECK(a.model.decoder.weights[l] == b.model.decoder.weights[l]);
  for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].loss == b.curve[i].loss);
}

TEST_CASE("no-data training with a uniform weight density is a rescaled plain run") {
  TrainConfig cfg = small_config(5.0, 30);
  cfg.checkpoint_every = 1;
  const UniformBox2D box{{-40.0, -40.0}, {40.0, 40.0}};
  TrainConfig plain = cfg;
  plain.data = Density{box};
  const auto a = train(plain);
  const double factor = std::pow(1.0 / box.area(), 0.1);
  // Adam is scale invariant only if eps scales with the gradients.
  cfg.adam_eps = plain.adam_eps * factor;
  const auto b = train_no_data(cfg, box, box);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.curve.size(); ++i)
    worst = std::max(worst, std::abs(b.curve[i].loss / (factor * a.curve[i].loss) - 1.0));
  MESSAGE("largest relative deviation from the constant factor: " << worst);
  CHECK(worst <= 1e-9);
  const auto c = train_no_data(cfg, box, box);
  CHECK(c.model.encoder.weights[0] == b.model.encoder.weights[0]);
}

TEST_CASE("training failures") {
  TrainConfig bad = small_config(1.0, 10);
  bad.steps = 0;
  CHECK_THROWS_AS(train(bad), ConfigError);
  TrainConfig img = small_config(1.0, 10);
  img.distortion = DistortionKind::nlpd;
  CHECK_THROWS_AS(train(img), ConfigError);
  TrainConfig wild = small_config(1.0, 50);
  wild.data = Density{Density1D::gaussian(0.0, 1e200)};
  CHECK_THROWS_AS(train(wild), TrainingDiverged);
}

TEST_CASE("patch training visits a patch set in order") {
  std::vector<Patch> set;
  for (int i = 0; i < 5; ++i) set.push_back(Patch::constant(16, 16, 0.1 * (i + 1)));
  TrainConfig cfg = small_config(1.0, 7);
  cfg.data = PatchSet{set, true};
  cfg.batch = 1;
  cfg.distortion = DistortionKind::mse;
  cfg.quantizer = QuantizerMode::identity();
  cfg.latent_dim = 3;
  cfg.encoder_hidden = {4};
  cfg.decoder_hidden = {4};
  Rng rng(1);
  CompressModel init = make_model(256, {4}, 3, {4}, cfg.quantizer, rng);
  std::vector<double> seen;
  train(cfg, init, rng, [&](std::int64_t, const Eigen::MatrixXd& batch, const std::function<CompressModel()>&) {
    seen.push_back(batch(0, 0));
  });
  const std::vector<double> expect{0.1, 0.2, 0.3, 0.4, 0.5, 0.1, 0.2};
  REQUIRE(seen.size() == expect.size());
  for (std::size_t i = 0; i < seen.size(); ++i) CHECK(seen[i] == doctest::Approx(expect[i]));
}

TEST_CASE("model and config serialization") {
  Rng rng(12);
  CompressModel m = make_model(2, {7}, 2, {5}, QuantizerMode::round(), rng);
  for (auto& v : m.entropy.logits.reshaped()) v = rng.normal();
  const auto path = std::filesystem::temp_directory_path() / "pplab_model_test.json";
  save_model(path.string(), m);
  const CompressModel back = load_model(path.string());
  std::filesystem::remove(path);
  CHECK(back.encoder.weights[0] == m.encoder.weights[0]);
  CHECK(back.decoder.biases[1] == m.decoder.biases[1]);
  CHECK(back.entropy.logits == m.entropy.logits);
  const auto j = mlp_to_json(m.encoder);
  CHECK(j["dims"] == nlohmann::json({2, 7, 2}));
  CHECK(mlp_from_json(j).weights[1] == m.encoder.weights[1]);

  TrainConfig c = small_config(3.5, 100);
  c.variant = LossVariant::inv_prob_weighted;
  c.quantizer = QuantizerMode::soft({-1.0, 0.0, 1.0}, 2.0);
  c.input_noise = 0.25;
  const TrainConfig r = TrainConfig::from_json(c.to_json());
  CHECK(r.to_json() == c.to_json());
}
