#include "pplab/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "pplab/densities.hpp"
#include "pplab/errors.hpp"
#include "pplab/image.hpp"
#include "pplab/induced.hpp"
#include "pplab/stats.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pplab {

// --- small utilities -----------------------------------------------------------

std::uint64_t config_hash(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  std::uint64_t h = 14695981039346656037ull ^ seed;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ull;
  }
  // splitmix64 finalizer
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  return h ^ (h >> 31);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "step,rate_bpp,distortion\n";
  for (const auto& p : curve)
    out += std::to_string(p.step) + ',' + format_double(p.rate_bpp) + ',' + format_double(p.distortion) + '\n';
  return out;
}

namespace {

void log_line(const RunOptions& opt, const std::string& msg) {
  static std::mutex mu;
  if (!opt.log) return;
  std::lock_guard<std::mutex> lock(mu);
  *opt.log << msg << '\n' << std::flush;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

std::string opt_field(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

/// Runs fn(0..n-1) on up to `jobs` threads.
void run_parallel(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), 1, std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

json curve_to_json(const std::vector<CurvePoint>& curve) {
  json out = json::array();
  for (const auto& p : curve) out.push_back({p.step, p.rate_bpp, p.distortion, p.loss});
  return out;
}

std::vector<CurvePoint> curve_from_json(const json& j) {
  std::vector<CurvePoint> out;
  for (const auto& p : j)
    out.push_back({p.at(0).get<std::int64_t>(), p.at(1).get<double>(), p.at(2).get<double>(), p.at(3).get<double>()});
  return out;
}

}  // namespace

TrainResult train_cached(const TrainConfig& cfg, const RunOptions& opt, const std::string& data_tag) {
  json key = cfg.to_json();
  if (!data_tag.empty()) key["data_tag"] = data_tag;
  key["format"] = 1;
  const std::string name = hex64(config_hash(key)) + ".json";
  if (opt.cache_dir) {
    const fs::path path = *opt.cache_dir / name;
    std::ifstream in(path);
    if (in) {
      const json j = json::parse(in);
      if (j.at("key") == key) {
        TrainResult r;
        r.model = model_from_json(j.at("model"));
        r.curve = curve_from_json(j.at("curve"));
        r.clamped_latents = j.value("clamped_latents", 0L);
        log_line(opt, "cache hit " + name);
        return r;
      }
    }
  }
  log_line(opt, "training " + cfg.to_json().dump());
  TrainResult r = train(cfg);
  if (opt.cache_dir) {
    fs::create_directories(*opt.cache_dir);
    const fs::path path = *opt.cache_dir / name;
    const fs::path tmp = path.string() + ".tmp" + hex64(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    write_text(tmp, json{{"key", key},
                         {"model", model_to_json(r.model)},
                         {"curve", curve_to_json(r.curve)},
                         {"clamped_latents", r.clamped_latents}}
                        .dump());
    fs::rename(tmp, path);
  }
  return r;
}

// --- configuration -----------------------------------------------------------------

namespace {

json student_t_json() { return density_to_json(StudentT2D{}); }

json train_defaults() {
  return {{"steps", 100000}, {"batch", 4096}, {"lr", 1e-3}, {"checkpoint_every", 1000}, {"precision", "f32"}};
}

json with(json base, const json& extra) {
  for (auto it = extra.begin(); it != extra.end(); ++it) base[it.key()] = it.value();
  return base;
}

const std::map<std::string, json>& defaults_table() {
  static const std::map<std::string, json> table = [] {
    std::map<std::string, json> t;
    t["obs1-equalizer"] = {{"seed", 0},
                           {"density", student_t_json()},
                           {"n_points", 2000},
                           {"delta", 1e-3},
                           {"n_dirs", 16},
                           {"gammas", {1.0, 1.0 / 3.0}}};
    // Geometric grid from 2 to 2048 (ratio 1.875): eval rates span roughly 0.5-5 bpp.
    json grid = json::array();
    for (int i = 0; i < 12; ++i) grid.push_back(2.0 * std::pow(1.875, i));
    t["fig3-sweep"] = with(train_defaults(), {{"seed", 0},
                                              {"density", student_t_json()},
                                              {"lambdas", grid},
                                              {"n_test", 2000},
                                              {"delta", 1e-3},
                                              {"n_dirs", 16}});
    json sub = json::array();
    for (int i = 1; i < 12; i += 2) sub.push_back(grid[i]);
    t["fig5-relperf"] = with(train_defaults(), {{"seed", 0},
                                                {"density", student_t_json()},
                                                {"lambdas", sub},
                                                {"weight_exponent", 0.1},
                                                {"n_probe", 200},
                                                {"x_max", 35.0},
                                                {"degree", 20}});
    const json box = {{"lo", {-40.0, -40.0}}, {"hi", {40.0, 40.0}}};
    t["nodata-2d"] = with(train_defaults(), {{"seed", 0},
                                             {"lambda", grid[6]},
                                             {"box", box},
                                             {"weight_density", student_t_json()},
                                             {"weight_exponent", 0.1},
                                             {"grid", 400},
                                             {"n_test", 2000}});
    t["lossvariants-2d"] = with(train_defaults(), {{"seed", 0},
                                                   {"density", student_t_json()},
                                                   {"lambda", grid[6]},
                                                   {"weight_exponent", 0.1},
                                                   {"box", box},
                                                   {"grid", 400},
                                                   {"n_test", 2000}});
    t["nodata-patch"] = {{"seed", 0},
                         {"heldout", ""},
                         {"patch", 16},
                         {"stride", 8},
                         {"losses", {"mse", "nlpd", "msssim"}},
                         {"centers", {{-1.0, 1.0}, {-2.0, -1.0, 0.0, 1.0, 2.0}}},
                         {"latent", 64},
                         {"hidden", {256}},
                         {"soft_scale", 1.0},
                         {"straight_through", true},
                         {"eval_quantizer", "hard"},
                         {"steps", 30000},
                         {"batch", 32},
                         {"lr", 1e-3},
                         {"checkpoint_every", 100},
                         {"precision", "f32"}};
    t["batch1-ratio"] = {{"seed", 0},
                         {"train", ""},
                         {"test", ""},
                         {"patch", 16},
                         {"stride", 8},
                         {"seeds", {0, 1, 2, 3, 4}},
                         {"steps", 1000},
                         {"latent", 32},
                         {"hidden", {128}},
                         {"lr", 1e-4},
                         {"n_test", 256}};
    t["scorematch-1d"] = {{"seed", 0},
                          {"density", Density1D::gaussian(0.0, 1.0).to_json()},
                          {"grid", 201},
                          {"range", 3.0},
                          {"eval_range", 2.0},
                          {"hidden", {32, 32}},
                          {"latent", 4},
                          {"input_noise", 0.5},
                          {"steps", 5000},
                          {"batch", 1024},
                          {"lr", 1e-3},
                          {"checkpoint_every", 500},
                          {"precision", "f64"}};
    return t;
  }();
  return table;
}

}  // namespace

const std::vector<std::string>& experiment_ids() {
  static const std::vector<std::string> ids = {"obs1-equalizer", "fig3-sweep",      "fig5-relperf", "nodata-2d",
                                               "nodata-patch",   "lossvariants-2d", "batch1-ratio", "scorematch-1d"};
  return ids;
}

json default_config(const std::string& id) {
  const auto& t = defaults_table();
  const auto it = t.find(id);
  if (it == t.end()) throw ConfigError("unknown experiment '" + id + "'");
  return it->second;
}

json resolve_config(const std::string& id, const json& config, const RunOptions& opt) {
  json out = default_config(id);
  if (!config.is_null()) {
    if (!config.is_object()) throw ConfigError("config must be a JSON object");
    for (auto it = config.begin(); it != config.end(); ++it) {
      if (it.key() == "experiment") {
        if (it.value() != id) throw ConfigError("config is for experiment " + it.value().dump());
        continue;
      }
      if (!out.contains(it.key())) throw ConfigError("unknown config key '" + it.key() + "' for " + id);
      out[it.key()] = it.value();
    }
  }
  if (opt.seed) out["seed"] = *opt.seed;
  if (opt.steps) {
    if (!out.contains("steps")) throw ConfigError(id + " has no step count to override");
    out["steps"] = *opt.steps;
  }
  return out;
}

// --- experiments ---------------------------------------------------------------------

namespace {

struct Context {
  std::string id;
  json cfg;
  const RunOptions& opt;
  RunResult result;

  std::uint64_t seed() const { return cfg.at("seed").get<std::uint64_t>(); }

  void write_csv(const std::string& name, const std::string& text) {
    const fs::path path = opt.out_dir / name;
    write_text(path, text);
    result.files.push_back(path);
  }

  void write_metadata() {
    json files = json::array();
    for (const auto& f : result.files) files.push_back(f.filename().string());
    const json meta = {{"experiment", id},
                       {"config", cfg},
                       {"config_hash", hex64(config_hash(cfg))},
                       {"seed", seed()},
                       {"version", kVersion},
                       {"outputs", files},
                       {"summary", result.summary},
                       {"failures", result.failures}};
    for (const auto& f : result.files) {
      fs::path m = f;
      m.replace_extension(".json");
      write_text(m, meta.dump(2) + "\n");
    }
  }
};

TrainConfig train_base(const json& c) {
  TrainConfig t;
  t.steps = c.at("steps").get<std::int64_t>();
  t.batch = c.at("batch").get<int>();
  t.lr = c.at("lr").get<double>();
  t.checkpoint_every = std::min<std::int64_t>(c.at("checkpoint_every").get<std::int64_t>(), t.steps);
  const auto prec = c.at("precision").get<std::string>();
  if (prec == "f32") t.precision = Precision::f32;
  else if (prec == "f64") t.precision = Precision::f64;
  else throw ConfigError("precision must be f32 or f64");
  return t;
}

std::uint64_t model_seed(std::uint64_t seed, double lambda) { return derive_seed(seed, "model:" + format_double(lambda)); }

Eigen::MatrixXd test_points(const Density& d, int n, std::uint64_t seed) {
  if (n < 3) throw ConfigError("n_test must be >= 3");
  Rng rng(derive_seed(seed, "test"));
  return sample(d, n, rng);
}

UniformBox2D box_from_json(const json& j) {
  UniformBox2D b;
  b.lo = j.at("lo").get<std::array<double, 2>>();
  b.hi = j.at("hi").get<std::array<double, 2>>();
  b.validate();
  return b;
}

std::vector<double> lambdas_from(const json& c) {
  auto l = c.at("lambdas").get<std::vector<double>>();
  if (l.empty()) throw ConfigError("lambdas must not be empty");
  for (double v : l)
    if (!(v > 0.0)) throw ConfigError("lambdas must be positive");
  return l;
}

double pdf_at(const Density& d, const Eigen::VectorXd& x) {
  return pdf(d, {x.data(), static_cast<std::size_t>(x.size())});
}

// obs1-equalizer ------------------------------------------------------------------

void run_obs1(Context& ctx) {
  const json& c = ctx.cfg;
  const Density dens = density_from_json(c.at("density"));
  const auto* st = std::get_if<StudentT2D>(&dens);
  std::vector<Density1D> base;
  if (st) {
    base = {st->marginal(0), st->marginal(1)};
  } else if (const auto* d1 = std::get_if<Density1D>(&dens)) {
    base = {*d1};
  } else {
    throw ConfigError("obs1-equalizer needs a factorized density (student_t_2d or 1D)");
  }
  SensitivityOptions so{c.at("delta").get<double>(), c.at("n_dirs").get<int>()};
  const int n = c.at("n_points").get<int>();
  const Eigen::MatrixXd pts = test_points(dens, n, ctx.seed());
  std::vector<double> p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = pdf_at(dens, pts.col(i));

  std::string summary_csv = "gamma,n_points,delta,n_dirs,rho_ratio,rho_jacobian\n";
  std::string points_csv = "gamma,index,pdf,ratio,jacobian\n";
  json rows = json::array();
  for (double gamma : c.at("gammas").get<std::vector<double>>()) {
    const Equalizer eq(base, gamma);
    Rng rng(derive_seed(ctx.seed(), "directions:" + format_double(gamma)));
    std::vector<double> ratio(p.size()), jac(p.size());
    for (int i = 0; i < n; ++i) {
      const Eigen::VectorXd x = pts.col(i);
      ratio[static_cast<std::size_t>(i)] = sensitivity_ratio(eq, x, so, rng);
      jac[static_cast<std::size_t>(i)] = eq.slope(x).prod();
      points_csv += format_double(gamma) + ',' + std::to_string(i) + ',' + format_double(p[static_cast<std::size_t>(i)]) +
                    ',' + format_double(ratio[static_cast<std::size_t>(i)]) + ',' +
                    format_double(jac[static_cast<std::size_t>(i)]) + '\n';
    }
    const double rr = spearman(ratio, p).rho;
    const double rj = spearman(jac, p).rho;
    summary_csv += format_double(gamma) + ',' + std::to_string(n) + ',' + format_double(so.delta) + ',' +
                   std::to_string(so.n_dirs) + ',' + format_double(rr) + ',' + format_double(rj) + '\n';
    rows.push_back({{"gamma", gamma}, {"rho_ratio", rr}, {"rho_jacobian", rj}});
  }
  ctx.result.summary["rows"] = rows;
  ctx.write_csv("obs1_equalizer.csv", summary_csv);
  ctx.write_csv("obs1_points.csv", points_csv);
}

// fig3-sweep ----------------------------------------------------------------------------

void run_fig3(Context& ctx) {
  const json& c = ctx.cfg;
  const Density dens = density_from_json(c.at("density"));
  const auto lambdas = lambdas_from(c);
  const TrainConfig base = [&] {
    TrainConfig t = train_base(c);
    t.data = dens;
    return t;
  }();
  const Eigen::MatrixXd pts = test_points(dens, c.at("n_test").get<int>(), ctx.seed());
  const SensitivityOptions so{c.at("delta").get<double>(), c.at("n_dirs").get<int>()};

  struct Slot {
    std::optional<TrainResult> trained;
    std::optional<SweepRow> row;
    std::string error;
    std::int64_t step = 0;
  };
  std::vector<Slot> slots(lambdas.size());
  fs::create_directories(ctx.opt.out_dir / "models");
  run_parallel(lambdas.size(), ctx.opt.jobs, [&](std::size_t i) {
    TrainConfig t = base;
    t.lambda = lambdas[i];
    t.seed = model_seed(ctx.seed(), lambdas[i]);
    try {
      slots[i].trained = train_cached(t, ctx.opt);
    } catch (const TrainingDiverged& e) {
      slots[i].error = e.what();
      slots[i].step = e.step();
      return;
    }
    const auto rep = correlation_sweep({{lambdas[i], slots[i].trained->model}}, pts, dens, ctx.seed(), so);
    slots[i].row = rep.rows.front();
    save_model((ctx.opt.out_dir / "models" / ("fig3_" + std::to_string(i) + ".json")).string(), slots[i].trained->model);
  });

  SweepReport report;
  std::string curves = "lambda,step,rate_bpp,distortion\n";
  json diags = json::array();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (!slots[i].row) {
      ctx.result.failures.push_back({{"lambda", lambdas[i]}, {"step", slots[i].step}, {"error", slots[i].error}});
      report.rows.push_back({lambdas[i], std::nan(""), {}, {}, {}, 0, ctx.seed(), {slots[i].error}});
      continue;
    }
    report.rows.push_back(*slots[i].row);
    for (const auto& p : slots[i].trained->curve)
      curves += format_double(lambdas[i]) + ',' + std::to_string(p.step) + ',' + format_double(p.rate_bpp) + ',' +
                format_double(p.distortion) + '\n';
  }
  std::string csv = "lambda,rate_bpp,rho_Ds,rho_Dr_sens,rho_Din_sens,n_points,seed\n";
  for (const auto& r : report.rows)
    csv += format_double(r.lambda) + ',' + (std::isnan(r.rate_bpp) ? std::string() : format_double(r.rate_bpp)) + ',' +
           opt_field(r.rho_ds) + ',' + opt_field(r.rho_dr_sens) + ',' + opt_field(r.rho_din_sens) + ',' +
           std::to_string(r.n_points) + ',' + std::to_string(r.seed) + '\n';
  ctx.result.summary["rows"] = report.to_json();
  ctx.result.summary["delta"] = so.delta;
  ctx.result.summary["n_dirs"] = so.n_dirs;
  ctx.write_csv("fig3_sweep.csv", csv);
  ctx.write_csv("fig3_curves.csv", curves);
}

// fig5-relperf --------------------------------------------------------------------------

void run_fig5(Context& ctx) {
  const json& c = ctx.cfg;
  const Density dens = density_from_json(c.at("density"));
  if (dimension(dens) != 2) throw ConfigError("fig5-relperf needs a 2D density");
  const auto lambdas = lambdas_from(c);
  const int n_probe = c.at("n_probe").get<int>();
  const double x_max = c.at("x_max").get<double>();
  const int degree = c.at("degree").get<int>();
  if (n_probe < degree + 1) throw ConfigError("n_probe must exceed the smoothing degree");
  TrainConfig base = train_base(c);
  base.data = dens;
  base.weight_exponent = c.at("weight_exponent").get<double>();

  Eigen::MatrixXd probe = Eigen::MatrixXd::Zero(2, n_probe);
  std::vector<double> xs(static_cast<std::size_t>(n_probe));
  for (int i = 0; i < n_probe; ++i) {
    xs[static_cast<std::size_t>(i)] = i == n_probe - 1 ? x_max : x_max * i / (n_probe - 1);
    probe(0, i) = xs[static_cast<std::size_t>(i)];
  }

  // index 2k: plain model for lambda k, 2k+1: weighted model
  std::vector<std::optional<TrainResult>> models(2 * lambdas.size());
  std::vector<std::string> errors(models.size());
  run_parallel(models.size(), ctx.opt.jobs, [&](std::size_t j) {
    TrainConfig t = base;
    t.lambda = lambdas[j / 2];
    t.seed = model_seed(ctx.seed(), t.lambda);
    t.variant = j % 2 == 0 ? LossVariant::plain : LossVariant::prob_weighted;
    if (t.variant == LossVariant::plain) t.weight_exponent = 0.1;  // unused; keeps the cache key shared with fig3
    try {
      models[j] = train_cached(t, ctx.opt);
    } catch (const TrainingDiverged& e) {
      errors[j] = e.what();
    }
  });

  std::string csv = "lambda,x,perf_plain,perf_weighted,ratio_raw,ratio_smooth\n";
  std::vector<Eigen::VectorXd> smooth_curves, raw_curves;
  for (std::size_t k = 0; k < lambdas.size(); ++k) {
    if (!models[2 * k] || !models[2 * k + 1]) {
      ctx.result.failures.push_back({{"lambda", lambdas[k]}, {"error", errors[2 * k] + errors[2 * k + 1]}});
      continue;
    }
    const auto plain = eval_points(models[2 * k]->model, probe, DistortionKind::sse);
    const auto weighted = eval_points(models[2 * k + 1]->model, probe, DistortionKind::sse);
    Eigen::VectorXd raw(n_probe);
    std::vector<double> pp(xs.size()), pw(xs.size());
    bool ok = true;
    for (int i = 0; i < n_probe; ++i) {
      const Performance a{plain[static_cast<std::size_t>(i)].distortion, plain[static_cast<std::size_t>(i)].rate_bpp};
      const Performance b{weighted[static_cast<std::size_t>(i)].distortion, weighted[static_cast<std::size_t>(i)].rate_bpp};
      pp[static_cast<std::size_t>(i)] = a.distortion / a.rate;
      pw[static_cast<std::size_t>(i)] = b.distortion / b.rate;
      try {
        raw[i] = relative_performance(b, a);
      } catch (const DomainError& e) {
        ctx.result.failures.push_back({{"lambda", lambdas[k]}, {"x", xs[static_cast<std::size_t>(i)]}, {"error", e.what()}});
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    const PolyFit fit(xs, {raw.data(), static_cast<std::size_t>(raw.size())}, degree);
    const Eigen::VectorXd sm = fit(xs);
    for (int i = 0; i < n_probe; ++i)
      csv += format_double(lambdas[k]) + ',' + format_double(xs[static_cast<std::size_t>(i)]) + ',' +
             format_double(pp[static_cast<std::size_t>(i)]) + ',' + format_double(pw[static_cast<std::size_t>(i)]) + ',' +
             format_double(raw[i]) + ',' + format_double(sm[i]) + '\n';
    raw_curves.push_back(raw);
    smooth_curves.push_back(sm);
  }
  std::string mean_csv = "x,mean_ratio_raw,mean_ratio_smooth\n";
  if (!smooth_curves.empty()) {
    Eigen::VectorXd mr = Eigen::VectorXd::Zero(n_probe), ms = Eigen::VectorXd::Zero(n_probe);
    for (std::size_t k = 0; k < smooth_curves.size(); ++k) {
      mr += raw_curves[k];
      ms += smooth_curves[k];
    }
    mr /= static_cast<double>(smooth_curves.size());
    ms /= static_cast<double>(smooth_curves.size());
    double tail = 0.0;
    int tail_n = 0;
    for (int i = 0; i < n_probe; ++i) {
      mean_csv += format_double(xs[static_cast<std::size_t>(i)]) + ',' + format_double(mr[i]) + ',' + format_double(ms[i]) + '\n';
      if (xs[static_cast<std::size_t>(i)] >= 25.0) {
        tail += ms[i];
        ++tail_n;
      }
    }
    ctx.result.summary["mean_smooth_at_0"] = ms[0];
    ctx.result.summary["mean_smooth_min"] = ms.minCoeff();
    if (tail_n) ctx.result.summary["mean_smooth_tail_25_35"] = tail / tail_n;
  }
  ctx.result.summary["models_used"] = smooth_curves.size();
  ctx.write_csv("fig5_relperf.csv", csv);
  ctx.write_csv("fig5_relperf_mean.csv", mean_csv);
}

// code-vector geometry --------------------------------------------------------------------

struct CodeCell {
  std::vector<long> q;
  Eigen::VectorXd code;
  long count = 0;
};

std::vector<CodeCell> code_cells(const CompressModel& m, const UniformBox2D& box, int grid) {
  if (grid < 1) throw ConfigError("grid must be >= 1");
  if (m.input_dim() != 2) throw ShapeError("code export needs a 2D model");
  std::map<std::vector<long>, long> counts;
  const double dx = (box.hi[0] - box.lo[0]) / grid, dy = (box.hi[1] - box.lo[1]) / grid;
  Eigen::MatrixXd row(2, grid);
  for (int r = 0; r < grid; ++r) {
    for (int cidx = 0; cidx < grid; ++cidx) {
      row(0, cidx) = box.lo[0] + (cidx + 0.5) * dx;
      row(1, cidx) = box.lo[1] + (r + 0.5) * dy;
    }
    const Eigen::MatrixXd y = encode_batch(m, row);
    for (int cidx = 0; cidx < grid; ++cidx) {
      std::vector<long> q(static_cast<std::size_t>(y.rows()));
      for (Eigen::Index d = 0; d < y.rows(); ++d) q[static_cast<std::size_t>(d)] = std::lround(y(d, cidx));
      ++counts[q];
    }
  }
  std::vector<CodeCell> cells;
  for (const auto& [q, n] : counts) {
    Eigen::VectorXd yq(static_cast<Eigen::Index>(q.size()));
    for (std::size_t d = 0; d < q.size(); ++d) yq[static_cast<Eigen::Index>(d)] = static_cast<double>(q[d]);
    cells.push_back({q, decode(m, yq), n});
  }
  return cells;
}

struct GeometrySummary {
  std::size_t n_codes;
  double mean_radius;
  double max_abs_y;
};

GeometrySummary summarize(const std::vector<CodeCell>& cells) {
  GeometrySummary s{cells.size(), 0.0, 0.0};
  for (const auto& c : cells) {
    s.mean_radius += c.code.norm();
    s.max_abs_y = std::max(s.max_abs_y, std::abs(c.code[1]));
  }
  if (!cells.empty()) s.mean_radius /= static_cast<double>(cells.size());
  return s;
}

std::string cells_csv_rows(const std::string& label, const std::vector<CodeCell>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    out += label + ',' + std::to_string(i) + ',' + std::to_string(cells[i].q.at(0)) + ',' +
           std::to_string(cells[i].q.size() > 1 ? cells[i].q[1] : 0) + ',' + format_double(cells[i].code[0]) + ',' +
           format_double(cells[i].code[1]) + ',' + std::to_string(cells[i].count) + '\n';
  }
  return out;
}

constexpr const char* kCellsHeader = "model,cell_id,q0,q1,code_x,code_y,count\n";
constexpr const char* kGeomHeader = "model,n_codes,mean_code_radius,max_abs_code_y,rate_bpp,sse\n";

std::string geometry_row(const std::string& label, const GeometrySummary& g, const RateDistortion& rd) {
  return label + ',' + std::to_string(g.n_codes) + ',' + format_double(g.mean_radius) + ',' +
         format_double(g.max_abs_y) + ',' + format_double(rd.rate_bpp) + ',' + format_double(rd.distortion) + '\n';
}

void run_lossvariants(Context& ctx) {
  const json& c = ctx.cfg;
  const Density dens = density_from_json(c.at("density"));
  const UniformBox2D box = box_from_json(c.at("box"));
  const int grid = c.at("grid").get<int>();
  TrainConfig base = train_base(c);
  base.data = dens;
  base.lambda = c.at("lambda").get<double>();
  base.seed = model_seed(ctx.seed(), base.lambda);
  base.weight_exponent = c.at("weight_exponent").get<double>();
  const std::vector<std::pair<std::string, LossVariant>> variants = {
      {"L1", LossVariant::plain}, {"L2", LossVariant::prob_weighted}, {"L3", LossVariant::inv_prob_weighted}};
  std::vector<std::optional<TrainResult>> trained(variants.size());
  run_parallel(variants.size(), ctx.opt.jobs, [&](std::size_t i) {
    TrainConfig t = base;
    t.variant = variants[i].second;
    if (t.variant == LossVariant::plain) t.weight_exponent = 0.1;
    trained[i] = train_cached(t, ctx.opt);
  });
  const Eigen::MatrixXd pts = test_points(dens, c.at("n_test").get<int>(), ctx.seed());
  std::string cells = kCellsHeader, geom = kGeomHeader;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto cc = code_cells(trained[i]->model, box, grid);
    const auto g = summarize(cc);
    const auto rd = eval_rate_distortion(trained[i]->model, pts, DistortionKind::sse);
    cells += cells_csv_rows(variants[i].first, cc);
    geom += geometry_row(variants[i].first, g, rd);
    ctx.result.summary[variants[i].first] = {
        {"n_codes", g.n_codes}, {"mean_code_radius", g.mean_radius}, {"rate_bpp", rd.rate_bpp}, {"sse", rd.distortion}};
  }
  ctx.write_csv("lossvariants_codes.csv", cells);
  ctx.write_csv("lossvariants_summary.csv", geom);
}

void run_nodata_2d(Context& ctx) {
  const json& c = ctx.cfg;
  const UniformBox2D box = box_from_json(c.at("box"));
  const Density wd = density_from_json(c.at("weight_density"));
  if (dimension(wd) != 2) throw ConfigError("weight_density must be 2D");
  const int grid = c.at("grid").get<int>();
  TrainConfig base = train_base(c);
  base.lambda = c.at("lambda").get<double>();
  base.seed = model_seed(ctx.seed(), base.lambda);
  base.weight_exponent = c.at("weight_exponent").get<double>();
  base.data = Density{box};

  std::vector<std::optional<TrainResult>> trained(2);
  run_parallel(2, ctx.opt.jobs, [&](std::size_t i) {
    if (i == 0) {
      TrainConfig t = base;
      t.variant = LossVariant::no_data_weighted;
      t.weight_density = wd;
      t.validate();
      trained[0] = train_cached(t, ctx.opt);
    } else {
      trained[1] = train_cached(base, ctx.opt);
    }
  });
  const Eigen::MatrixXd pts = test_points(wd, c.at("n_test").get<int>(), ctx.seed());
  std::string cells = kCellsHeader, geom = kGeomHeader;
  const char* labels[2] = {"weighted_uniform", "plain_uniform"};
  for (int i = 0; i < 2; ++i) {
    const auto cc = code_cells(trained[static_cast<std::size_t>(i)]->model, box, grid);
    const auto g = summarize(cc);
    const auto rd = eval_rate_distortion(trained[static_cast<std::size_t>(i)]->model, pts, DistortionKind::sse);
    cells += cells_csv_rows(labels[i], cc);
    geom += geometry_row(labels[i], g, rd);
    ctx.result.summary[labels[i]] = {{"n_codes", g.n_codes}, {"max_abs_code_y", g.max_abs_y}, {"rate_bpp", rd.rate_bpp}};
  }
  ctx.write_csv("nodata2d_codes.csv", cells);
  ctx.write_csv("nodata2d_summary.csv", geom);
}

// patch experiments ----------------------------------------------------------------------

fs::path require_dir(const json& c, const std::string& key) {
  const auto p = c.at(key).get<std::string>();
  if (p.empty()) throw ConfigError("'" + key + "' must name a directory of .pgm images");
  if (!fs::is_directory(p)) throw ConfigError("'" + key + "' is not a directory: " + p);
  return p;
}

std::uint64_t batch_hash(const Eigen::MatrixXd& x) {
  std::uint64_t h = 14695981039346656037ull;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(x.data()[i]);
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

Eigen::MatrixXd patch_matrix(const std::vector<Patch>& patches) {
  const int dim = patches.front().height() * patches.front().width();
  Eigen::MatrixXd m(dim, static_cast<Eigen::Index>(patches.size()));
  for (std::size_t i = 0; i < patches.size(); ++i) {
    const auto v = patches[i].row_major();
    for (int d = 0; d < dim; ++d) m(d, static_cast<Eigen::Index>(i)) = v[static_cast<std::size_t>(d)];
  }
  return m;
}

void run_nodata_patch(Context& ctx) {
  const json& c = ctx.cfg;
  const fs::path dir = require_dir(c, "heldout");
  const int ps = c.at("patch").get<int>();
  const auto patches = load_patch_corpus(dir, ps, c.at("stride").get<int>());
  const int latent = c.at("latent").get<int>();
  const auto losses = c.at("losses").get<std::vector<std::string>>();
  const auto center_sets = c.at("centers").get<std::vector<std::vector<double>>>();
  const std::string eval_q = c.at("eval_quantizer").get<std::string>();
  if (eval_q != "soft" && eval_q != "hard") throw ConfigError("nodata-patch: eval_quantizer must be soft or hard");
  const double soft_scale = c.at("soft_scale").get<double>();

  struct Job {
    DistortionKind loss;
    std::vector<double> centers;
  };
  std::vector<Job> jobs;
  for (const auto& centers : center_sets)
    for (const auto& l : losses) jobs.push_back({distortion_from_string(l), centers});
  std::vector<std::optional<TrainResult>> trained(jobs.size());
  run_parallel(jobs.size(), ctx.opt.jobs, [&](std::size_t i) {
    TrainConfig t = train_base({{"steps", c.at("steps")},
                                {"batch", c.at("batch")},
                                {"lr", c.at("lr")},
                                {"checkpoint_every", c.at("checkpoint_every")},
                                {"precision", c.at("precision")}});
    t.data = UniformNoisePatches{ps, ps};
    t.distortion = jobs[i].loss;
    t.lambda = 1.0;
    t.latent_dim = latent;
    t.encoder_hidden = c.at("hidden").get<std::vector<int>>();
    t.decoder_hidden = t.encoder_hidden;
    t.quantizer = QuantizerMode::soft(jobs[i].centers, c.at("soft_scale").get<double>());
    t.straight_through = c.at("straight_through").get<bool>();
    t.seed = derive_seed(ctx.seed(), "patch:" + to_string(jobs[i].loss) + ":" + std::to_string(jobs[i].centers.size()));
    trained[i] = train_cached(t, ctx.opt);
  });

  const Eigen::MatrixXd x = patch_matrix(patches);
  std::string csv = "loss,num_centers,bound_bpp,psnr,msssim,nlpd\n";
  json rows = json::array();
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const CompressModel& m = trained[i]->model;
    Eigen::MatrixXd xh;
    if (eval_q == "hard") {
      xh = reconstruct_batch(m, x);
    } else {
      // same relaxed quantizer the model was trained through
      Eigen::MatrixXd y = encode_batch(m, x);
      y = y.unaryExpr([&](double v) { return soft_quantize(jobs[i].centers, soft_scale, v); });
      xh.resize(x.rows(), x.cols());
      for (Eigen::Index k = 0; k < y.cols(); ++k) xh.col(k) = decode(m, y.col(k));
    }
    double psnr_sum = 0.0, ms_sum = 0.0, nl_sum = 0.0;
    for (Eigen::Index k = 0; k < x.cols(); ++k) {
      const Patch a = Patch::from_row_major(ps, ps, {x.col(k).data(), static_cast<std::size_t>(x.rows())});
      const Eigen::VectorXd col = xh.col(k);
      const Patch b = Patch::from_row_major(ps, ps, {col.data(), static_cast<std::size_t>(col.size())});
      const double p = psnr(a, b);
      psnr_sum += std::isinf(p) ? 100.0 : p;
      ms_sum += msssim(a, b);
      nl_sum += nlpd(a, b);
    }
    const double n = static_cast<double>(x.cols());
    // latent codes are m fixed-alphabet symbols per patch
    const double bpp = latent * std::log2(static_cast<double>(jobs[i].centers.size())) / (static_cast<double>(ps) * ps);
    const std::string loss = to_string(jobs[i].loss);
    csv += loss + ',' + std::to_string(jobs[i].centers.size()) + ',' + format_double(bpp) + ',' +
           format_double(psnr_sum / n) + ',' + format_double(ms_sum / n) + ',' + format_double(nl_sum / n) + '\n';
    rows.push_back({{"loss", loss},
                    {"num_centers", jobs[i].centers.size()},
                    {"bound_bpp", bpp},
                    {"psnr", psnr_sum / n},
                    {"msssim", ms_sum / n},
                    {"nlpd", nl_sum / n}});
  }
  ctx.result.summary["rows"] = rows;
  ctx.result.summary["heldout_patches"] = x.cols();
  ctx.result.summary["eval_quantizer"] = eval_q;
  ctx.write_csv("nodata_patch.csv", csv);
}

void run_batch1(Context& ctx) {
  const json& c = ctx.cfg;
  const int ps = c.at("patch").get<int>();
  const int stride = c.at("stride").get<int>();
  const auto train_set = load_patch_corpus(require_dir(c, "train"), ps, stride);
  const auto test_all = load_patch_corpus(require_dir(c, "test"), ps, stride);
  const int n_test = std::min<int>(c.at("n_test").get<int>(), static_cast<int>(test_all.size()));
  if (n_test < 1) throw ConfigError("n_test must be >= 1");
  std::vector<Patch> test_set;
  for (int i = 0; i < n_test; ++i)
    test_set.push_back(test_all[static_cast<std::size_t>(i) * test_all.size() / static_cast<std::size_t>(n_test)]);
  const Eigen::MatrixXd xt = patch_matrix(test_set);
  const auto seeds = c.at("seeds").get<std::vector<std::uint64_t>>();
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  const std::int64_t steps = c.at("steps").get<std::int64_t>();
  if (steps < 1) throw ConfigError("steps must be >= 1");

  // runs[2s] trained with MSE, runs[2s+1] with NLPD
  struct Trace {
    std::vector<double> test_mse;
    std::vector<std::uint64_t> hashes;
  };
  std::vector<Trace> runs(2 * seeds.size());
  run_parallel(runs.size(), ctx.opt.jobs, [&](std::size_t j) {
    TrainConfig t;
    t.data = PatchSet{train_set, false};
    t.distortion = j % 2 == 0 ? DistortionKind::mse : DistortionKind::nlpd;
    t.batch = 1;
    t.steps = steps;
    t.lr = c.at("lr").get<double>();
    t.lambda = 1.0;
    t.latent_dim = c.at("latent").get<int>();
    t.encoder_hidden = c.at("hidden").get<std::vector<int>>();
    t.decoder_hidden = t.encoder_hidden;
    t.quantizer = QuantizerMode::identity();
    t.checkpoint_every = steps;
    t.precision = Precision::f64;
    t.seed = seeds[j / 2];
    Rng rng(t.seed);
    CompressModel init = make_model(t.input_dim(), t.encoder_hidden, t.latent_dim, t.decoder_hidden, t.quantizer, rng);
    Trace& tr = runs[j];
    tr.test_mse.reserve(static_cast<std::size_t>(steps));
    tr.hashes.reserve(static_cast<std::size_t>(steps));
    train(t, std::move(init), rng, [&](std::int64_t, const Eigen::MatrixXd& batch, const std::function<CompressModel()>& snap) {
      tr.hashes.push_back(batch_hash(batch));
      const Eigen::MatrixXd xh = reconstruct_batch(snap(), xt);
      tr.test_mse.push_back((xh - xt).squaredNorm() / static_cast<double>(xt.size()));
    });
  });

  std::string csv = "step";
  for (auto s : seeds) csv += ",ratio_seed" + std::to_string(s);
  csv += ",mean,std\n";
  std::string order = "seed,step,hash_mse,hash_nlpd\n";
  bool same_order = true;
  double final_mean = 0.0;
  for (std::int64_t st = 0; st < steps; ++st) {
    csv += std::to_string(st + 1);
    std::vector<double> r;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      const double v = runs[2 * s + 1].test_mse[static_cast<std::size_t>(st)] / runs[2 * s].test_mse[static_cast<std::size_t>(st)];
      r.push_back(v);
      csv += ',' + format_double(v);
    }
    const double mean = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var = r.size() > 1 ? var / static_cast<double>(r.size() - 1) : 0.0;
    csv += ',' + format_double(mean) + ',' + format_double(std::sqrt(var)) + '\n';
    final_mean = mean;
  }
  for (std::size_t s = 0; s < seeds.size(); ++s)
    for (std::int64_t st = 0; st < steps; ++st) {
      const auto a = runs[2 * s].hashes[static_cast<std::size_t>(st)];
      const auto b = runs[2 * s + 1].hashes[static_cast<std::size_t>(st)];
      same_order = same_order && a == b;
      order += std::to_string(seeds[s]) + ',' + std::to_string(st + 1) + ',' + hex64(a) + ',' + hex64(b) + '\n';
    }
  ctx.result.summary["identical_order"] = same_order;
  ctx.result.summary["final_mean_ratio"] = final_mean;
  ctx.result.summary["test_patches"] = n_test;
  ctx.write_csv("batch1_ratio.csv", csv);
  ctx.write_csv("batch1_order.csv", order);
}

// scorematch-1d ------------------------------------------------------------------------------

void run_scorematch(Context& ctx) {
  const json& c = ctx.cfg;
  const Density1D d = Density1D::from_json(c.at("density"));
  const int n = c.at("grid").get<int>();
  if (n < 3) throw ConfigError("grid must be >= 3");
  const double scale = d.kind() == Density1D::Kind::uniform ? 0.5 * (d.hi() - d.lo()) : d.sigma();
  const double range = c.at("range").get<double>() * scale;
  const double eval_range = c.at("eval_range").get<double>() * scale;
  const double centre = d.median();

  TrainConfig t = train_base(c);
  t.data = Density{d};
  t.distortion = DistortionKind::sse;
  t.lambda = 1.0;
  t.latent_dim = c.at("latent").get<int>();
  t.encoder_hidden = c.at("hidden").get<std::vector<int>>();
  t.decoder_hidden = t.encoder_hidden;
  t.quantizer = QuantizerMode::identity();
  t.input_noise = c.at("input_noise").get<double>() * scale;
  t.seed = derive_seed(ctx.seed(), "scorematch");
  const TrainResult tr = train_cached(t, ctx.opt);

  std::string csv = "x,pdf,score,abs_score,inv_pdf,d_self\n";
  std::vector<double> abs_score, inv_pdf, ds_c, inv_c;
  for (int i = 0; i < n; ++i) {
    // symmetric about the centre so mirrored points get identical values
    const double x = centre + range * (2 * i - (n - 1)) / (n - 1);
    const double p = d.pdf(x);
    double s = std::nan("");
    try {
      s = d.score(x);
    } catch (const DomainError&) {
    }
    const double dself = d_self(tr.model, Eigen::VectorXd::Constant(1, x));
    csv += format_double(x) + ',' + format_double(p) + ',' + format_double(s) + ',' + format_double(std::abs(s)) + ',' +
           format_double(1.0 / p) + ',' + format_double(dself) + '\n';
    if (std::isfinite(s) && p > 0.0) {
      abs_score.push_back(std::abs(s));
      inv_pdf.push_back(1.0 / p);
    }
    if (std::abs(x - centre) <= eval_range + 1e-12 && p > 0.0) {
      ds_c.push_back(dself);
      inv_c.push_back(1.0 / p);
    }
  }
  const auto corr = [&](const std::vector<double>& a, const std::vector<double>& b, const char* name) -> json {
    try {
      return spearman(a, b).rho;
    } catch (const Error& e) {
      ctx.result.failures.push_back({{"correlation", name}, {"error", e.what()}});
      return nullptr;
    }
  };
  ctx.result.summary["rho_abs_score_inv_pdf"] = corr(abs_score, inv_pdf, "abs_score");
  ctx.result.summary["rho_d_self_inv_pdf_central"] = corr(ds_c, inv_c, "d_self");
  ctx.write_csv("scorematch_1d.csv", csv);
  ctx.write_csv("scorematch_1d_curve.csv", curve_csv(tr.curve));
}

}  // namespace

RunResult run_experiment(const std::string& id, const json& config, const RunOptions& opt) {
  static const std::map<std::string, void (*)(Context&)> table = {
      {"obs1-equalizer", run_obs1},   {"fig3-sweep", run_fig3},           {"fig5-relperf", run_fig5},
      {"nodata-2d", run_nodata_2d},   {"nodata-patch", run_nodata_patch}, {"lossvariants-2d", run_lossvariants},
      {"batch1-ratio", run_batch1},   {"scorematch-1d", run_scorematch}};
  const auto it = table.find(id);
  if (it == table.end()) throw ConfigError("unknown experiment '" + id + "'");
  if (opt.out_dir.empty()) throw ConfigError("output directory not set");
  Context ctx{id, {}, opt, {}};
  try {
    ctx.cfg = resolve_config(id, config, opt);
    fs::create_directories(opt.out_dir);
    it->second(ctx);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  ctx.write_metadata();
  return ctx.result;
}

}  // namespace pplab
