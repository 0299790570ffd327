#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "pplab/errors.hpp"
#include "pplab/experiments.hpp"

namespace {

nlohmann::json read_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw pplab::ConfigError("cannot open config file " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw pplab::ConfigError("config " + path + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Induced-distance and rate-distortion experiments"};
  app.set_version_flag("--version", std::string(pplab::kVersion));

  std::string experiment, config_path, out_dir, cache_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  int jobs = 1;
  bool quiet = false, print_defaults = false;

  std::string ids;
  for (const auto& id : pplab::experiment_ids()) ids += (ids.empty() ? "" : ", ") + id;
  app.add_option("experiment", experiment, "Experiment id: " + ids)->required();
  app.add_option("--config", config_path, "JSON config merged over the experiment defaults");
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--steps", steps, "Override the training step count")->check(CLI::PositiveNumber);
  app.add_option("--jobs", jobs, "Concurrent training jobs")->check(CLI::PositiveNumber);
  app.add_option("--cache", cache_dir, "Reuse trained models stored in this directory");
  app.add_flag("--quiet", quiet, "No progress log on stderr");
  app.add_flag("--print-defaults", print_defaults, "Print the default config and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (print_defaults) {
      std::cout << pplab::default_config(experiment).dump(2) << '\n';
      return 0;
    }
    if (out_dir.empty()) throw pplab::ConfigError("--out is required");
    pplab::RunOptions opt;
    opt.out_dir = out_dir;
    opt.seed = seed;
    opt.steps = steps;
    opt.jobs = jobs;
    if (!cache_dir.empty()) opt.cache_dir = cache_dir;
    if (!quiet) opt.log = &std::cerr;
    const auto result = pplab::run_experiment(experiment, read_config(config_path), opt);
    for (const auto& f : result.files) std::cout << f.string() << '\n';
    if (!result.failures.empty()) std::cerr << "failures: " << result.failures.dump() << '\n';
    return 0;
  } catch (const pplab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const pplab::TrainingDiverged& e) {
    std::cerr << "training diverged: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
