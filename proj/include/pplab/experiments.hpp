#pragma once

// Experiment drivers behind the pplab command line. Each experiment takes a
// JSON config (merged over its defaults), writes CSV files plus a sibling
// .json metadata record into the output directory, and is deterministic for a
// given resolved config.

#include "json.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pplab/compress.hpp"

namespace pplab {

inline constexpr const char* kVersion = "0.1.0";

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  int jobs = 1;
  /// Trained models are stored here keyed by the hash of their training
  /// config and reused when the same config comes up again.
  std::optional<std::filesystem::path> cache_dir;
  std::ostream* log = nullptr;
};

struct RunResult {
  std::vector<std::filesystem::path> files;
  nlohmann::json summary = nlohmann::json::object();
  nlohmann::json failures = nlohmann::json::array();
};

const std::vector<std::string>& experiment_ids();

/// Defaults for an experiment; ConfigError for unknown ids.
nlohmann::json default_config(const std::string& id);

/// Defaults merged with `config` and the seed/steps overrides. Unknown keys
/// are rejected.
nlohmann::json resolve_config(const std::string& id, const nlohmann::json& config, const RunOptions& opt);

RunResult run_experiment(const std::string& id, const nlohmann::json& config, const RunOptions& opt);

/// 64-bit FNV-1a of the compact JSON dump (object keys are sorted).
std::uint64_t config_hash(const nlohmann::json& j);
std::string hex64(std::uint64_t v);
/// Child seed for a named sub-stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

/// Shortest round-trip decimal form; "inf"/"-inf"/"nan" for non-finite values.
std::string format_double(double v);

/// Training with the on-disk cache from `opt` (if any).
TrainResult train_cached(const TrainConfig& cfg, const RunOptions& opt, const std::string& data_tag = {});

/// step,rate_bpp,distortion
std::string curve_csv(const std::vector<CurvePoint>& curve);

}  // namespace pplab
