#pragma once

// Experiment documents (JSON). A document holds one experiment, or a "runs"
// list of experiments sharing the top-level keys. Minimal form:
//
//   {"recipe": "crois", "dataset": "synthetic", "p": 0.3}
//
// Keys (defaults in brackets):
//   recipe          required; erm, gdro_full, crois, ncrt, crois_val_only,
//                   crois_reduced_val, jtt_lite
//   dataset         required; "synthetic", {"synthetic": {...}} or
//                   {"csv": {"train": path, "val": path, "test": path, ...}}
//   p [0.3]  retrain [gdro]  retrain_scope [head_only; full for gdro_full
//   and jtt_lite]  hidden [[64, 32]]  val_fraction [1]  weighting [auto]
//   stratify [false]  jtt_epochs [1 for jtt_lite]  jtt_hidden  rescale_taus
//   lr [1e-4]  l2 [1e-4]  momentum [0.9]  batch_size [32]  epochs [10]
//   eta_q [0.01]  adjustment [0]  eval_every [1]
//                   training keys at the top level apply to both phases;
//                   "phase1" / "phase2" blocks override per phase
//   seeds [1]       a count (derived from seed) or an explicit list
//   seed [0]        global seed
//   sweep           {"key.path": [values...]}, Cartesian product
//   runs            list of per-experiment overrides

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "crois/data.hpp"
#include "crois/pipeline.hpp"

namespace crois {

inline constexpr const char* kEngineVersion = "1.0.0";

struct DatasetSource {
  enum class Kind { synthetic, csv };
  Kind kind = Kind::synthetic;
  SyntheticSplitsSpec synthetic;
  std::filesystem::path train_csv;
  std::filesystem::path val_csv;
  std::filesystem::path test_csv;
  CsvLoadOptions csv_options;
  bool skewed_eval = false;
};

nlohmann::json to_json(const DatasetSource& d);
DatasetSplits load_dataset(const DatasetSource& d);

struct ExperimentSpec {
  /// "<recipe>-p<p>-<hash8>": names output files.
  std::string key;
  /// FNV-1a of the resolved document.
  std::string hash;
  /// Position in the "runs" list; seeds derive from it.
  std::size_t run_index = 0;
  RecipeConfig recipe;
  DatasetSource dataset;
  /// Every default made explicit.
  nlohmann::json resolved;
};

struct ParsedConfig {
  std::uint64_t global_seed = 0;
  std::vector<ExperimentSpec> experiments;
};

/// Throws ConfigError (unknown key, type mismatch, missing required key) or
/// RangeError (value out of range). Relative CSV paths resolve against
/// `base_dir`.
ParsedConfig parse_config(const nlohmann::json& document, const std::filesystem::path& base_dir = {});
ParsedConfig parse_config(const std::filesystem::path& path);

/// Synthetic generator settings as used by `gen-data`; accepts the keys of a
/// synthetic dataset block plus "split" (train, val, test).
struct GenDataSpec {
  SyntheticSplitsSpec splits;
  std::string split = "train";
};
GenDataSpec parse_gen_data_spec(const nlohmann::json& document);

struct RunManifest {
  std::filesystem::path config_path;
  std::filesystem::path output_dir;
  std::string timestamp;
  std::string engine_version = kEngineVersion;
  std::uint64_t global_seed = 0;
  std::vector<ExperimentSpec> experiments;
};

nlohmann::json to_json(const RunManifest& m);

std::string fnv1a_hex(const std::string& text);

}  // namespace crois
