#pragma once

// Artifact layout of a run directory:
//   manifest.json                    written before training, updated at the end
//   result_<key>_s<seed>.json        one per (experiment, seed)
//   metrics.csv                      per-group test accuracy of every job
//   aggregate.csv                    mean / std across seeds per experiment
//   curves_<key>_<seed>.csv          final-phase learning curve (long format)
//   summary_<key>.csv                val avg / wg per epoch, mean across seeds

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "crois/config.hpp"

namespace crois {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRecipeFailed = 1;
inline constexpr int kExitConfigError = 2;

struct RunOptions {
  /// Parent of the generated run directory.
  std::filesystem::path out_root = "runs";
  unsigned jobs = 1;
  bool dry_run = false;
};

/// CROIS_OUT if set, else "runs".
std::filesystem::path default_output_root();

struct JobStatus {
  std::string key;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::string result_file;
};

struct RunReport {
  int exit_code = kExitOk;
  /// Empty for dry runs.
  std::filesystem::path run_dir;
  std::vector<JobStatus> jobs;
};

/// Executes every (experiment, seed) job of an already parsed config.
/// Failing jobs are recorded and do not stop the others.
RunReport run(const ParsedConfig& parsed, const std::filesystem::path& config_path, const RunOptions& options,
              std::ostream& log);

/// Parses and runs; config errors give kExitConfigError.
RunReport run_config_file(const std::filesystem::path& config_path, const RunOptions& options, std::ostream& log);

/// Rewrites the curve CSVs of a run directory from its result files.
/// Returns the files written.
std::vector<std::filesystem::path> export_curves(const std::filesystem::path& run_dir);

/// Writes one synthetic split as an embedding CSV.
void generate_data(const std::filesystem::path& spec_path, const std::filesystem::path& out_csv);

EpochRecord epoch_record_from_json(const nlohmann::json& j);

}  // namespace crois
