// crois: config-driven experiment runner.
//
//   crois run <config> [--out DIR] [--jobs N] [--dry-run]
//   crois export-curves <run-dir>
//   crois gen-data <spec> --out file.csv
//
// Exit codes: 0 success, 1 a recipe failed, 2 config error.

#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "crois/errors.hpp"
#include "crois/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Group-robust training experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  unsigned jobs = 1;
  bool dry_run = false;
  auto* run = app.add_subcommand("run", "run the experiments of a config file");
  run->add_option("config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "output root (default: $CROIS_OUT or ./runs)");
  run->add_option("--jobs,-j", jobs, "parallel jobs (0: hardware threads)")->check(CLI::NonNegativeNumber);
  run->add_flag("--dry-run", dry_run, "print resolved configs and exit");

  std::string run_dir;
  auto* curves = app.add_subcommand("export-curves", "rewrite learning-curve CSVs of a run directory");
  curves->add_option("run_dir", run_dir, "run directory")->required();

  std::string spec_path;
  std::string csv_path;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic split as CSV");
  gen->add_option("spec", spec_path, "generator spec (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", csv_path, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : crois::kExitConfigError;
  }

  try {
    if (*run) {
      crois::RunOptions options;
      options.out_root = out_dir.empty() ? crois::default_output_root() : std::filesystem::path(out_dir);
      options.jobs = jobs == 0 ? std::max(1u, std::thread::hardware_concurrency()) : jobs;
      options.dry_run = dry_run;
      const auto report = crois::run_config_file(config_path, options, std::cout);
      if (!report.run_dir.empty()) std::cout << "run directory: " << report.run_dir.string() << '\n';
      return report.exit_code;
    }
    if (*curves) {
      for (const auto& f : crois::export_curves(run_dir)) std::cout << f.string() << '\n';
      return crois::kExitOk;
    }
    crois::generate_data(spec_path, csv_path);
    return crois::kExitOk;
  } catch (const crois::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return crois::kExitConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return crois::kExitRecipeFailed;
  }
}
