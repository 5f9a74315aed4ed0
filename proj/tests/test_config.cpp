#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include "crois/errors.hpp"
#include "crois/runner.hpp"

using namespace crois;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("crois_test_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

fs::path write_file(const fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
  return path;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_files(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.is_regular_file() ? 1 : 0;
  return n;
}

// Small enough to run in well under a second per job.
json tiny_config() {
  return json::parse(R"({
    "recipe": "crois", "p": 0.3,
    "dataset": {"synthetic": {"n": 200, "majority_fraction": 0.8, "n_val": 80, "n_test": 80, "noise_dims": 2}},
    "hidden": [8], "lr": 0.01, "epochs": 3, "batch_size": 16
  })");
}

std::string error_message(const json& doc) {
  try {
    parse_config(doc);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("minimal config resolves documented defaults") {
  const auto parsed = parse_config(json::parse(R"({"recipe": "crois", "dataset": "synthetic", "p": 0.3})"));
  REQUIRE(parsed.experiments.size() == 1);
  const auto& e = parsed.experiments[0];
  CHECK(e.recipe.phase1.lr == 1e-4);
  CHECK(e.recipe.phase1.l2 == 1e-4);
  CHECK(e.recipe.phase2.lr == 1e-4);
  CHECK(e.recipe.phase2.momentum == 0.9);
  CHECK(e.recipe.phase2.gdro_step_size == 0.01);
  CHECK(e.recipe.retrain_scope == UpdateScope::head_only);
  CHECK(e.recipe.seeds.size() == 1);
  CHECK(e.resolved.contains("phase1"));
  CHECK(e.key.rfind("crois-p0.3-", 0) == 0);
  CHECK(e.key.size() == std::string("crois-p0.3-").size() + 8);

  // The same document hashes the same; a changed value changes the hash.
  const auto again = parse_config(json::parse(R"({"recipe": "crois", "dataset": "synthetic", "p": 0.3})"));
  CHECK(again.experiments[0].hash == e.hash);
  const auto other = parse_config(json::parse(R"({"recipe": "crois", "dataset": "synthetic", "p": 0.4})"));
  CHECK(other.experiments[0].hash != e.hash);

  const auto gdro = parse_config(json::parse(R"({"recipe": "gdro_full", "dataset": "synthetic"})"));
  CHECK(gdro.experiments[0].recipe.retrain_scope == UpdateScope::full);
}

TEST_CASE("config validation errors") {
  CHECK_THROWS_AS(parse_config(json::parse(R"({"recipe": "crois", "dataset": "synthetic", "p": 1.5})")), RangeError);

  const std::string unknown = error_message(json::parse(R"({"recipe": "crois", "dataset": "synthetic", "lrate": 1})"));
  CHECK(unknown.find("lrate") != std::string::npos);

  const std::string nested =
      error_message(json::parse(R"({"recipe": "crois", "dataset": "synthetic", "phase2": {"lr": "fast"}})"));
  CHECK(nested.find("phase2.lr") != std::string::npos);
  CHECK(nested.find("number") != std::string::npos);

  const std::string missing = error_message(json::parse(R"({"dataset": "synthetic"})"));
  CHECK(missing.find("recipe") != std::string::npos);
  CHECK(missing.find("crois_val_only") != std::string::npos);

  const std::string bad_recipe = error_message(json::parse(R"({"recipe": "dro", "dataset": "synthetic"})"));
  CHECK(bad_recipe.find("dro") != std::string::npos);

  TempDir dir;
  const auto broken = write_file(dir.path / "broken.json", "{\"recipe\": ");
  CHECK_THROWS_AS(parse_config(broken), ConfigError);
}

TEST_CASE("sweeps, runs lists, and seeds") {
  auto doc = tiny_config();
  doc["sweep"] = json::parse(R"({"phase2.l2": [0, 0.001, 0.01, 0.1]})");
  const auto sweep = parse_config(doc);
  REQUIRE(sweep.experiments.size() == 4);
  CHECK(sweep.experiments[2].recipe.phase2.l2 == 0.01);
  CHECK(sweep.experiments[2].recipe.phase1.l2 == 1e-4);
  CHECK(sweep.experiments[0].hash != sweep.experiments[1].hash);
  // Sweep points share seeds so that they differ only in the swept value.
  CHECK(sweep.experiments[0].recipe.seeds == sweep.experiments[3].recipe.seeds);

  auto two = tiny_config();
  two["sweep"] = json::parse(R"({"p": [0.1, 0.5], "phase2.l2": [0, 1]})");
  CHECK(parse_config(two).experiments.size() == 4);

  auto runs = tiny_config();
  runs["seeds"] = 3;
  runs["runs"] = json::parse(R"([{"recipe": "erm"}, {"p": 0.5}])");
  const auto listed = parse_config(runs);
  REQUIRE(listed.experiments.size() == 2);
  CHECK(listed.experiments[0].recipe.recipe == Recipe::erm);
  CHECK(listed.experiments[1].recipe.p == 0.5);
  CHECK(listed.experiments[0].recipe.seeds.size() == 3);
  CHECK(listed.experiments[0].recipe.seeds != listed.experiments[1].recipe.seeds);

  auto explicit_seeds = tiny_config();
  explicit_seeds["seeds"] = json::array({7, 9});
  CHECK(parse_config(explicit_seeds).experiments[0].recipe.seeds == std::vector<std::uint64_t>{7, 9});
}

TEST_CASE("dry run trains nothing and writes nothing") {
  TempDir dir;
  const auto cfg = write_file(dir.path / "cfg.json", tiny_config().dump());
  RunOptions opts;
  opts.out_root = dir.path / "out";
  opts.dry_run = true;
  std::ostringstream log;
  const auto before = training_invocations();
  const auto report = run_config_file(cfg, opts, log);
  CHECK(report.exit_code == kExitOk);
  CHECK(training_invocations() == before);
  CHECK_FALSE(fs::exists(opts.out_root));
  CHECK(log.str().find("crois") != std::string::npos);
}

TEST_CASE("an empty runs list gives a manifest and no results") {
  TempDir dir;
  auto doc = tiny_config();
  doc["runs"] = json::array();
  const auto cfg = write_file(dir.path / "cfg.json", doc.dump());
  RunOptions opts;
  opts.out_root = dir.path / "out";
  std::ostringstream log;
  const auto report = run_config_file(cfg, opts, log);
  CHECK(report.exit_code == kExitOk);
  REQUIRE(fs::exists(report.run_dir / "manifest.json"));
  const auto manifest = json::parse(read_file(report.run_dir / "manifest.json"));
  CHECK(manifest["experiments"].empty());
  CHECK(manifest["engine_version"] == kEngineVersion);
  for (const auto& e : fs::directory_iterator(report.run_dir))
    CHECK(e.path().filename().string().rfind("result_", 0) != 0);
}

TEST_CASE("a two-seed run writes results, aggregates, and curves") {
  TempDir dir;
  auto doc = tiny_config();
  doc["seeds"] = 2;
  const auto cfg = write_file(dir.path / "cfg.json", doc.dump());
  RunOptions opts;
  opts.out_root = dir.path / "out";
  std::ostringstream log;
  const auto report = run_config_file(cfg, opts, log);
  INFO(log.str());
  REQUIRE(report.exit_code == kExitOk);
  REQUIRE(report.jobs.size() == 2);

  std::size_t results = 0;
  for (const auto& e : fs::directory_iterator(report.run_dir))
    results += e.path().filename().string().rfind("result_", 0) == 0 ? 1 : 0;
  CHECK(results == 2);

  const std::string aggregate = read_file(report.run_dir / "aggregate.csv");
  CHECK(std::count(aggregate.begin(), aggregate.end(), '\n') == 2);  // header + one experiment
  const auto manifest = json::parse(read_file(report.run_dir / "manifest.json"));
  CHECK(manifest["status"] == "finished");

  // Re-exporting curves reproduces the same bytes.
  std::vector<std::pair<fs::path, std::string>> first;
  for (const auto& f : export_curves(report.run_dir)) first.emplace_back(f, read_file(f));
  CHECK(first.size() == 3);  // two curve files and one summary
  const auto again = export_curves(report.run_dir);
  REQUIRE(again.size() == first.size());
  for (const auto& [f, text] : first) CHECK(read_file(f) == text);

  // A second run of the same config gets a distinct directory.
  const auto second = run_config_file(cfg, opts, log);
  CHECK(second.run_dir != report.run_dir);

  // Parallel jobs give the same result documents.
  opts.jobs = 2;
  const auto parallel = run_config_file(cfg, opts, log);
  REQUIRE(parallel.exit_code == kExitOk);
  for (const auto& job : report.jobs) {
    const auto a = json::parse(read_file(report.run_dir / job.result_file));
    const auto b = json::parse(read_file(parallel.run_dir / job.result_file));
    CHECK(a == b);
  }
}

TEST_CASE("export_curves reports a result without records") {
  TempDir dir;
  write_file(dir.path / "result_x_s0.json", R"({"key": "x", "config_hash": "0", "runs": [{"seed": 0, "phases": []}]})");
  CHECK_THROWS(export_curves(dir.path));
}

TEST_CASE("failing recipe gives exit code 1") {
  TempDir dir;
  auto doc = tiny_config();
  doc["recipe"] = "crois_reduced_val";
  doc["val_fraction"] = 0.001;
  const auto cfg = write_file(dir.path / "cfg.json", doc.dump());
  RunOptions opts;
  opts.out_root = dir.path / "out";
  std::ostringstream log;
  const auto report = run_config_file(cfg, opts, log);
  CHECK(report.exit_code == kExitRecipeFailed);
  REQUIRE(report.jobs.size() == 1);
  CHECK_FALSE(report.jobs[0].ok);
  const auto manifest = json::parse(read_file(report.run_dir / "manifest.json"));
  CHECK(manifest["jobs"][0]["status"] == "failed");
  CHECK(manifest["jobs"][0].contains("error"));
}

TEST_CASE("command-line exit codes") {
  const char* cli = std::getenv("CROIS_CLI");
  if (cli == nullptr) {
    MESSAGE("CROIS_CLI not set; skipping");
    return;
  }
  TempDir dir;
  const auto quiet = " > " + (dir.path / "log.txt").string() + " 2>&1";
  const auto exit_of = [&](const std::string& args) {
    const int status = std::system((std::string(cli) + " " + args + quiet).c_str());
    return WEXITSTATUS(status);
  };
  const auto good = write_file(dir.path / "good.json", tiny_config().dump());
  const auto bad = write_file(dir.path / "bad.json", R"({"recipe": "crois", "dataset": "synthetic", "lrate": 1})");
  const std::string out = " --out " + (dir.path / "out").string();
  CHECK(exit_of("run " + good.string() + out + " --dry-run") == 0);
  CHECK(exit_of("run " + bad.string() + out) == 2);
  CHECK(exit_of("run " + (dir.path / "missing.json").string() + out) == 2);
  CHECK(exit_of("no-such-command") == 2);

  const auto spec = write_file(dir.path / "spec.json", R"({"n": 100, "noise_dims": 1, "split": "train"})");
  const auto csv = dir.path / "train.csv";
  CHECK(exit_of("gen-data " + spec.string() + " --out " + csv.string()) == 0);
  const auto loaded = load_embedding_csv(csv);
  CHECK(loaded.size() == 100);
  CHECK(loaded.input_dim() == 3);
  CHECK(count_files(dir.path) >= 4);
}
