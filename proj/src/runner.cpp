#include "crois/runner.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "crois/errors.hpp"

namespace crois {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string timestamp_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y%m%dT%H%M%SZ");
  return out.str();
}

fs::path make_unique_dir(const fs::path& root, const std::string& stem) {
  fs::create_directories(root);
  for (int n = 0;; ++n) {
    fs::path candidate = root / (n == 0 ? stem : stem + "-" + std::to_string(n));
    if (fs::create_directory(candidate)) return candidate;
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  return json::parse(in);
}

double number_or_nan(const json& v) { return v.is_number() ? v.get<double>() : kNaN; }

std::vector<double> numbers_or_nan(const json& v) {
  std::vector<double> out;
  if (v.is_array())
    for (const auto& x : v) out.push_back(number_or_nan(x));
  return out;
}

std::string result_file_name(const std::string& key, std::uint64_t seed) {
  return "result_" + key + "_s" + std::to_string(seed) + ".json";
}

void write_manifest(const RunManifest& manifest, const std::vector<JobStatus>* jobs) {
  json j = to_json(manifest);
  json statuses = json::array();
  if (jobs)
    for (const auto& s : *jobs) {
      json e = {{"key", s.key}, {"seed", s.seed}, {"status", s.ok ? "ok" : "failed"}};
      if (!s.ok) e["error"] = s.error;
      if (s.ok) e["result"] = s.result_file;
      statuses.push_back(e);
    }
  j["jobs"] = statuses;
  j["status"] = jobs ? "finished" : "running";
  write_text(manifest.output_dir / "manifest.json", j.dump(2) + "\n");
}

struct Job {
  std::size_t experiment = 0;
  std::uint64_t seed = 0;
};

void write_metrics(const fs::path& dir, const ParsedConfig& parsed, const std::vector<JobStatus>& statuses,
                   const std::vector<std::optional<ExperimentResult>>& results) {
  std::ostringstream metrics;
  metrics << "config_hash,key,recipe,p,seed,split,group,count,acc\n";
  std::ostringstream aggregate;
  aggregate << "config_hash,key,recipe,p,runs,avg_mean,avg_std,wg_mean,wg_std\n";

  std::map<std::string, std::vector<GroupMetrics>> by_key;
  for (std::size_t i = 0; i < statuses.size(); ++i) {
    if (!results[i]) continue;
    const auto& spec = *std::find_if(parsed.experiments.begin(), parsed.experiments.end(),
                                     [&](const ExperimentSpec& e) { return e.key == statuses[i].key; });
    const SeedOutcome& s = results[i]->runs.front();
    const std::string prefix = spec.hash + ',' + spec.key + ',' + to_string(spec.recipe.recipe) + ',' +
                               fmt(spec.recipe.p) + ',' + std::to_string(s.seed) + ',';
    for (const auto& [split, m] : {std::pair<const char*, const GroupMetrics*>{"val", &s.val}, {"test", &s.test}}) {
      for (std::size_t g = 0; g < m->group_accuracy.size(); ++g)
        metrics << prefix << split << ',' << g << ',' << m->group_count[g] << ',' << fmt(m->group_accuracy[g])
                << '\n';
      metrics << prefix << split << ",avg,," << fmt(m->average_accuracy) << '\n';
      metrics << prefix << split << ",wg,," << fmt(m->worst_group_accuracy) << '\n';
    }
    by_key[spec.key].push_back(s.test);
  }
  for (const auto& spec : parsed.experiments) {
    auto it = by_key.find(spec.key);
    if (it == by_key.end()) continue;
    const MetricsSummary sum = aggregate_seeds(it->second);
    auto sd = [](const FieldSummary& f) { return f.stddev ? fmt(*f.stddev) : std::string(); };
    aggregate << spec.hash << ',' << spec.key << ',' << to_string(spec.recipe.recipe) << ',' << fmt(spec.recipe.p)
              << ',' << sum.runs << ',' << fmt(sum.average_accuracy.mean) << ',' << sd(sum.average_accuracy) << ','
              << fmt(sum.worst_group_accuracy.mean) << ',' << sd(sum.worst_group_accuracy) << '\n';
  }
  write_text(dir / "metrics.csv", metrics.str());
  write_text(dir / "aggregate.csv", aggregate.str());
}

}  // namespace

fs::path default_output_root() {
  const char* env = std::getenv("CROIS_OUT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

RunReport run(const ParsedConfig& parsed, const fs::path& config_path, const RunOptions& options, std::ostream& log) {
  RunReport report;
  if (options.dry_run) {
    json configs = json::array();
    for (const auto& e : parsed.experiments) configs.push_back({{"key", e.key}, {"config", e.resolved}});
    log << configs.dump(2) << '\n';
    return report;
  }

  RunManifest manifest;
  manifest.config_path = config_path;
  manifest.timestamp = timestamp_now();
  manifest.global_seed = parsed.global_seed;
  manifest.experiments = parsed.experiments;
  manifest.output_dir = make_unique_dir(options.out_root, "run-" + manifest.timestamp);
  report.run_dir = manifest.output_dir;
  write_manifest(manifest, nullptr);

  // Datasets are loaded once per experiment and shared read-only by its jobs.
  std::vector<std::optional<DatasetSplits>> datasets(parsed.experiments.size());
  std::vector<std::string> dataset_errors(parsed.experiments.size());
  for (std::size_t e = 0; e < parsed.experiments.size(); ++e) {
    try {
      datasets[e] = load_dataset(parsed.experiments[e].dataset);
    } catch (const std::exception& ex) {
      dataset_errors[e] = std::string("dataset: ") + ex.what();
    }
  }

  std::vector<Job> jobs;
  for (std::size_t e = 0; e < parsed.experiments.size(); ++e)
    for (std::uint64_t seed : parsed.experiments[e].recipe.seeds) jobs.push_back({e, seed});
  report.jobs.resize(jobs.size());
  std::vector<std::optional<ExperimentResult>> results(jobs.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < jobs.size(); i = next.fetch_add(1)) {
      const Job& job = jobs[i];
      const ExperimentSpec& spec = parsed.experiments[job.experiment];
      JobStatus& status = report.jobs[i];
      status.key = spec.key;
      status.seed = job.seed;
      if (!datasets[job.experiment]) {
        status.error = dataset_errors[job.experiment];
        continue;
      }
      try {
        RecipeConfig cfg = spec.recipe;
        cfg.seeds = {job.seed};
        ExperimentResult result = run_recipe(*datasets[job.experiment], cfg);
        json doc = to_json(result);
        doc["key"] = spec.key;
        doc["config_hash"] = spec.hash;
        status.result_file = result_file_name(spec.key, job.seed);
        write_text(manifest.output_dir / status.result_file, doc.dump(2) + "\n");
        results[i] = std::move(result);
        status.ok = true;
      } catch (const std::exception& ex) {
        status.error = ex.what();
      }
    }
  };
  const unsigned threads = std::max(1u, std::min<unsigned>(options.jobs, static_cast<unsigned>(jobs.size())));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const auto& s : report.jobs) {
    if (s.ok) {
      log << "ok      " << s.key << " seed " << s.seed << '\n';
    } else {
      log << "FAILED  " << s.key << " seed " << s.seed << ": " << s.error << '\n';
      report.exit_code = kExitRecipeFailed;
    }
  }
  write_metrics(manifest.output_dir, parsed, report.jobs, results);
  export_curves(manifest.output_dir);
  write_manifest(manifest, &report.jobs);
  return report;
}

RunReport run_config_file(const fs::path& config_path, const RunOptions& options, std::ostream& log) {
  ParsedConfig parsed;
  try {
    parsed = parse_config(config_path);
  } catch (const Error& e) {
    log << "config error: " << e.what() << '\n';
    return RunReport{kExitConfigError, {}, {}};
  }
  return run(parsed, config_path, options, log);
}

EpochRecord epoch_record_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.train_loss = number_or_nan(j.at("train_loss"));
  r.train_accuracy = number_or_nan(j.at("train_acc"));
  r.train_group_loss = numbers_or_nan(j.at("train_group_loss"));
  r.train_group_accuracy = numbers_or_nan(j.at("train_group_acc"));
  r.train_wg_accuracy = number_or_nan(j.at("train_wg_acc"));
  r.val_group_loss = numbers_or_nan(j.at("val_group_loss"));
  r.val_group_accuracy = numbers_or_nan(j.at("val_group_acc"));
  r.val_avg_accuracy = number_or_nan(j.at("val_avg_acc"));
  r.val_wg_accuracy = number_or_nan(j.at("val_wg_acc"));
  if (j.contains("q")) r.q = numbers_or_nan(j["q"]);
  return r;
}

std::vector<fs::path> export_curves(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw Error("run directory '" + run_dir.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.starts_with("result_") && name.ends_with(".json")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  // key -> epoch -> per-seed (val_avg, val_wg)
  std::map<std::string, std::map<int, std::vector<std::pair<double, double>>>> summary;
  std::map<std::string, std::size_t> seeds_per_key;
  std::vector<fs::path> written;
  for (const auto& file : files) {
    const json doc = read_json(file);
    const std::string key = doc.at("key").get<std::string>();
    for (const auto& run : doc.at("runs")) {
      const auto seed = run.at("seed").get<std::uint64_t>();
      const json& phases = run.at("phases");
      if (phases.empty() || phases.back().at("records").empty())
        throw Error("run " + key + " seed " + std::to_string(seed) + " has no epoch records");
      std::vector<EpochRecord> records;
      for (const auto& r : phases.back().at("records")) records.push_back(epoch_record_from_json(r));
      std::ostringstream out;
      write_curves_long(records, out);
      const fs::path path = run_dir / ("curves_" + key + "_" + std::to_string(seed) + ".csv");
      write_text(path, out.str());
      written.push_back(path);
      ++seeds_per_key[key];
      for (const auto& r : records) summary[key][r.epoch].emplace_back(r.val_avg_accuracy, r.val_wg_accuracy);
    }
  }
  for (const auto& [key, epochs] : summary) {
    std::ostringstream out;
    out << "epoch,val_avg,val_wg\n";
    for (const auto& [epoch, vals] : epochs) {
      if (vals.size() != seeds_per_key[key]) continue;  // epoch not recorded by every seed
      double avg = 0.0;
      double wg = 0.0;
      for (const auto& [a, w] : vals) {
        avg += a;
        wg += w;
      }
      const auto n = static_cast<double>(vals.size());
      out << epoch << ',' << fmt(avg / n) << ',' << fmt(wg / n) << '\n';
    }
    const fs::path path = run_dir / ("summary_" + key + ".csv");
    write_text(path, out.str());
    written.push_back(path);
  }
  return written;
}

void generate_data(const fs::path& spec_path, const fs::path& out_csv) {
  json doc;
  {
    std::ifstream in(spec_path);
    if (!in) throw ConfigError("cannot open spec '" + spec_path.string() + "'");
    try {
      doc = json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw ConfigError("malformed spec '" + spec_path.string() + "': " + e.what());
    }
  }
  const GenDataSpec spec = parse_gen_data_spec(doc);
  const DatasetSplits splits = generate_synthetic_splits(spec.splits);
  const GroupedDataset& data = spec.split == "train" ? splits.train : spec.split == "val" ? splits.val : splits.test;
  save_embedding_csv(data, out_csv);
}

}  // namespace crois
