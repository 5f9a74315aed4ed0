#include "crois/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>

#include "crois/errors.hpp"
#include "crois/seeding.hpp"

namespace crois {

using nlohmann::json;

namespace {

std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

[[noreturn]] void type_error(const std::string& path, const char* expected, const json& v) {
  throw ConfigError("type mismatch at '" + path + "': expected " + expected + ", got " + v.type_name());
}

double get_double(const json& v, const std::string& path) {
  if (!v.is_number()) type_error(path, "number", v);
  return v.get<double>();
}

int get_int(const json& v, const std::string& path) {
  if (!v.is_number_integer()) type_error(path, "integer", v);
  return v.get<int>();
}

std::uint64_t get_uint(const json& v, const std::string& path) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer()) {
    if (v.get<std::int64_t>() < 0) throw RangeError("'" + path + "' must be >= 0");
    return static_cast<std::uint64_t>(v.get<std::int64_t>());
  }
  type_error(path, "nonnegative integer", v);
}

std::size_t get_size(const json& v, const std::string& path) { return static_cast<std::size_t>(get_uint(v, path)); }

bool get_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) type_error(path, "boolean", v);
  return v.get<bool>();
}

std::string get_string(const json& v, const std::string& path) {
  if (!v.is_string()) type_error(path, "string", v);
  return v.get<std::string>();
}

template <typename T, typename Get>
std::vector<T> get_list(const json& v, const std::string& path, Get get) {
  if (!v.is_array()) type_error(path, "array", v);
  std::vector<T> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(get(v[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& prefix) {
  if (!obj.is_object()) type_error(prefix.empty() ? "<document>" : prefix, "object", obj);
  for (const auto& [key, _] : obj.items())
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + join_path(prefix, key) + "'");
}

const std::set<std::string> kTrainKeys = {"lr",         "l2",         "momentum", "batch_size",
                                          "epochs",     "eta_q",      "adjustment", "eval_every",
                                          "sampling",   "keep_epochs"};
const std::set<std::string> kPhase1Keys = [] {
  auto s = kTrainKeys;
  s.insert("objective");
  return s;
}();
const std::set<std::string> kTopKeys = [] {
  std::set<std::string> s = {"recipe",       "dataset",    "p",          "retrain",    "retrain_scope",
                             "hidden",       "val_fraction", "weighting", "stratify",   "jtt_epochs",
                             "jtt_hidden",   "rescale_taus", "seeds",     "seed",       "phase1",
                             "phase2",       "sweep",      "runs"};
  s.insert(kTrainKeys.begin(), kTrainKeys.end());
  return s;
}();
const std::set<std::string> kSyntheticKeys = {"n",          "majority_fraction", "core_margin",
                                              "spurious_margin", "noise_dims",   "noise_scale",
                                              "n_val",      "n_test",            "eval_majority_fraction",
                                              "seed"};
const std::set<std::string> kCsvKeys = {"train", "val", "test", "num_classes", "num_attributes", "skewed_eval"};

void apply_train_keys(const json& obj, TrainConfig& c, const std::string& prefix) {
  for (const auto& [key, v] : obj.items()) {
    const std::string path = join_path(prefix, key);
    if (key == "lr") c.lr = get_double(v, path);
    else if (key == "l2") c.l2 = get_double(v, path);
    else if (key == "momentum") c.momentum = get_double(v, path);
    else if (key == "batch_size") c.batch_size = get_size(v, path);
    else if (key == "epochs") c.epochs = get_int(v, path);
    else if (key == "eta_q") c.gdro_step_size = get_double(v, path);
    else if (key == "adjustment") c.group_adjustment = get_double(v, path);
    else if (key == "eval_every") c.eval_every = get_int(v, path);
    else if (key == "sampling") c.sampling = sampling_from_string(get_string(v, path));
    else if (key == "keep_epochs") c.keep_epochs = get_list<int>(v, path, get_int);
    else if (key == "objective") c.objective = objective_from_string(get_string(v, path));
  }
}

SyntheticSplitsSpec parse_synthetic(const json& obj, const std::string& prefix, std::uint64_t default_seed) {
  SyntheticSplitsSpec s;
  s.train.seed = default_seed;
  if (obj.is_null()) return s;
  check_keys(obj, kSyntheticKeys, prefix);
  for (const auto& [key, v] : obj.items()) {
    const std::string path = join_path(prefix, key);
    if (key == "n") s.train.n = get_size(v, path);
    else if (key == "majority_fraction") s.train.majority_fraction = get_double(v, path);
    else if (key == "core_margin") s.train.core_margin = get_double(v, path);
    else if (key == "spurious_margin") s.train.spurious_margin = get_double(v, path);
    else if (key == "noise_dims") s.train.noise_dims = get_int(v, path);
    else if (key == "noise_scale") s.train.noise_scale = get_double(v, path);
    else if (key == "n_val") s.n_val = get_size(v, path);
    else if (key == "n_test") s.n_test = get_size(v, path);
    else if (key == "eval_majority_fraction") s.eval_majority_fraction = get_double(v, path);
    else if (key == "seed") s.train.seed = get_uint(v, path);
  }
  const double rho = s.train.majority_fraction;
  if (!(rho > 0.5 && rho < 1.0)) throw RangeError("'" + join_path(prefix, "majority_fraction") + "' must lie in (0.5, 1)");
  if (!(s.eval_majority_fraction >= 0.5 && s.eval_majority_fraction < 1.0))
    throw RangeError("'" + join_path(prefix, "eval_majority_fraction") + "' must lie in [0.5, 1)");
  if (s.train.noise_dims < 0) throw RangeError("'" + join_path(prefix, "noise_dims") + "' must be >= 0");
  return s;
}

DatasetSource parse_dataset(const json& v, const std::filesystem::path& base_dir, std::uint64_t global_seed) {
  DatasetSource d;
  if (v.is_string()) {
    if (v.get<std::string>() != "synthetic")
      throw ConfigError("dataset '" + v.get<std::string>() + "' unknown; use \"synthetic\" or a {\"csv\": ...} block");
    d.synthetic = parse_synthetic(json(), "dataset.synthetic", global_seed);
    d.skewed_eval = d.synthetic.eval_majority_fraction != d.synthetic.train.majority_fraction;
    return d;
  }
  if (!v.is_object()) type_error("dataset", "string or object", v);
  check_keys(v, {"synthetic", "csv"}, "dataset");
  if (v.size() != 1) throw ConfigError("'dataset' needs exactly one of 'synthetic' or 'csv'");
  if (v.contains("synthetic")) {
    d.synthetic = parse_synthetic(v["synthetic"], "dataset.synthetic", global_seed);
    d.skewed_eval = d.synthetic.eval_majority_fraction != d.synthetic.train.majority_fraction;
    return d;
  }
  const json& c = v["csv"];
  check_keys(c, kCsvKeys, "dataset.csv");
  d.kind = DatasetSource::Kind::csv;
  for (const char* key : {"train", "val", "test"})
    if (!c.contains(key))
      throw ConfigError(std::string("missing required key 'dataset.csv.") + key + "' (no default path)");
  auto resolve = [&](const char* key) {
    std::filesystem::path p = get_string(c[key], std::string("dataset.csv.") + key);
    return p.is_relative() && !base_dir.empty() ? base_dir / p : p;
  };
  d.train_csv = resolve("train");
  d.val_csv = resolve("val");
  d.test_csv = resolve("test");
  if (c.contains("num_classes")) d.csv_options.num_classes = get_int(c["num_classes"], "dataset.csv.num_classes");
  if (c.contains("num_attributes"))
    d.csv_options.num_attributes = get_int(c["num_attributes"], "dataset.csv.num_attributes");
  if (c.contains("skewed_eval")) d.skewed_eval = get_bool(c["skewed_eval"], "dataset.csv.skewed_eval");
  return d;
}

std::string format_number(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

ExperimentSpec resolve(const json& entry, std::size_t run_index, std::uint64_t global_seed,
                       const std::filesystem::path& base_dir) {
  check_keys(entry, kTopKeys, "");
  for (const char* key : {"recipe", "dataset"})
    if (!entry.contains(key))
      throw ConfigError(std::string("missing required key '") + key +
                        "': no default applies (recipe: erm, gdro_full, crois, ncrt, crois_val_only, "
                        "crois_reduced_val, jtt_lite; dataset: \"synthetic\" or {\"csv\": {...}})");

  ExperimentSpec spec;
  spec.run_index = run_index;
  RecipeConfig& c = spec.recipe;
  c = RecipeConfig::defaults_for(recipe_from_string(get_string(entry["recipe"], "recipe")));
  spec.dataset = parse_dataset(entry["dataset"], base_dir, global_seed);

  // Shared training keys first, then per-phase overrides.
  apply_train_keys(entry, c.phase1, "");
  apply_train_keys(entry, c.phase2, "");
  if (entry.contains("phase1")) {
    check_keys(entry["phase1"], kPhase1Keys, "phase1");
    apply_train_keys(entry["phase1"], c.phase1, "phase1");
  }
  if (entry.contains("phase2")) {
    check_keys(entry["phase2"], kTrainKeys, "phase2");
    apply_train_keys(entry["phase2"], c.phase2, "phase2");
  }

  for (const auto& [key, v] : entry.items()) {
    if (key == "p") c.p = get_double(v, key);
    else if (key == "retrain") c.retrain = retrain_from_string(get_string(v, key));
    else if (key == "retrain_scope") c.retrain_scope = scope_from_string(get_string(v, key));
    else if (key == "hidden") c.hidden = get_list<int>(v, key, get_int);
    else if (key == "val_fraction") c.val_fraction = get_double(v, key);
    else if (key == "weighting") {
      const std::string w = get_string(v, key);
      c.weighting = w == "auto" ? std::nullopt : std::optional<Weighting>(weighting_from_string(w));
    } else if (key == "stratify") c.stratify = get_bool(v, key);
    else if (key == "jtt_epochs") c.jtt_epochs = get_int(v, key);
    else if (key == "jtt_hidden") c.jtt_hidden = get_list<int>(v, key, get_int);
    else if (key == "rescale_taus") c.rescale_taus = get_list<double>(v, key, get_double);
  }
  if (!(c.p >= 0.0 && c.p <= 1.0)) throw RangeError("'p' must lie in [0, 1], got " + format_number(c.p));

  if (entry.contains("seeds")) {
    const json& s = entry["seeds"];
    if (s.is_array()) {
      c.seeds = get_list<std::uint64_t>(s, "seeds", get_uint);
    } else {
      const std::size_t count = get_size(s, "seeds");
      c.seeds.clear();
      for (std::size_t j = 0; j < count; ++j) c.seeds.push_back(mix_seed(global_seed, {run_index, j}));
    }
  } else {
    c.seeds = {mix_seed(global_seed, {run_index, 0})};
  }
  c.validate();

  spec.resolved = to_json(c);
  spec.resolved["dataset"] = to_json(spec.dataset);
  spec.resolved["global_seed"] = global_seed;
  spec.resolved["run_index"] = run_index;
  spec.hash = fnv1a_hex(spec.resolved.dump());
  spec.key = to_string(c.recipe) + "-p" + format_number(c.p) + "-" + spec.hash.substr(0, 8);
  return spec;
}

/// Sets `value` at a dotted path, creating objects along the way.
void set_path(json& doc, const std::string& path, const json& value) {
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string part = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("malformed sweep key '" + path + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    json& child = (*node)[part];
    if (child.is_null()) child = json::object();
    if (!child.is_object()) throw ConfigError("sweep key '" + path + "' descends into a non-object");
    node = &child;
    start = dot + 1;
  }
}

std::vector<json> expand_sweep(const json& entry) {
  if (!entry.contains("sweep")) return {entry};
  const json& sweep = entry["sweep"];
  if (!sweep.is_object()) type_error("sweep", "object", sweep);
  json base = entry;
  base.erase("sweep");
  std::vector<json> out = {base};
  for (const auto& [path, values] : sweep.items()) {
    if (!values.is_array() || values.empty()) type_error("sweep." + path, "nonempty array", values);
    if (path == "sweep" || path == "runs") throw ConfigError("sweep key '" + path + "' is not sweepable");
    std::vector<json> next;
    for (const json& partial : out)
      for (const json& v : values) {
        json doc = partial;
        set_path(doc, path, v);
        next.push_back(std::move(doc));
      }
    out = std::move(next);
  }
  return out;
}

}  // namespace

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json to_json(const DatasetSource& d) {
  if (d.kind == DatasetSource::Kind::csv) {
    json j = {{"kind", "csv"},
              {"train", d.train_csv.string()},
              {"val", d.val_csv.string()},
              {"test", d.test_csv.string()},
              {"skewed_eval", d.skewed_eval}};
    j["num_classes"] = d.csv_options.num_classes ? json(*d.csv_options.num_classes) : json("inferred");
    j["num_attributes"] = d.csv_options.num_attributes ? json(*d.csv_options.num_attributes) : json("inferred");
    return j;
  }
  const auto& s = d.synthetic;
  return {{"kind", "synthetic"},
          {"n", s.train.n},
          {"majority_fraction", s.train.majority_fraction},
          {"core_margin", s.train.core_margin},
          {"spurious_margin", s.train.spurious_margin},
          {"noise_dims", s.train.noise_dims},
          {"noise_scale", s.train.noise_scale},
          {"n_val", s.n_val},
          {"n_test", s.n_test},
          {"eval_majority_fraction", s.eval_majority_fraction},
          {"seed", s.train.seed},
          {"skewed_eval", d.skewed_eval}};
}

DatasetSplits load_dataset(const DatasetSource& d) {
  if (d.kind == DatasetSource::Kind::synthetic) return generate_synthetic_splits(d.synthetic);
  DatasetSplits out;
  auto options = d.csv_options;
  options.name = "train";
  out.train = load_embedding_csv(d.train_csv, options);
  // Eval splits share the training label spaces.
  options.num_classes = out.train.num_classes();
  options.num_attributes = out.train.num_attributes();
  options.name = "val";
  out.val = load_embedding_csv(d.val_csv, options);
  options.name = "test";
  out.test = load_embedding_csv(d.test_csv, options);
  out.skewed_eval = d.skewed_eval;
  return out;
}

ParsedConfig parse_config(const nlohmann::json& document, const std::filesystem::path& base_dir) {
  if (!document.is_object()) type_error("<document>", "object", document);
  ParsedConfig parsed;
  if (document.contains("seed")) parsed.global_seed = get_uint(document["seed"], "seed");

  std::vector<json> entries;
  json base = document;
  if (document.contains("runs")) {
    const json& runs = document["runs"];
    if (!runs.is_array()) type_error("runs", "array", runs);
    base.erase("runs");
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const std::string path = "runs[" + std::to_string(i) + "]";
      if (!runs[i].is_object()) type_error(path, "object", runs[i]);
      if (runs[i].contains("runs")) throw ConfigError("unknown key '" + path + ".runs'");
      if (runs[i].contains("seed")) throw ConfigError("'" + path + ".seed' not allowed; the global seed is top-level");
      json entry = base;
      entry.merge_patch(runs[i]);
      entries.push_back(std::move(entry));
    }
  } else {
    entries.push_back(base);
  }

  std::map<std::string, int> seen;
  for (std::size_t r = 0; r < entries.size(); ++r)
    for (const json& doc : expand_sweep(entries[r])) {
      ExperimentSpec spec = resolve(doc, r, parsed.global_seed, base_dir);
      if (const int n = seen[spec.key]++; n > 0) spec.key += "-" + std::to_string(n);
      parsed.experiments.push_back(std::move(spec));
    }
  return parsed;
}

ParsedConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config '" + path.string() + "': " + e.what());
  }
  return parse_config(doc, path.parent_path());
}

GenDataSpec parse_gen_data_spec(const nlohmann::json& document) {
  if (!document.is_object()) type_error("<document>", "object", document);
  json synthetic = document;
  GenDataSpec spec;
  if (document.contains("split")) {
    spec.split = get_string(document["split"], "split");
    if (spec.split != "train" && spec.split != "val" && spec.split != "test")
      throw ConfigError("'split' must be train, val, or test");
    synthetic.erase("split");
  }
  spec.splits = parse_synthetic(synthetic, "", 0);
  return spec;
}

nlohmann::json to_json(const RunManifest& m) {
  json experiments = json::array();
  for (const auto& e : m.experiments)
    experiments.push_back({{"key", e.key}, {"hash", e.hash}, {"config", e.resolved}});
  return {{"config_path", m.config_path.string()},
          {"output_dir", m.output_dir.string()},
          {"timestamp", m.timestamp},
          {"engine_version", m.engine_version},
          {"global_seed", m.global_seed},
          {"experiments", experiments}};
}

}  // namespace crois
