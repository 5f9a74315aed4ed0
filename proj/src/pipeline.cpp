#include "crois/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <memory>
#include <ostream>

#include "crois/errors.hpp"
#include "crois/seeding.hpp"

namespace crois {

namespace {

constexpr std::uint64_t kSplitStream = 1;
constexpr std::uint64_t kInitStream = 2;
constexpr std::uint64_t kExtractorStream = 3;
constexpr std::uint64_t kRobustStream = 4;
constexpr std::uint64_t kHalvingStream = 5;
constexpr std::uint64_t kShrinkStream = 6;

constexpr std::pair<const char*, Recipe> kRecipes[] = {
    {"erm", Recipe::erm},
    {"gdro_full", Recipe::gdro_full},
    {"crois", Recipe::crois},
    {"ncrt", Recipe::ncrt},
    {"crois_val_only", Recipe::crois_val_only},
    {"crois_reduced_val", Recipe::crois_reduced_val},
    {"jtt_lite", Recipe::jtt_lite}};
constexpr std::pair<const char*, RetrainAlgorithm> kRetrain[] = {{"gdro", RetrainAlgorithm::gdro},
                                                                 {"reweight", RetrainAlgorithm::reweight},
                                                                 {"subsample", RetrainAlgorithm::subsample},
                                                                 {"rescale", RetrainAlgorithm::rescale}};

}  // namespace

std::string to_string(Recipe r) {
  for (const auto& [name, value] : kRecipes)
    if (value == r) return name;
  return "?";
}

Recipe recipe_from_string(const std::string& s) {
  for (const auto& [name, value] : kRecipes)
    if (s == name) return value;
  throw ConfigError("unknown recipe '" + s + "'");
}

std::string to_string(RetrainAlgorithm r) {
  for (const auto& [name, value] : kRetrain)
    if (value == r) return name;
  return "?";
}

RetrainAlgorithm retrain_from_string(const std::string& s) {
  for (const auto& [name, value] : kRetrain)
    if (s == name) return value;
  throw ConfigError("unknown retraining algorithm '" + s + "' (expected gdro, reweight, subsample, rescale)");
}

RecipeConfig RecipeConfig::defaults_for(Recipe recipe) {
  RecipeConfig c;
  c.recipe = recipe;
  if (recipe == Recipe::gdro_full || recipe == Recipe::jtt_lite) c.retrain_scope = UpdateScope::full;
  if (recipe == Recipe::jtt_lite) c.jtt_epochs = 1;
  return c;
}

void RecipeConfig::validate() const {
  if (!(p >= 0.0 && p <= 1.0)) throw RangeError("p must lie in [0, 1], got " + std::to_string(p));
  if ((recipe == Recipe::crois || recipe == Recipe::ncrt) && !(p > 0.0))
    throw PreconditionError(to_string(recipe) + " needs p > 0 so that D_L is nonempty");
  if (recipe == Recipe::crois && !(p < 1.0))
    throw PreconditionError("crois needs p < 1 so that D_U is nonempty");
  if (!(val_fraction > 0.0 && val_fraction <= 1.0)) throw RangeError("val_fraction must lie in (0, 1]");
  if (seeds.empty()) throw PreconditionError("at least one seed is required");
  for (int h : hidden)
    if (h <= 0) throw RangeError("hidden widths must be positive");
  if (recipe == Recipe::jtt_lite && !jtt_epochs && !jtt_hidden)
    throw PreconditionError("jtt_lite needs a phase-1 epoch or width override");
  if (jtt_epochs && *jtt_epochs < 0) throw RangeError("jtt epochs must be >= 0");
  if (retrain == RetrainAlgorithm::rescale && rescale_taus.empty())
    throw PreconditionError("rescale retraining needs at least one tau");
  phase1.validate();
  phase2.validate();
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"momentum", c.momentum},
          {"l2", c.l2},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"objective", to_string(c.objective)},
          {"scope", to_string(c.scope)},
          {"eta_q", c.gdro_step_size},
          {"adjustment", c.group_adjustment},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"sampling", to_string(c.sampling)},
          {"keep_epochs", c.keep_epochs}};
}

nlohmann::json to_json(const RecipeConfig& c) {
  nlohmann::json j = {{"recipe", to_string(c.recipe)},
                      {"p", c.p},
                      {"retrain", to_string(c.retrain)},
                      {"retrain_scope", to_string(c.retrain_scope)},
                      {"hidden", c.hidden},
                      {"phase1", to_json(c.phase1)},
                      {"phase2", to_json(c.phase2)},
                      {"val_fraction", c.val_fraction},
                      {"seeds", c.seeds},
                      {"weighting", c.weighting ? nlohmann::json(to_string(*c.weighting)) : nlohmann::json("auto")},
                      {"stratify", c.stratify},
                      {"rescale_taus", c.rescale_taus}};
  j["jtt_epochs"] = c.jtt_epochs ? nlohmann::json(*c.jtt_epochs) : nlohmann::json(nullptr);
  j["jtt_hidden"] = c.jtt_hidden ? nlohmann::json(*c.jtt_hidden) : nlohmann::json(nullptr);
  return j;
}

nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j = {{"epoch", r.epoch},
                      {"train_loss", r.train_loss},
                      {"train_acc", r.train_accuracy},
                      {"train_group_loss", r.train_group_loss},
                      {"train_group_acc", r.train_group_accuracy},
                      {"train_wg_acc", r.train_wg_accuracy},
                      {"val_group_loss", r.val_group_loss},
                      {"val_group_acc", r.val_group_accuracy},
                      {"val_avg_acc", r.val_avg_accuracy},
                      {"val_wg_acc", r.val_wg_accuracy}};
  if (!r.q.empty()) j["q"] = r.q;
  return j;
}

nlohmann::json to_json(const GroupMetrics& m) {
  return {{"group_acc", m.group_accuracy},
          {"group_count", m.group_count},
          {"avg_acc", m.average_accuracy},
          {"wg_acc", m.worst_group_accuracy},
          {"worst_group", m.worst_group()},
          {"weighting", to_string(m.weighting)}};
}

namespace {

nlohmann::json to_json(const FieldSummary& f) {
  return {{"mean", f.mean}, {"std", f.stddev ? nlohmann::json(*f.stddev) : nlohmann::json(nullptr)}};
}

}  // namespace

nlohmann::json to_json(const MetricsSummary& s) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : s.group_accuracy) groups.push_back(to_json(g));
  return {{"runs", s.runs},
          {"avg_acc", to_json(s.average_accuracy)},
          {"wg_acc", to_json(s.worst_group_accuracy)},
          {"group_acc", groups}};
}

nlohmann::json to_json(const SeedOutcome& s) {
  nlohmann::json phases = nlohmann::json::array();
  for (const auto& p : s.phases) {
    nlohmann::json records = nlohmann::json::array();
    for (const auto& r : p.records) records.push_back(to_json(r));
    phases.push_back({{"name", p.name},
                      {"selected_epoch", p.selected_epoch},
                      {"selection", p.selection},
                      {"train_size", p.train_size},
                      {"records", records}});
  }
  nlohmann::json j = {{"seed", s.seed},
                      {"test", to_json(s.test)},
                      {"val", to_json(s.val)},
                      {"phases", phases},
                      {"restricted_label_reads", s.restricted_label_reads},
                      {"duplicate_batches", s.duplicate_batches},
                      {"warnings", s.warnings},
                      {"unlabeled_size", s.unlabeled_indices.size()},
                      {"labeled_size", s.labeled_indices.size()}};
  if (s.rescale_tau) j["rescale_tau"] = *s.rescale_tau;
  if (s.batch_quota) j["batch_quota"] = *s.batch_quota;
  return j;
}

nlohmann::json to_json(const ExperimentResult& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& s : r.runs) runs.push_back(to_json(s));
  return {{"config", to_json(r.config)}, {"runs", runs}, {"summary", to_json(r.summary)}, {"artifacts", r.artifacts}};
}

// ---------------------------------------------------------------------------
// Recipe plumbing

namespace {

/// Per-seed state: an audited copy of the training split and the evaluation
/// protocol.
struct RunContext {
  const DatasetSplits& splits;
  const RecipeConfig& config;
  std::uint64_t seed;
  Weighting weighting;
  std::vector<double> train_proportions;
  GroupedDataset train;
  std::shared_ptr<LabelAudit> audit;

  RunContext(const DatasetSplits& s, const RecipeConfig& c, std::uint64_t run_seed)
      : splits(s), config(c), seed(run_seed), train(s.train) {
    if (s.train.size() == 0) throw InsufficientDataError("training split is empty");
    if (s.val.input_dim() != s.train.input_dim() || s.test.input_dim() != s.train.input_dim())
      throw ShapeError("train, val, and test must share the feature dimension");
    weighting = c.weighting.value_or(s.skewed_eval ? Weighting::train_weighted : Weighting::plain);
    // Evaluation metadata, computed before any audit is attached.
    train_proportions = group_proportions(s.train, s.train.all_indices());
    audit = std::make_shared<LabelAudit>(train.size());
    train.attach_audit(audit);
  }

  std::uint64_t stream(std::uint64_t tag) const { return mix_seed(seed, {tag}); }

  EvalSet val_eval(std::vector<std::size_t> rows = {}) const {
    return EvalSet{&splits.val, std::move(rows), weighting, train_proportions};
  }

  MlpModel fresh_model(const std::vector<int>& hidden) const {
    std::vector<int> widths{train.input_dim()};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(train.num_classes());
    return MlpModel::initialize(widths, stream(kInitStream));
  }

  TrainSet unlabeled_set(std::vector<std::size_t> rows) const {
    return TrainSet{&train, std::move(rows), {}, train.num_groups()};
  }

  TrainSet labeled_set(std::vector<std::size_t> rows) const {
    auto groups = train.groups(rows);
    return TrainSet{&train, std::move(rows), std::move(groups), train.num_groups()};
  }
};

PhaseOutcome make_phase(std::string name, const TrainResult& result, int selected, std::string rule) {
  return PhaseOutcome{std::move(name), result.records, selected, std::move(rule), result.trained_indices.size()};
}

struct PhaseResult {
  MlpModel model;
  PhaseOutcome outcome;
  std::size_t duplicate_batches = 0;
  std::optional<double> tau;
  TrainResult raw;
};

enum class Selection { avg_val, wg_val, train_wg, final_epoch };

const char* selection_name(Selection s) {
  switch (s) {
    case Selection::avg_val: return "avg_val";
    case Selection::wg_val: return "wg_val";
    case Selection::train_wg: return "train_wg";
    case Selection::final_epoch: return "final";
  }
  return "?";
}

PhaseResult run_phase(std::string name, const MlpModel& start, const TrainSet& set,
                      const std::optional<EvalSet>& eval, const TrainConfig& config, Selection selection) {
  PhaseResult out;
  out.raw = train(start, set, eval, config);
  const Checkpoint* chosen = nullptr;
  switch (selection) {
    case Selection::avg_val: chosen = &select_by_avg_val(out.raw.records, out.raw.checkpoints); break;
    case Selection::wg_val: chosen = &select_by_wg_val(out.raw.records, out.raw.checkpoints); break;
    case Selection::train_wg: chosen = &select_by_train_wg(out.raw.records, out.raw.checkpoints); break;
    case Selection::final_epoch: chosen = &out.raw.checkpoints.final_checkpoint(); break;
  }
  out.model = chosen->model;
  out.outcome = make_phase(std::move(name), out.raw, chosen->epoch, selection_name(selection));
  out.duplicate_batches = out.raw.duplicate_batches;
  return out;
}

TrainConfig extractor_config(const RunContext& ctx) {
  TrainConfig c = ctx.config.phase1;
  c.seed = ctx.stream(kExtractorStream);
  return c;
}

TrainConfig robust_config(const RunContext& ctx, Objective objective, UpdateScope scope) {
  TrainConfig c = ctx.config.phase2;
  c.objective = objective;
  c.scope = scope;
  c.seed = ctx.stream(kRobustStream);
  return c;
}

Objective objective_for(RetrainAlgorithm r) {
  switch (r) {
    case RetrainAlgorithm::gdro: return Objective::gdro;
    case RetrainAlgorithm::reweight: return Objective::reweight;
    case RetrainAlgorithm::subsample: return Objective::subsample;
    case RetrainAlgorithm::rescale: break;
  }
  throw PreconditionError("rescale has no training objective");
}

/// Worst-group accuracy of `model` on rows of `data` with the given groups.
double worst_group_on(const MlpModel& model, const GroupedDataset& data, std::span<const std::size_t> rows,
                      std::span<const int> groups, int num_groups) {
  const auto preds = predict(forward(model, data.rows(rows)).logits);
  return evaluate_predictions(preds, data.labels_at(rows), groups, num_groups, Weighting::plain)
      .worst_group_accuracy;
}

/// Robust retraining of the classifier of `extractor` on `set`.
PhaseResult retrain_classifier(const RunContext& ctx, const MlpModel& extractor, const TrainSet& set,
                               const std::optional<EvalSet>& eval, Selection selection,
                               std::optional<std::size_t> batch_size = std::nullopt) {
  const auto& cfg = ctx.config;
  if (cfg.retrain != RetrainAlgorithm::rescale) {
    TrainConfig c = robust_config(ctx, objective_for(cfg.retrain), cfg.retrain_scope);
    if (batch_size) c.batch_size = *batch_size;
    return run_phase("retrain", extractor, set, eval, c, selection);
  }

  // Non-parametric: pick tau by worst-group accuracy, no gradient steps.
  PhaseResult out;
  std::vector<int> eval_groups;
  std::vector<std::size_t> eval_rows;
  if (selection == Selection::wg_val) {
    eval_rows = eval->indices.empty() ? eval->data->all_indices() : eval->indices;
    eval_groups = eval->data->groups(eval_rows);
  }
  double best = -1.0;
  for (std::size_t t = 0; t < cfg.rescale_taus.size(); ++t) {
    const double tau = cfg.rescale_taus[t];
    MlpModel candidate = rescale_head(extractor, tau);
    const double wg = selection == Selection::wg_val
                          ? worst_group_on(candidate, *eval->data, eval_rows, eval_groups, eval->data->num_groups())
                          : worst_group_on(candidate, *set.data, set.indices, set.groups, set.num_groups);
    EpochRecord r;
    r.epoch = static_cast<int>(t);
    r.train_wg_accuracy = selection == Selection::train_wg ? wg : std::numeric_limits<double>::quiet_NaN();
    r.val_wg_accuracy = selection == Selection::wg_val ? wg : std::numeric_limits<double>::quiet_NaN();
    r.val_avg_accuracy = std::numeric_limits<double>::quiet_NaN();
    out.outcome.records.push_back(r);
    if (wg > best) {
      best = wg;
      out.model = std::move(candidate);
      out.tau = tau;
      out.outcome.selected_epoch = static_cast<int>(t);
    }
  }
  out.outcome.name = "rescale";
  out.outcome.selection = "rescale_tau_grid";
  out.outcome.train_size = set.indices.size();
  return out;
}

void finish_seed(const RunContext& ctx, SeedOutcome& s, const MlpModel& final_model) {
  s.seed = ctx.seed;
  s.final_model = final_model;
  s.test = evaluate(final_model, ctx.splits.test, ctx.weighting, ctx.train_proportions);
  s.val = evaluate(final_model, ctx.splits.val, ctx.weighting, ctx.train_proportions);
  s.restricted_label_reads = ctx.audit->restricted_reads();
}

ExperimentResult collect(const RecipeConfig& config, std::vector<SeedOutcome> runs) {
  ExperimentResult r;
  r.config = config;
  r.runs = std::move(runs);
  std::vector<GroupMetrics> tests;
  for (const auto& s : r.runs) tests.push_back(s.test);
  r.summary = aggregate_seeds(tests);
  return r;
}

template <typename PerSeed>
ExperimentResult for_each_seed(const DatasetSplits& splits, const RecipeConfig& config, PerSeed&& per_seed) {
  config.validate();
  std::vector<SeedOutcome> runs;
  for (std::uint64_t seed : config.seeds) {
    RunContext ctx(splits, config, seed);
    SeedOutcome s;
    per_seed(ctx, s);
    runs.push_back(std::move(s));
  }
  return collect(config, std::move(runs));
}

void require_disjoint_nonempty(const SplitPlan& plan) {
  if (plan.unlabeled.empty()) throw PreconditionError("D_U is empty (p too large)");
  if (plan.labeled.empty()) throw PreconditionError("D_L is empty (p too small)");
}

}  // namespace

ExperimentResult run_erm(const DatasetSplits& splits, const RecipeConfig& config) {
  return for_each_seed(splits, config, [](RunContext& ctx, SeedOutcome& s) {
    ctx.audit->restrict_all();
    auto rows = ctx.train.all_indices();
    TrainConfig c = extractor_config(ctx);
    c.objective = Objective::erm;
    auto phase = run_phase("erm", ctx.fresh_model(ctx.config.hidden), ctx.unlabeled_set(rows), ctx.val_eval(), c,
                           Selection::avg_val);
    s.phases.push_back(std::move(phase.outcome));
    s.unlabeled_indices = std::move(rows);
    finish_seed(ctx, s, phase.model);
  });
}

ExperimentResult run_crois(const DatasetSplits& splits, const RecipeConfig& config) {
  return for_each_seed(splits, config, [](RunContext& ctx, SeedOutcome& s) {
    const auto& cfg = ctx.config;
    SplitPlan plan = make_split(ctx.splits.train, cfg.p, ctx.stream(kSplitStream), cfg.stratify);
    require_disjoint_nonempty(plan);
    s.warnings = plan.warnings;

    // Phase 1: feature extractor on D_U. ERM never sees D_U group labels.
    TrainConfig c1 = extractor_config(ctx);
    TrainSet extractor_set;
    if (c1.objective == Objective::erm) {
      ctx.audit->restrict_rows(plan.unlabeled);
      extractor_set = ctx.unlabeled_set(plan.unlabeled);
    } else {
      extractor_set = ctx.labeled_set(plan.unlabeled);
    }
    auto phase1 = run_phase("extractor", ctx.fresh_model(cfg.hidden), extractor_set, ctx.val_eval(), c1,
                            Selection::avg_val);

    // Phase 2: robust classifier retraining on D_L.
    auto phase2 = retrain_classifier(ctx, phase1.model, ctx.labeled_set(plan.labeled), ctx.val_eval(),
                                     Selection::wg_val);
    s.duplicate_batches = phase2.duplicate_batches;
    s.rescale_tau = phase2.tau;
    s.phases.push_back(std::move(phase1.outcome));
    s.phases.push_back(std::move(phase2.outcome));
    s.feature_extractor = phase1.model;
    s.unlabeled_indices = std::move(plan.unlabeled);
    s.labeled_indices = std::move(plan.labeled);
    finish_seed(ctx, s, phase2.model);
  });
}

ExperimentResult run_ncrt(const DatasetSplits& splits, const RecipeConfig& config) {
  return for_each_seed(splits, config, [](RunContext& ctx, SeedOutcome& s) {
    const auto& cfg = ctx.config;
    SplitPlan plan = make_split(ctx.splits.train, cfg.p, ctx.stream(kSplitStream), cfg.stratify);
    if (plan.labeled.empty()) throw PreconditionError("D_L is empty (p too small)");
    s.warnings = plan.warnings;
    // Phase 1 uses every training row; only D_L labels are ever available.
    ctx.audit->restrict_rows(plan.unlabeled);
    TrainConfig c1 = extractor_config(ctx);
    c1.objective = Objective::erm;
    auto phase1 = run_phase("extractor", ctx.fresh_model(cfg.hidden), ctx.unlabeled_set(ctx.train.all_indices()),
                            ctx.val_eval(), c1, Selection::avg_val);
    auto phase2 = retrain_classifier(ctx, phase1.model, ctx.labeled_set(plan.labeled), ctx.val_eval(),
                                     Selection::wg_val);
    s.duplicate_batches = phase2.duplicate_batches;
    s.rescale_tau = phase2.tau;
    s.phases.push_back(std::move(phase1.outcome));
    s.phases.push_back(std::move(phase2.outcome));
    s.feature_extractor = phase1.model;
    s.unlabeled_indices = ctx.train.all_indices();
    s.labeled_indices = std::move(plan.labeled);
    finish_seed(ctx, s, phase2.model);
  });
}

ExperimentResult run_gdro_full(const DatasetSplits& splits, const RecipeConfig& config, const GdroFullInputs& inputs) {
  return for_each_seed(splits, config, [&inputs](RunContext& ctx, SeedOutcome& s) {
    const auto& cfg = ctx.config;
    if (cfg.retrain_scope == UpdateScope::head_only && !inputs.pretrained)
      throw PreconditionError("head_only GDRO needs a pretrained model");
    auto rows = inputs.train_indices.empty() ? ctx.train.all_indices() : inputs.train_indices;
    const MlpModel start = inputs.pretrained ? *inputs.pretrained : ctx.fresh_model(cfg.hidden);
    auto phase = run_phase("gdro", start, ctx.labeled_set(rows), ctx.val_eval(),
                           robust_config(ctx, Objective::gdro, cfg.retrain_scope), Selection::wg_val);
    s.duplicate_batches = phase.duplicate_batches;
    s.phases.push_back(std::move(phase.outcome));
    s.labeled_indices = std::move(rows);
    finish_seed(ctx, s, phase.model);
  });
}

ExperimentResult run_crois_val_only(const DatasetSplits& splits, const RecipeConfig& config) {
  return for_each_seed(splits, config, [](RunContext& ctx, SeedOutcome& s) {
    const auto& cfg = ctx.config;
    ctx.audit->restrict_all();
    TrainConfig c1 = extractor_config(ctx);
    c1.objective = Objective::erm;
    auto phase1 = run_phase("extractor", ctx.fresh_model(cfg.hidden), ctx.unlabeled_set(ctx.train.all_indices()),
                            ctx.val_eval(), c1, Selection::avg_val);

    const GroupedDataset& val = ctx.splits.val;
    auto [retrain_rows, select_rows] = split_val_in_half(val.all_indices(), ctx.stream(kHalvingStream));
    auto groups = val.groups(retrain_rows);
    TrainSet retrain_set{&val, retrain_rows, std::move(groups), val.num_groups()};
    auto phase2 = retrain_classifier(ctx, phase1.model, retrain_set, ctx.val_eval(select_rows), Selection::wg_val);
    s.duplicate_batches = phase2.duplicate_batches;
    s.rescale_tau = phase2.tau;
    s.phases.push_back(std::move(phase1.outcome));
    s.phases.push_back(std::move(phase2.outcome));
    s.feature_extractor = phase1.model;
    s.unlabeled_indices = ctx.train.all_indices();
    s.labeled_indices = std::move(retrain_rows);
    finish_seed(ctx, s, phase2.model);
  });
}

std::vector<std::size_t> candidate_batch_quotas(std::size_t smallest_group, std::size_t cap) {
  if (smallest_group == 0) throw EmptyGroupError("smallest group is empty", -1);
  const std::size_t limit = std::min(smallest_group, std::max<std::size_t>(cap, 1));
  std::vector<std::size_t> out;
  for (std::size_t q = 4; q <= limit; q *= 2) out.push_back(q);
  if (out.empty()) {
    std::size_t q = 1;
    while (q * 2 <= limit) q *= 2;
    out.push_back(q);
  }
  return out;
}

ExperimentResult run_crois_reduced_val(const DatasetSplits& splits, const RecipeConfig& config) {
  return for_each_seed(splits, config, [](RunContext& ctx, SeedOutcome& s) {
    const auto& cfg = ctx.config;
    ctx.audit->restrict_all();
    TrainConfig c1 = extractor_config(ctx);
    c1.objective = Objective::erm;
    auto phase1 = run_phase("extractor", ctx.fresh_model(cfg.hidden), ctx.unlabeled_set(ctx.train.all_indices()),
                            ctx.val_eval(), c1, Selection::avg_val);

    const GroupedDataset& val = ctx.splits.val;
    auto rows = shrink_indices(val.all_indices(), cfg.val_fraction, ctx.stream(kShrinkStream));
    const auto counts = val.group_counts(rows);
    for (std::size_t g = 0; g < counts.size(); ++g)
      if (counts[g] == 0)
        throw EmptyGroupError("validation fraction " + std::to_string(cfg.val_fraction) + " leaves group " +
                                  std::to_string(g) + " without examples",
                              static_cast<int>(g));
    auto groups = val.groups(rows);
    TrainSet retrain_set{&val, rows, std::move(groups), val.num_groups()};

    // All retained labels go to retraining; selection by train worst-group
    // accuracy, searched over group-balanced batch quotas.
    const std::size_t smallest = *std::min_element(counts.begin(), counts.end());
    const auto G = static_cast<std::size_t>(val.num_groups());
    std::optional<PhaseResult> best;
    double best_wg = -1.0;
    std::size_t best_quota = 0;
    for (std::size_t quota : candidate_batch_quotas(smallest, cfg.phase2.batch_size)) {
      auto phase = retrain_classifier(ctx, phase1.model, retrain_set, std::nullopt, Selection::train_wg, quota * G);
      const double wg = phase.outcome.records.empty()
                            ? -1.0
                            : [&] {
                                for (const auto& r : phase.outcome.records)
                                  if (r.epoch == phase.outcome.selected_epoch) return r.train_wg_accuracy;
                                return -1.0;
                              }();
      if (!best || wg > best_wg) {
        best_wg = wg;
        best_quota = quota;
        best = std::move(phase);
      }
    }
    s.batch_quota = best_quota;
    s.duplicate_batches = best->duplicate_batches;
    s.rescale_tau = best->tau;
    s.phases.push_back(std::move(phase1.outcome));
    s.phases.push_back(std::move(best->outcome));
    s.feature_extractor = phase1.model;
    s.unlabeled_indices = ctx.train.all_indices();
    s.labeled_indices = std::move(rows);
    finish_seed(ctx, s, best->model);
  });
}

ExperimentResult run_jtt_lite(const DatasetSplits& splits, const RecipeConfig& config) {
  return for_each_seed(splits, config, [](RunContext& ctx, SeedOutcome& s) {
    const auto& cfg = ctx.config;
    ctx.audit->restrict_all();
    const auto rows = ctx.train.all_indices();

    // Phase 1: short / narrow ERM; its errors define pseudo groups.
    TrainConfig c1 = extractor_config(ctx);
    c1.objective = Objective::erm;
    if (cfg.jtt_epochs) c1.epochs = *cfg.jtt_epochs;
    auto phase1 = run_phase("identifier", ctx.fresh_model(cfg.jtt_hidden.value_or(cfg.hidden)),
                            ctx.unlabeled_set(rows), ctx.val_eval(), c1, Selection::final_epoch);

    const auto flags = error_set_pseudolabels(phase1.model, ctx.train);
    auto pseudo = pseudo_groups(ctx.train.labels(), flags);
    const int num_pseudo = 2 * ctx.train.num_classes();
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_pseudo), 0);
    for (int g : pseudo) ++counts[static_cast<std::size_t>(g)];
    for (int g = 0; g < num_pseudo; ++g)
      if (counts[static_cast<std::size_t>(g)] == 0)
        throw EmptyGroupError("pseudo group " + std::to_string(g) + " (class " + std::to_string(g / 2) +
                                  (g % 2 ? ", misclassified" : ", correct") + ") is empty",
                              g);

    TrainSet pseudo_set{&ctx.train, rows, std::move(pseudo), num_pseudo};
    const MlpModel start =
        cfg.retrain_scope == UpdateScope::head_only ? phase1.model : ctx.fresh_model(cfg.hidden);
    auto phase2 = run_phase("gdro_pseudo", start, pseudo_set, ctx.val_eval(),
                            robust_config(ctx, Objective::gdro, cfg.retrain_scope), Selection::wg_val);
    s.duplicate_batches = phase2.duplicate_batches;
    s.phases.push_back(std::move(phase1.outcome));
    s.phases.push_back(std::move(phase2.outcome));
    s.unlabeled_indices = rows;
    finish_seed(ctx, s, phase2.model);
  });
}

ExperimentResult run_recipe(const DatasetSplits& splits, const RecipeConfig& config) {
  switch (config.recipe) {
    case Recipe::erm: return run_erm(splits, config);
    case Recipe::gdro_full: return run_gdro_full(splits, config);
    case Recipe::crois: return run_crois(splits, config);
    case Recipe::ncrt: return run_ncrt(splits, config);
    case Recipe::crois_val_only: return run_crois_val_only(splits, config);
    case Recipe::crois_reduced_val: return run_crois_reduced_val(splits, config);
    case Recipe::jtt_lite: return run_jtt_lite(splits, config);
  }
  throw ConfigError("unhandled recipe");
}

// ---------------------------------------------------------------------------
// Ablations

namespace {

AblationRow summarize_row(std::string label, double value, const std::vector<double>& p1_avg,
                          const std::vector<double>& p1_wg, const std::vector<double>& val_avg,
                          const std::vector<double>& val_wg, const std::vector<double>& test_avg,
                          const std::vector<double>& test_wg) {
  AblationRow row;
  row.label = std::move(label);
  row.value = value;
  if (!p1_avg.empty()) row.phase1_val_avg = summarize(p1_avg);
  if (!p1_wg.empty()) row.phase1_val_wg = summarize(p1_wg);
  row.val_avg = summarize(val_avg);
  row.val_wg = summarize(val_wg);
  row.test_avg = summarize(test_avg);
  row.test_wg = summarize(test_wg);
  return row;
}

AblationRow row_from_result(std::string label, double value, const ExperimentResult& r) {
  std::vector<double> p1_avg, p1_wg, val_avg, val_wg, test_avg, test_wg;
  for (const auto& s : r.runs) {
    if (s.phases.size() >= 2) {
      const auto& p1 = s.phases.front();
      for (const auto& rec : p1.records)
        if (rec.epoch == p1.selected_epoch) {
          p1_avg.push_back(rec.val_avg_accuracy);
          p1_wg.push_back(rec.val_wg_accuracy);
        }
    }
    val_avg.push_back(s.val.average_accuracy);
    val_wg.push_back(s.val.worst_group_accuracy);
    test_avg.push_back(s.test.average_accuracy);
    test_wg.push_back(s.test.worst_group_accuracy);
  }
  return summarize_row(std::move(label), value, p1_avg, p1_wg, val_avg, val_wg, test_avg, test_wg);
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string fmt(const FieldSummary& f) { return fmt(f.mean) + ',' + (f.stddev ? fmt(*f.stddev) : std::string()); }

}  // namespace

std::vector<AblationRow> feature_extractor_ablation(const DatasetSplits& splits, const RecipeConfig& config,
                                                    std::span<const Objective> algorithms) {
  std::vector<AblationRow> rows;
  for (Objective algorithm : algorithms) {
    if (algorithm == Objective::subsample)
      throw PreconditionError("feature extractor ablation supports erm, reweight, and gdro");
    RecipeConfig c = config;
    c.recipe = Recipe::crois;
    c.retrain = RetrainAlgorithm::gdro;
    c.phase1.objective = algorithm;
    rows.push_back(row_from_result(to_string(algorithm), 0.0, run_crois(splits, c)));
  }
  return rows;
}

std::vector<AblationRow> epoch_ablation(const DatasetSplits& splits, const RecipeConfig& config,
                                        std::span<const int> epochs) {
  config.validate();
  for (int e : epochs)
    if (e < 0 || e > config.phase1.epochs)
      throw RangeError("epoch " + std::to_string(e) + " beyond the extractor's " +
                       std::to_string(config.phase1.epochs) + " training epochs");

  const std::size_t E = epochs.size();
  std::vector<std::vector<double>> p1_avg(E), p1_wg(E), val_avg(E), val_wg(E), test_avg(E), test_wg(E);
  for (std::uint64_t seed : config.seeds) {
    RunContext ctx(splits, config, seed);
    SplitPlan plan = make_split(splits.train, config.p, ctx.stream(kSplitStream), config.stratify);
    require_disjoint_nonempty(plan);
    ctx.audit->restrict_rows(plan.unlabeled);
    TrainConfig c1 = extractor_config(ctx);
    c1.objective = Objective::erm;
    c1.keep_epochs.assign(epochs.begin(), epochs.end());
    const TrainResult extractor = train(ctx.fresh_model(config.hidden), ctx.unlabeled_set(plan.unlabeled),
                                        ctx.val_eval(), c1);
    const TrainSet labeled = ctx.labeled_set(plan.labeled);
    for (std::size_t i = 0; i < E; ++i) {
      const int e = epochs[i];
      for (const auto& r : extractor.records)
        if (r.epoch == e) {
          p1_avg[i].push_back(r.val_avg_accuracy);
          p1_wg[i].push_back(r.val_wg_accuracy);
        }
      auto phase2 = retrain_classifier(ctx, extractor.checkpoints.at(e).model, labeled, ctx.val_eval(),
                                       Selection::wg_val);
      const auto val = evaluate(phase2.model, splits.val, ctx.weighting, ctx.train_proportions);
      const auto test = evaluate(phase2.model, splits.test, ctx.weighting, ctx.train_proportions);
      val_avg[i].push_back(val.average_accuracy);
      val_wg[i].push_back(val.worst_group_accuracy);
      test_avg[i].push_back(test.average_accuracy);
      test_wg[i].push_back(test.worst_group_accuracy);
    }
  }
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < E; ++i)
    rows.push_back(summarize_row("epoch " + std::to_string(epochs[i]), epochs[i], p1_avg[i], p1_wg[i], val_avg[i],
                                 val_wg[i], test_avg[i], test_wg[i]));
  return rows;
}

std::vector<AblationRow> l2_sweep(const DatasetSplits& splits, const RecipeConfig& config,
                                  std::span<const double> l2_values) {
  std::vector<AblationRow> rows;
  for (double l2 : l2_values) {
    RecipeConfig c = config;
    c.phase2.l2 = l2;
    if (c.recipe == Recipe::erm) c.phase1.l2 = l2;
    rows.push_back(row_from_result(to_string(c.recipe) + " l2=" + fmt(l2), l2, run_recipe(splits, c)));
  }
  return rows;
}

nlohmann::json to_json(const AblationRow& row) {
  return {{"label", row.label},
          {"value", row.value},
          {"phase1_val_avg", to_json(row.phase1_val_avg)},
          {"phase1_val_wg", to_json(row.phase1_val_wg)},
          {"val_avg", to_json(row.val_avg)},
          {"val_wg", to_json(row.val_wg)},
          {"test_avg", to_json(row.test_avg)},
          {"test_wg", to_json(row.test_wg)}};
}

void write_ablation_csv(std::span<const AblationRow> rows, std::ostream& out) {
  out << "label,value,phase1_val_avg,phase1_val_avg_std,phase1_val_wg,phase1_val_wg_std,val_avg,val_avg_std,"
         "val_wg,val_wg_std,test_avg,test_avg_std,test_wg,test_wg_std\n";
  for (const auto& r : rows)
    out << r.label << ',' << fmt(r.value) << ',' << fmt(r.phase1_val_avg) << ',' << fmt(r.phase1_val_wg) << ','
        << fmt(r.val_avg) << ',' << fmt(r.val_wg) << ',' << fmt(r.test_avg) << ',' << fmt(r.test_wg) << '\n';
}

// ---------------------------------------------------------------------------
// Prediction change analysis

namespace {

ChangeBlock change_block(std::string split, const std::vector<int>& before, const std::vector<int>& after,
                         const std::vector<int>& labels, const std::vector<int>& groups, int num_groups) {
  ChangeBlock block;
  block.split = std::move(split);
  const std::size_t n = labels.size();
  const auto G = static_cast<std::size_t>(num_groups);
  std::vector<std::size_t> total(G, 0), correct_before(G, 0), correct_after(G, 0), changed(G, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto g = static_cast<std::size_t>(groups[i]);
    ++total[g];
    correct_before[g] += before[i] == labels[i] ? 1 : 0;
    correct_after[g] += after[i] == labels[i] ? 1 : 0;
    changed[g] += before[i] != after[i] ? 1 : 0;
  }
  auto ratio = [](std::size_t a, std::size_t b) {
    return b == 0 ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>(a) / static_cast<double>(b);
  };
  auto sum = [](const std::vector<std::size_t>& v) {
    std::size_t s = 0;
    for (auto x : v) s += x;
    return s;
  };
  ChangeRow avg;
  avg.label = "avg";
  avg.proportion = n == 0 ? 0.0 : 1.0;
  avg.total = n;
  avg.changed = sum(changed);
  avg.accuracy_before = ratio(sum(correct_before), n);
  avg.accuracy_after = ratio(sum(correct_after), n);
  avg.changed_percent = 100.0 * ratio(avg.changed, n);
  block.rows.push_back(avg);

  int worst_before = -1;
  int worst_after = -1;
  for (std::size_t g = 0; g < G; ++g) {
    ChangeRow row;
    row.label = std::to_string(g);
    row.total = total[g];
    row.proportion = ratio(total[g], n);
    row.accuracy_before = ratio(correct_before[g], total[g]);
    row.accuracy_after = ratio(correct_after[g], total[g]);
    row.changed = changed[g];
    row.changed_percent = 100.0 * ratio(changed[g], total[g]);
    block.rows.push_back(row);
    if (total[g] == 0) continue;
    const auto wb = static_cast<std::size_t>(worst_before + 1);
    const auto wa = static_cast<std::size_t>(worst_after + 1);
    if (worst_before < 0 || row.accuracy_before < block.rows[wb].accuracy_before) worst_before = static_cast<int>(g);
    if (worst_after < 0 || row.accuracy_after < block.rows[wa].accuracy_after) worst_after = static_cast<int>(g);
  }
  if (worst_before >= 0) block.rows[static_cast<std::size_t>(worst_before) + 1].worst_before = true;
  if (worst_after >= 0) block.rows[static_cast<std::size_t>(worst_after) + 1].worst_after = true;
  return block;
}

}  // namespace

ChangeTable prediction_change_analysis(const MlpModel& before, const MlpModel& after, const GroupedDataset& data,
                                       std::span<const std::size_t> unlabeled,
                                       std::span<const std::size_t> labeled) {
  if (before.layers().size() != after.layers().size() || before.input_dim() != after.input_dim() ||
      before.num_classes() != after.num_classes())
    throw ShapeError("models must have the same shape");
  for (std::size_t l = 0; l < before.layers().size(); ++l)
    if (before.layers()[l].in() != after.layers()[l].in() || before.layers()[l].out() != after.layers()[l].out())
      throw ShapeError("models must have the same shape");
  ChangeTable table;
  const std::pair<const char*, std::span<const std::size_t>> blocks[] = {{"D_U", unlabeled}, {"D_L", labeled}};
  for (const auto& [name, rows] : blocks) {
    const Matrix x = data.rows(rows);
    table.blocks.push_back(change_block(name, predict(forward(before, x).logits), predict(forward(after, x).logits),
                                        data.labels_at(rows), data.groups(rows), data.num_groups()));
  }
  return table;
}

nlohmann::json to_json(const ChangeTable& t) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : t.blocks) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : b.rows)
      rows.push_back({{"label", r.label},
                      {"proportion", r.proportion},
                      {"acc_before", r.accuracy_before},
                      {"acc_after", r.accuracy_after},
                      {"changed", r.changed},
                      {"total", r.total},
                      {"changed_percent", r.changed_percent},
                      {"worst_before", r.worst_before},
                      {"worst_after", r.worst_after}});
    blocks.push_back({{"split", b.split}, {"rows", rows}});
  }
  return {{"blocks", blocks}};
}

}  // namespace crois
