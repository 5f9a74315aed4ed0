#pragma once

// Experiment recipes built from the trainer:
//   erm                ERM on all training data, best validation average.
//   gdro_full          group DRO on all group-labeled training data.
//   crois              ERM feature extractor on D_U, robust head retraining on D_L.
//   ncrt               same retraining, but on data the extractor was trained on.
//   crois_val_only     extractor on all training data, retraining on half of val.
//   crois_reduced_val  retraining on a fraction of val, train worst-group selection.
//   jtt_lite           error-set pseudo groups from a short ERM run, then group DRO.
//
// Seeds: every run seed s derives independent streams with mix_seed(s, {tag}):
//   1 split, 2 initialization, 3 extractor batches, 4 robust-phase batches,
//   5 validation halving, 6 validation shrinking.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crois/data.hpp"
#include "crois/metrics.hpp"
#include "crois/trainer.hpp"

namespace crois {

enum class Recipe { erm, gdro_full, crois, ncrt, crois_val_only, crois_reduced_val, jtt_lite };
enum class RetrainAlgorithm { gdro, reweight, subsample, rescale };

std::string to_string(Recipe r);
Recipe recipe_from_string(const std::string& s);
std::string to_string(RetrainAlgorithm r);
RetrainAlgorithm retrain_from_string(const std::string& s);

struct RecipeConfig {
  Recipe recipe = Recipe::crois;
  /// Fraction of the training data that carries group labels (D_L).
  double p = 0.3;
  RetrainAlgorithm retrain = RetrainAlgorithm::gdro;
  /// Scope of the robust phase (crois phase 2, gdro_full, jtt_lite phase 2).
  UpdateScope retrain_scope = UpdateScope::head_only;
  std::vector<int> hidden = {64, 32};
  /// ERM / feature-extractor phase.
  TrainConfig phase1;
  /// Robust phase. Its objective is set by the recipe.
  TrainConfig phase2;
  /// crois_reduced_val: fraction of the validation set that keeps labels.
  double val_fraction = 1.0;
  std::vector<std::uint64_t> seeds = {0};
  /// Averaging for val/test metrics; defaults to train_weighted when the
  /// dataset declares skewed eval splits, plain otherwise.
  std::optional<Weighting> weighting;
  bool stratify = false;
  /// jtt_lite phase-1 overrides.
  std::optional<int> jtt_epochs;
  std::optional<std::vector<int>> jtt_hidden;
  /// Candidate powers for the rescale retraining algorithm.
  std::vector<double> rescale_taus = {0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0};

  /// Defaults appropriate for `recipe` (robust phase scope).
  static RecipeConfig defaults_for(Recipe recipe);
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RecipeConfig& c);
nlohmann::json to_json(const EpochRecord& r);
nlohmann::json to_json(const GroupMetrics& m);
nlohmann::json to_json(const MetricsSummary& s);

struct PhaseOutcome {
  std::string name;
  std::vector<EpochRecord> records;
  int selected_epoch = 0;
  std::string selection;
  std::size_t train_size = 0;
};

struct SeedOutcome {
  std::uint64_t seed = 0;
  GroupMetrics test;
  GroupMetrics val;
  std::vector<PhaseOutcome> phases;
  /// Reads of group labels the recipe is not entitled to; must be zero.
  std::size_t restricted_label_reads = 0;
  std::vector<std::string> warnings;
  std::optional<double> rescale_tau;
  std::optional<std::size_t> batch_quota;
  std::size_t duplicate_batches = 0;

  // In-memory artifacts; not serialized.
  std::optional<MlpModel> feature_extractor;
  MlpModel final_model;
  std::vector<std::size_t> unlabeled_indices;
  std::vector<std::size_t> labeled_indices;
};

struct ExperimentResult {
  RecipeConfig config;
  std::vector<SeedOutcome> runs;
  MetricsSummary summary;
  std::vector<std::string> artifacts;
};

nlohmann::json to_json(const SeedOutcome& s);
/// Whole-experiment document. Artifact names are relative, so identical runs
/// serialize identically.
nlohmann::json to_json(const ExperimentResult& r);

/// Dispatches on config.recipe.
ExperimentResult run_recipe(const DatasetSplits& splits, const RecipeConfig& config);

ExperimentResult run_erm(const DatasetSplits& splits, const RecipeConfig& config);
ExperimentResult run_crois(const DatasetSplits& splits, const RecipeConfig& config);
ExperimentResult run_ncrt(const DatasetSplits& splits, const RecipeConfig& config);
ExperimentResult run_crois_val_only(const DatasetSplits& splits, const RecipeConfig& config);
ExperimentResult run_crois_reduced_val(const DatasetSplits& splits, const RecipeConfig& config);
ExperimentResult run_jtt_lite(const DatasetSplits& splits, const RecipeConfig& config);

/// Optional inputs for the single-phase GDRO baseline: a pretrained model
/// (required for head_only scope) and the training rows (all rows if empty).
struct GdroFullInputs {
  std::optional<MlpModel> pretrained;
  std::vector<std::size_t> train_indices;
};
ExperimentResult run_gdro_full(const DatasetSplits& splits, const RecipeConfig& config,
                               const GdroFullInputs& inputs = {});

/// Powers of two q with 4 <= q <= min(smallest group, cap); if the smallest
/// group has fewer than 4 members, the largest power of two not above it.
std::vector<std::size_t> candidate_batch_quotas(std::size_t smallest_group, std::size_t cap);

struct AblationRow {
  std::string label;
  double value = 0.0;  // the swept quantity, when numeric
  FieldSummary phase1_val_avg;
  FieldSummary phase1_val_wg;
  FieldSummary val_avg;
  FieldSummary val_wg;
  FieldSummary test_avg;
  FieldSummary test_wg;
};

nlohmann::json to_json(const AblationRow& row);
void write_ablation_csv(std::span<const AblationRow> rows, std::ostream& out);

/// CROIS with the extractor trained by each of `algorithms` (erm, reweight,
/// gdro) and identical GDRO head retraining.
std::vector<AblationRow> feature_extractor_ablation(const DatasetSplits& splits, const RecipeConfig& config,
                                                    std::span<const Objective> algorithms);

/// CROIS phase 2 run from the extractor checkpoint at each listed epoch.
std::vector<AblationRow> epoch_ablation(const DatasetSplits& splits, const RecipeConfig& config,
                                        std::span<const int> epochs);

/// Runs `config` once per l2 value, setting the robust phase's l2.
std::vector<AblationRow> l2_sweep(const DatasetSplits& splits, const RecipeConfig& config,
                                  std::span<const double> l2_values);

struct ChangeRow {
  std::string label;  // "avg" or the group id
  double proportion = 0.0;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  std::size_t changed = 0;
  std::size_t total = 0;
  double changed_percent = 0.0;
  bool worst_before = false;
  bool worst_after = false;
};

struct ChangeBlock {
  std::string split;
  std::vector<ChangeRow> rows;  // average row first, then one row per group
};

struct ChangeTable {
  std::vector<ChangeBlock> blocks;
};

/// Per-group accuracy before/after and number of changed predictions, for
/// the unlabeled and labeled training splits.
ChangeTable prediction_change_analysis(const MlpModel& before, const MlpModel& after, const GroupedDataset& data,
                                       std::span<const std::size_t> unlabeled,
                                       std::span<const std::size_t> labeled);

nlohmann::json to_json(const ChangeTable& t);

}  // namespace crois
