#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crois/data.hpp"
#include "crois/diffnet.hpp"
#include "crois/metrics.hpp"
#include "crois/objectives.hpp"

namespace crois {

enum class Objective { erm, gdro, reweight, subsample };
enum class Sampling { automatic, shuffled, group_balanced };

std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);
std::string to_string(UpdateScope s);
UpdateScope scope_from_string(const std::string& s);
std::string to_string(Sampling s);
Sampling sampling_from_string(const std::string& s);

struct TrainConfig {
  double lr = 1e-4;
  double momentum = 0.9;
  double l2 = 1e-4;
  int epochs = 10;
  std::size_t batch_size = 32;
  Objective objective = Objective::erm;
  UpdateScope scope = UpdateScope::full;
  double gdro_step_size = 0.01;
  double group_adjustment = 0.0;
  std::uint64_t seed = 0;
  int eval_every = 1;
  /// automatic: group-balanced for gdro, shuffled otherwise.
  Sampling sampling = Sampling::automatic;
  /// Epochs whose checkpoints are kept in addition to the retention policy.
  std::vector<int> keep_epochs;

  void validate() const;
};

/// Training rows of a dataset. `groups` is aligned with `indices` and left
/// empty when group labels are not available to this phase.
struct TrainSet {
  const GroupedDataset* data = nullptr;
  std::vector<std::size_t> indices;
  std::vector<int> groups;
  int num_groups = 0;

  bool has_groups() const { return !groups.empty(); }
};

/// Evaluation rows (all rows when `indices` is empty).
struct EvalSet {
  const GroupedDataset* data = nullptr;
  std::vector<std::size_t> indices;
  Weighting weighting = Weighting::plain;
  std::vector<double> train_proportions;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  /// Per-group train statistics; empty without group labels.
  std::vector<double> train_group_loss;
  std::vector<double> train_group_accuracy;
  /// NaN without group labels.
  double train_wg_accuracy = 0.0;
  /// Validation statistics; empty / NaN without an eval set.
  std::vector<double> val_group_loss;
  std::vector<double> val_group_accuracy;
  double val_avg_accuracy = 0.0;
  double val_wg_accuracy = 0.0;
  /// Group weights after the epoch (GDRO only).
  std::vector<double> q;
};

/// Bitwise comparison of every field; `include_q` controls whether the GDRO
/// weights take part.
bool same_record(const EpochRecord& a, const EpochRecord& b, bool include_q = true);
bool same_records(std::span<const EpochRecord> a, std::span<const EpochRecord> b, bool include_q = true);

struct Checkpoint {
  int epoch = 0;
  MlpModel model;
};

/// Retained checkpoints, sorted by epoch. Retention keeps the best-so-far
/// under each selection criterion (first strict maximum), the final epoch,
/// and any explicitly requested epochs.
struct CheckpointSet {
  std::vector<Checkpoint> retained;

  const Checkpoint& at(int epoch) const;
  bool contains(int epoch) const;
  const Checkpoint& final_checkpoint() const;
};

struct TrainResult {
  CheckpointSet checkpoints;
  std::vector<EpochRecord> records;
  std::optional<GdroState> gdro;
  /// Balanced batches that contained a repeated example.
  std::size_t duplicate_batches = 0;
  /// Rows actually trained on (after subsampling).
  std::vector<std::size_t> trained_indices;
};

/// Epoch-based training. A record is taken at epoch 0, after every
/// `eval_every` epochs, at each of `keep_epochs`, and at the final epoch.
TrainResult train(const MlpModel& initial, const TrainSet& train_set, const std::optional<EvalSet>& val,
                  const TrainConfig& config);

/// Number of train() calls made by this process.
std::size_t training_invocations();

/// Argmax of the criterion over records, earliest epoch on ties.
const Checkpoint& select_by_avg_val(std::span<const EpochRecord> records, const CheckpointSet& checkpoints);
const Checkpoint& select_by_wg_val(std::span<const EpochRecord> records, const CheckpointSet& checkpoints);
const Checkpoint& select_by_train_wg(std::span<const EpochRecord> records, const CheckpointSet& checkpoints);

int best_epoch_by_avg_val(std::span<const EpochRecord> records);
int best_epoch_by_wg_val(std::span<const EpochRecord> records);
int best_epoch_by_train_wg(std::span<const EpochRecord> records);

/// Long format: epoch,split,group,loss,acc. Group "all" rows carry the
/// whole-split figures.
void write_curves_long(std::span<const EpochRecord> records, std::ostream& out);
/// Summary format: epoch,val_avg,val_wg.
void write_curves_summary(std::span<const EpochRecord> records, std::ostream& out);

}  // namespace crois
