#include "crois/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <cmath>
#include <limits>
#include <memory>
#include <ostream>
#include <set>

#include "crois/errors.hpp"
#include "crois/seeding.hpp"

namespace crois {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
std::atomic<std::size_t> g_training_invocations{0};

template <typename Enum, std::size_t N>
Enum parse_enum(const std::string& s, const std::pair<const char*, Enum> (&table)[N], const char* what) {
  for (const auto& [name, value] : table)
    if (s == name) return value;
  std::string options;
  for (const auto& [name, _] : table) options += (options.empty() ? "" : ", ") + std::string(name);
  throw ConfigError("unknown " + std::string(what) + " '" + s + "' (expected one of " + options + ")");
}

constexpr std::pair<const char*, Objective> kObjectives[] = {
    {"erm", Objective::erm}, {"gdro", Objective::gdro}, {"reweight", Objective::reweight},
    {"subsample", Objective::subsample}};
constexpr std::pair<const char*, UpdateScope> kScopes[] = {{"full", UpdateScope::full},
                                                           {"head_only", UpdateScope::head_only}};
constexpr std::pair<const char*, Sampling> kSamplings[] = {
    {"automatic", Sampling::automatic}, {"shuffled", Sampling::shuffled},
    {"group_balanced", Sampling::group_balanced}};

template <typename Enum, std::size_t N>
std::string enum_name(Enum v, const std::pair<const char*, Enum> (&table)[N]) {
  for (const auto& [name, value] : table)
    if (v == value) return name;
  return "?";
}

}  // namespace

std::string to_string(Objective o) { return enum_name(o, kObjectives); }
Objective objective_from_string(const std::string& s) { return parse_enum(s, kObjectives, "objective"); }
std::string to_string(UpdateScope s) { return enum_name(s, kScopes); }
UpdateScope scope_from_string(const std::string& s) { return parse_enum(s, kScopes, "scope"); }
std::string to_string(Sampling s) { return enum_name(s, kSamplings); }
Sampling sampling_from_string(const std::string& s) { return parse_enum(s, kSamplings, "sampling"); }

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw RangeError("lr must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw RangeError("momentum must lie in [0, 1)");
  if (!(l2 >= 0.0)) throw RangeError("l2 must be >= 0");
  if (epochs < 0) throw RangeError("epochs must be >= 0");
  if (batch_size == 0) throw RangeError("batch_size must be > 0");
  if (eval_every < 1) throw RangeError("eval_every must be >= 1");
  if (!(gdro_step_size >= 0.0)) throw RangeError("GDRO step size must be >= 0");
  if (!(group_adjustment >= 0.0)) throw RangeError("group adjustment must be >= 0");
}

namespace {

bool same_double(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

bool same_vector(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), same_double);
}

}  // namespace

bool same_record(const EpochRecord& a, const EpochRecord& b, bool include_q) {
  return a.epoch == b.epoch && same_double(a.train_loss, b.train_loss) &&
         same_double(a.train_accuracy, b.train_accuracy) && same_vector(a.train_group_loss, b.train_group_loss) &&
         same_vector(a.train_group_accuracy, b.train_group_accuracy) &&
         same_double(a.train_wg_accuracy, b.train_wg_accuracy) && same_vector(a.val_group_loss, b.val_group_loss) &&
         same_vector(a.val_group_accuracy, b.val_group_accuracy) &&
         same_double(a.val_avg_accuracy, b.val_avg_accuracy) && same_double(a.val_wg_accuracy, b.val_wg_accuracy) &&
         (!include_q || same_vector(a.q, b.q));
}

bool same_records(std::span<const EpochRecord> a, std::span<const EpochRecord> b, bool include_q) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same_record(a[i], b[i], include_q)) return false;
  return true;
}

const Checkpoint& CheckpointSet::at(int epoch) const {
  for (const auto& c : retained)
    if (c.epoch == epoch) return c;
  throw RangeError("no checkpoint retained for epoch " + std::to_string(epoch));
}

bool CheckpointSet::contains(int epoch) const {
  return std::any_of(retained.begin(), retained.end(), [&](const Checkpoint& c) { return c.epoch == epoch; });
}

const Checkpoint& CheckpointSet::final_checkpoint() const {
  if (retained.empty()) throw PreconditionError("no checkpoints retained");
  return retained.back();
}

std::size_t training_invocations() { return g_training_invocations.load(); }

namespace {

struct SplitEval {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> group_loss;
  std::vector<double> group_accuracy;
  double average = kNaN;
  double worst = kNaN;
};

/// Evaluates `model` on rows of `inputs` (already mapped into the model's
/// input space).
SplitEval evaluate_rows(const MlpModel& model, const Matrix& inputs, std::span<const std::size_t> rows,
                        std::span<const int> labels_all, std::span<const int> groups, int num_groups,
                        Weighting weighting, std::span<const double> proportions) {
  Matrix x(static_cast<Eigen::Index>(rows.size()), inputs.cols());
  std::vector<int> labels(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(rows[i]));
    labels[i] = labels_all[rows[i]];
  }
  const Matrix logits = forward(model, x).logits;
  const Vector ce = cross_entropy(logits, labels);
  const auto preds = predict(logits);
  SplitEval out;
  out.loss = rows.empty() ? kNaN : ce.mean();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) correct += preds[i] == labels[i] ? 1 : 0;
  out.accuracy = rows.empty() ? kNaN : static_cast<double>(correct) / static_cast<double>(rows.size());
  if (!groups.empty()) {
    out.group_loss = group_losses(ce, groups, num_groups).loss;
    const auto m = evaluate_predictions(preds, labels, groups, num_groups, weighting, proportions);
    out.group_accuracy = m.group_accuracy;
    out.average = m.average_accuracy;
    out.worst = m.worst_group_accuracy;
  }
  return out;
}

class Retention {
 public:
  explicit Retention(std::vector<int> keep) : keep_(keep.begin(), keep.end()) {}

  void offer(const EpochRecord& r, const MlpModel& model, CheckpointSet& set) {
    consider(best_avg_, r.val_avg_accuracy, r.epoch);
    consider(best_wg_, r.val_wg_accuracy, r.epoch);
    consider(best_train_wg_, r.train_wg_accuracy, r.epoch);
    set.retained.push_back({r.epoch, model});
    std::erase_if(set.retained, [&](const Checkpoint& c) {
      return c.epoch != r.epoch && c.epoch != best_avg_.epoch && c.epoch != best_wg_.epoch &&
             c.epoch != best_train_wg_.epoch && !keep_.contains(c.epoch);
    });
  }

 private:
  struct Best {
    double value = -std::numeric_limits<double>::infinity();
    int epoch = -1;
  };
  static void consider(Best& best, double value, int epoch) {
    if (std::isnan(value)) return;
    if (best.epoch < 0 || value > best.value) best = {value, epoch};
  }
  std::set<int> keep_;
  Best best_avg_;
  Best best_wg_;
  Best best_train_wg_;
};

}  // namespace

TrainResult train(const MlpModel& initial, const TrainSet& train_set, const std::optional<EvalSet>& val,
                  const TrainConfig& config) {
  g_training_invocations.fetch_add(1);
  config.validate();
  if (train_set.data == nullptr) throw PreconditionError("training set has no dataset");
  if (train_set.indices.empty()) throw InsufficientDataError("training set is empty");
  const GroupedDataset& data = *train_set.data;
  if (data.input_dim() != initial.input_dim())
    throw ShapeError("model expects " + std::to_string(initial.input_dim()) + " inputs, dataset has " +
                     std::to_string(data.input_dim()));
  if (train_set.has_groups() && train_set.groups.size() != train_set.indices.size())
    throw ShapeError("training group ids must align with training indices");
  for (int e : config.keep_epochs)
    if (e < 0 || e > config.epochs)
      throw RangeError("requested checkpoint epoch " + std::to_string(e) + " outside [0, " +
                       std::to_string(config.epochs) + "]");

  const bool needs_groups = config.objective != Objective::erm || config.sampling == Sampling::group_balanced;
  if (needs_groups && !train_set.has_groups())
    throw PreconditionError("objective '" + to_string(config.objective) + "' requires group labels");
  const int G = train_set.num_groups;

  // Group sizes over the training rows; gdro and subsample need every group.
  std::vector<std::size_t> group_sizes;
  if (train_set.has_groups()) {
    group_sizes.assign(static_cast<std::size_t>(G), 0);
    for (int g : train_set.groups) {
      if (g < 0 || g >= G) throw RangeError("training group id " + std::to_string(g) + " out of range");
      ++group_sizes[static_cast<std::size_t>(g)];
    }
    const bool all_required = config.objective == Objective::gdro || config.objective == Objective::subsample ||
                              config.sampling == Sampling::group_balanced;
    if (all_required)
      for (int g = 0; g < G; ++g)
        if (group_sizes[static_cast<std::size_t>(g)] == 0)
          throw EmptyGroupError("group " + std::to_string(g) +
                                    " has no training examples: cannot sample any minority-group example",
                                g);
  }

  // Row -> group lookup for batch assembly.
  std::vector<int> group_of_row;
  if (train_set.has_groups()) {
    group_of_row.assign(data.size(), -1);
    for (std::size_t i = 0; i < train_set.indices.size(); ++i)
      group_of_row.at(train_set.indices[i]) = train_set.groups[i];
  }

  TrainResult result;
  result.trained_indices = train_set.indices;
  std::vector<int> trained_groups = train_set.groups;
  if (config.objective == Objective::subsample) {
    result.trained_indices = subsample_to_minority(train_set.indices, train_set.groups, G,
                                                   mix_seed(config.seed, {0x5375ULL}));
    trained_groups.clear();
    for (std::size_t r : result.trained_indices) trained_groups.push_back(group_of_row[r]);
    group_sizes.assign(static_cast<std::size_t>(G), 0);
    for (int g : trained_groups) ++group_sizes[static_cast<std::size_t>(g)];
  }

  // Inputs in the trained model's input space. Head-only training runs the
  // frozen extractor once and trains the head as a one-layer model.
  const bool head_only = config.scope == UpdateScope::head_only;
  MlpModel model = head_only ? initial.head_model() : initial;
  const Matrix train_inputs = head_only ? extract_features(initial, data.features()) : data.features();
  Matrix val_inputs;
  std::vector<int> val_groups;
  std::vector<std::size_t> val_rows;
  if (val) {
    if (val->data == nullptr) throw PreconditionError("eval set has no dataset");
    if (val->data->input_dim() != initial.input_dim()) throw ShapeError("eval set has the wrong input dimension");
    val_inputs = head_only ? extract_features(initial, val->data->features()) : val->data->features();
    val_rows = val->indices.empty() ? val->data->all_indices() : val->indices;
    val_groups = val->data->groups(val_rows);
  }

  auto compose = [&](const MlpModel& trained) {
    if (!head_only) return trained;
    MlpModel full = initial;
    full.set_head(trained.head());
    return full;
  };

  std::unique_ptr<BatchStream> stream;
  const bool balanced = config.sampling == Sampling::group_balanced ||
                        (config.sampling == Sampling::automatic && config.objective == Objective::gdro);
  if (balanced)
    stream = std::make_unique<GroupBalancedBatches>(result.trained_indices, trained_groups, G, config.batch_size,
                                                    config.seed);
  else
    stream = std::make_unique<ShuffledBatches>(result.trained_indices, config.batch_size, config.seed);

  std::optional<GdroState> gdro;
  if (config.objective == Objective::gdro)
    gdro = GdroState::uniform(group_sizes, config.gdro_step_size, config.group_adjustment);

  Retention retention(config.keep_epochs);
  const std::set<int> keep_epochs(config.keep_epochs.begin(), config.keep_epochs.end());
  auto record_epoch = [&](int epoch) {
    EpochRecord r;
    r.epoch = epoch;
    const auto tr = evaluate_rows(model, train_inputs, result.trained_indices, data.labels(), trained_groups, G,
                                  Weighting::plain, {});
    r.train_loss = tr.loss;
    r.train_accuracy = tr.accuracy;
    r.train_group_loss = tr.group_loss;
    r.train_group_accuracy = tr.group_accuracy;
    r.train_wg_accuracy = tr.worst;
    if (val) {
      const auto ve = evaluate_rows(model, val_inputs, val_rows, val->data->labels(), val_groups,
                                    val->data->num_groups(), val->weighting, val->train_proportions);
      r.val_group_loss = ve.group_loss;
      r.val_group_accuracy = ve.group_accuracy;
      r.val_avg_accuracy = ve.average;
      r.val_wg_accuracy = ve.worst;
    } else {
      r.val_avg_accuracy = kNaN;
      r.val_wg_accuracy = kNaN;
    }
    if (gdro) r.q = gdro->q;
    retention.offer(r, compose(model), result.checkpoints);
    result.records.push_back(std::move(r));
  };

  record_epoch(0);
  const SgdOptions sgd{config.lr, config.momentum, config.l2, UpdateScope::full};
  SgdVelocity velocity;
  std::vector<int> batch_labels;
  std::vector<int> batch_groups;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t b = 0; b < stream->batches_per_epoch(); ++b) {
      const Batch batch = stream->next();
      if (batch.has_duplicates) ++result.duplicate_batches;
      const auto n = batch.indices.size();
      Matrix x(static_cast<Eigen::Index>(n), train_inputs.cols());
      batch_labels.resize(n);
      batch_groups.resize(train_set.has_groups() ? n : 0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = batch.indices[i];
        x.row(static_cast<Eigen::Index>(i)) = train_inputs.row(static_cast<Eigen::Index>(row));
        batch_labels[i] = data.labels()[row];
        if (train_set.has_groups()) batch_groups[i] = group_of_row[row];
      }

      LossAndGradients lg;
      if (config.objective == Objective::gdro) {
        const ForwardTrace trace = forward_trace(model, x);
        auto report = group_losses(cross_entropy(trace.logits(), batch_labels), batch_groups, G);
        const auto adjusted = adjust_losses(report, gdro->adjustment, gdro->group_sizes);
        *gdro = gdro_update_q(*gdro, adjusted, report.count);
        const auto weighted = gdro_weighted_loss(*gdro, report, adjusted, batch_groups);
        lg = backward(model, trace, batch_labels, weighted.example_weights);
      } else if (config.objective == Objective::reweight) {
        lg = backward(model, x, batch_labels, reweight_weights(batch_groups, group_sizes));
      } else {
        const std::vector<double> ones(n, 1.0);
        lg = backward(model, x, batch_labels, ones);
      }
      sgd_step(model, lg.grads, sgd, velocity);
      if (!model.all_finite())
        throw Error("training diverged: non-finite parameters at epoch " + std::to_string(epoch));
    }
    if (epoch % config.eval_every == 0 || epoch == config.epochs || keep_epochs.contains(epoch))
      record_epoch(epoch);
  }
  result.gdro = std::move(gdro);
  return result;
}

namespace {

int best_epoch(std::span<const EpochRecord> records, double EpochRecord::*field, const char* what) {
  if (records.empty()) throw PreconditionError("no records to select from");
  int best = -1;
  double value = 0.0;
  for (const auto& r : records) {
    const double v = r.*field;
    if (std::isnan(v)) continue;
    if (best < 0 || v > value) {
      best = r.epoch;
      value = v;
    }
  }
  if (best < 0) throw PreconditionError(std::string("no record carries ") + what);
  return best;
}

}  // namespace

int best_epoch_by_avg_val(std::span<const EpochRecord> records) {
  return best_epoch(records, &EpochRecord::val_avg_accuracy, "a validation average accuracy");
}
int best_epoch_by_wg_val(std::span<const EpochRecord> records) {
  return best_epoch(records, &EpochRecord::val_wg_accuracy, "a validation worst-group accuracy");
}
int best_epoch_by_train_wg(std::span<const EpochRecord> records) {
  return best_epoch(records, &EpochRecord::train_wg_accuracy, "a train worst-group accuracy");
}

const Checkpoint& select_by_avg_val(std::span<const EpochRecord> records, const CheckpointSet& checkpoints) {
  return checkpoints.at(best_epoch_by_avg_val(records));
}
const Checkpoint& select_by_wg_val(std::span<const EpochRecord> records, const CheckpointSet& checkpoints) {
  return checkpoints.at(best_epoch_by_wg_val(records));
}
const Checkpoint& select_by_train_wg(std::span<const EpochRecord> records, const CheckpointSet& checkpoints) {
  return checkpoints.at(best_epoch_by_train_wg(records));
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace

void write_curves_long(std::span<const EpochRecord> records, std::ostream& out) {
  out << "epoch,split,group,loss,acc\n";
  for (const auto& r : records) {
    out << r.epoch << ",train,all," << fmt(r.train_loss) << ',' << fmt(r.train_accuracy) << '\n';
    for (std::size_t g = 0; g < r.train_group_accuracy.size(); ++g)
      out << r.epoch << ",train," << g << ',' << fmt(r.train_group_loss[g]) << ','
          << fmt(r.train_group_accuracy[g]) << '\n';
    for (std::size_t g = 0; g < r.val_group_accuracy.size(); ++g)
      out << r.epoch << ",val," << g << ',' << fmt(r.val_group_loss[g]) << ',' << fmt(r.val_group_accuracy[g])
          << '\n';
  }
}

void write_curves_summary(std::span<const EpochRecord> records, std::ostream& out) {
  out << "epoch,val_avg,val_wg\n";
  for (const auto& r : records)
    out << r.epoch << ',' << fmt(r.val_avg_accuracy) << ',' << fmt(r.val_wg_accuracy) << '\n';
}

}  // namespace crois
