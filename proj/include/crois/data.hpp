#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "crois/diffnet.hpp"

namespace crois {

/// Counts reads of group information (attributes or group ids) on rows that
/// are flagged as restricted. A recipe that must not use group labels on some
/// rows flags them and checks that the count stays at zero.
class LabelAudit {
 public:
  explicit LabelAudit(std::size_t num_rows) : restricted_(num_rows, false) {}

  void restrict_rows(std::span<const std::size_t> rows);
  void restrict_all();
  bool is_restricted(std::size_t row) const { return row < restricted_.size() && restricted_[row]; }

  void record(std::size_t row) const {
    if (is_restricted(row)) reads_.fetch_add(1, std::memory_order_relaxed);
  }
  std::size_t restricted_reads() const { return reads_.load(std::memory_order_relaxed); }

 private:
  std::vector<bool> restricted_;
  mutable std::atomic<std::size_t> reads_{0};
};

/// Features, class labels, and attribute labels, with group id
/// g = y * num_attributes + a. Group information is only reachable through
/// accessors that report to an attached LabelAudit.
class GroupedDataset {
 public:
  GroupedDataset() = default;
  GroupedDataset(std::string name, Matrix features, std::vector<int> labels,
                 std::vector<int> attributes, int num_classes, int num_attributes);

  const std::string& name() const { return name_; }
  const Matrix& features() const { return features_; }
  const std::vector<int>& labels() const { return labels_; }

  std::size_t size() const { return labels_.size(); }
  int input_dim() const { return static_cast<int>(features_.cols()); }
  int num_classes() const { return num_classes_; }
  int num_attributes() const { return num_attributes_; }
  int num_groups() const { return num_classes_ * num_attributes_; }

  int attribute(std::size_t row) const;
  int group(std::size_t row) const;
  std::vector<int> groups(std::span<const std::size_t> rows) const;
  std::vector<int> all_groups() const;
  /// Member count of each group among `rows`.
  std::vector<std::size_t> group_counts(std::span<const std::size_t> rows) const;

  std::vector<std::size_t> all_indices() const;
  Matrix rows(std::span<const std::size_t> rows) const;
  std::vector<int> labels_at(std::span<const std::size_t> rows) const;
  /// New dataset holding `rows` in the given order; no audit attached.
  GroupedDataset subset(std::span<const std::size_t> rows, std::string name = {}) const;

  void attach_audit(std::shared_ptr<const LabelAudit> audit) { audit_ = std::move(audit); }
  void detach_audit() { audit_.reset(); }

  friend bool operator==(const GroupedDataset& a, const GroupedDataset& b);

 private:
  std::string name_;
  Matrix features_;
  std::vector<int> labels_;
  std::vector<int> attributes_;
  int num_classes_ = 0;
  int num_attributes_ = 0;
  std::shared_ptr<const LabelAudit> audit_;
};

/// Train/val/test triple. When `skewed_eval` is set the eval splits do not
/// follow the training group distribution and averages should be reported
/// with training-distribution group weights.
struct DatasetSplits {
  GroupedDataset train;
  GroupedDataset val;
  GroupedDataset test;
  bool skewed_eval = false;
};

/// Two-class, two-attribute Gaussian construction. Label y and attribute a
/// agree with probability `majority_fraction`; features are
///   [ (2y-1) core_margin + noise_scale * N(0,1),
///     (2a-1) spurious_margin + noise_scale * N(0,1),
///     noise_dims coordinates of noise_scale * N(0,1) ].
struct SyntheticSpec {
  std::size_t n = 1000;
  double majority_fraction = 0.95;
  double core_margin = 1.0;
  double spurious_margin = 3.0;
  int noise_dims = 0;
  double noise_scale = 1.0;
  std::uint64_t seed = 0;
};

/// Exact group sizes for (n, rho), in group order (y,a) = 00, 01, 10, 11:
/// minority = round(n (1 - rho) / 2) for groups 01 and 10,
/// group 00 = round(n rho / 2), group 11 takes the remainder.
std::vector<std::size_t> synthetic_group_counts(std::size_t n, double majority_fraction);

GroupedDataset generate_synthetic(const SyntheticSpec& spec);

struct SyntheticSplitsSpec {
  SyntheticSpec train;
  std::size_t n_val = 1000;
  std::size_t n_test = 1000;
  /// Majority fraction of the eval splits; 0.5 gives balanced groups.
  double eval_majority_fraction = 0.5;
};

DatasetSplits generate_synthetic_splits(const SyntheticSplitsSpec& spec);

struct CsvLoadOptions {
  std::optional<int> num_classes;
  std::optional<int> num_attributes;
  std::string name;
};

/// Header-driven reader for `label,attribute,f0,...,f{d-1}` files.
GroupedDataset load_embedding_csv(const std::filesystem::path& path, const CsvLoadOptions& options = {});
void save_embedding_csv(const GroupedDataset& dataset, const std::filesystem::path& path);

struct SplitPlan {
  std::vector<std::size_t> unlabeled;   // D_U
  std::vector<std::size_t> labeled;     // D_L
  std::vector<std::size_t> validation;  // D_val when drawn from the same pool
  double p = 0.0;
  std::uint64_t seed = 0;
  bool stratified = false;
  std::vector<std::string> warnings;
};

/// Partitions `indices` so that |labeled| = round(p * n). Both sides are
/// returned sorted.
SplitPlan make_split(std::span<const std::size_t> indices, double p, std::uint64_t seed);
/// Same over all rows of `dataset`; `stratify` allocates per group with
/// largest-remainder rounding so the labeled total is still round(p * n).
SplitPlan make_split(const GroupedDataset& dataset, double p, std::uint64_t seed, bool stratify = false);

/// Disjoint halves; for odd sizes the retraining half gets the extra element.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_val_in_half(
    std::span<const std::size_t> indices, std::uint64_t seed);

/// Uniform random subset of size max(1, round(fraction * n)), sorted.
std::vector<std::size_t> shrink_indices(std::span<const std::size_t> indices, double fraction,
                                        std::uint64_t seed);

/// Downsamples every group without replacement to the smallest group size.
/// `groups` is aligned with `indices`. Returns sorted indices.
std::vector<std::size_t> subsample_to_minority(std::span<const std::size_t> indices,
                                               std::span<const int> groups, int num_groups,
                                               std::uint64_t seed);

struct Batch {
  std::vector<std::size_t> indices;
  /// Some index occurs more than once in this batch.
  bool has_duplicates = false;
  /// A group ran out of fresh examples while filling this batch and was
  /// reshuffled (sampling with replacement within the epoch).
  bool with_replacement = false;
};

class BatchStream {
 public:
  virtual ~BatchStream() = default;
  virtual Batch next() = 0;
  virtual std::size_t batches_per_epoch() const = 0;
};

/// Plain reshuffle-per-epoch batches; the last batch of an epoch may be short.
class ShuffledBatches final : public BatchStream {
 public:
  ShuffledBatches(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed);
  Batch next() override;
  std::size_t batches_per_epoch() const override;

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

/// Every batch holds batch_size / num_groups examples of each group. Each
/// group cycles through its own permutation and is reshuffled when exhausted.
/// One epoch is ceil(n / batch_size) batches.
class GroupBalancedBatches final : public BatchStream {
 public:
  GroupBalancedBatches(std::span<const std::size_t> indices, std::span<const int> groups,
                       int num_groups, std::size_t batch_size, std::uint64_t seed);
  Batch next() override;
  std::size_t batches_per_epoch() const override { return batches_per_epoch_; }
  std::size_t quota() const { return quota_; }

 private:
  struct Pool {
    std::vector<std::size_t> members;
    std::size_t cursor = 0;
  };
  std::vector<Pool> pools_;
  std::size_t quota_;
  std::size_t batches_per_epoch_;
  std::mt19937_64 rng_;
};

}  // namespace crois
