#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "crois/data.hpp"
#include "crois/diffnet.hpp"

namespace crois {

/// Per-group mean loss over one batch. Groups absent from the batch carry
/// count 0 and a NaN loss.
struct GroupLossReport {
  std::vector<double> loss;
  std::vector<std::size_t> count;
  /// sum_g q_g * adjusted_g over present groups; NaN until a weighting is applied.
  double weighted_total;

  bool present(std::size_t g) const { return count[g] > 0; }
};

GroupLossReport group_losses(const Vector& example_losses, std::span<const int> groups, int num_groups);
GroupLossReport group_losses(const Matrix& logits, std::span<const int> labels, std::span<const int> groups,
                             int num_groups);

/// loss_g + C / sqrt(n_g). n_g are training-set group sizes.
std::vector<double> adjust_losses(const GroupLossReport& report, double adjustment,
                                  std::span<const std::size_t> group_sizes);

/// Adversarial group weights for group DRO.
struct GdroState {
  std::vector<double> q;
  double step_size = 0.01;
  double adjustment = 0.0;
  std::vector<std::size_t> group_sizes;

  static GdroState uniform(std::vector<std::size_t> group_sizes, double step_size, double adjustment);
  std::size_t num_groups() const { return q.size(); }
};

/// Exponentiated-gradient ascent on the simplex:
///   q_g <- q_g * exp(eta * loss_g) for groups present in the batch,
///   q_g unchanged (multiplier 1) for absent groups, then renormalize.
/// The exponent is shifted by its maximum before exponentiation.
GdroState gdro_update_q(const GdroState& state, std::span<const double> adjusted_losses,
                        std::span<const std::size_t> batch_counts);

struct WeightedLoss {
  double loss = 0.0;
  /// q_g / (count of g in batch) for each example; summing w_i * CE_i gives
  /// the robust loss minus the constant adjustment terms.
  std::vector<double> example_weights;
};

/// Robust objective sum_g q_g * adjusted_g for one batch. Sets
/// report.weighted_total.
WeightedLoss gdro_weighted_loss(const GdroState& state, GroupLossReport& report,
                                std::span<const double> adjusted_losses, std::span<const int> batch_groups);

/// w_i proportional to 1 / n_{g(i)}, normalized to mean 1 over the batch.
std::vector<double> reweight_weights(std::span<const int> groups, std::span<const std::size_t> group_sizes);

/// 1 where `model` misclassifies the example, 0 where it is correct.
std::vector<int> error_set_pseudolabels(const MlpModel& model, const GroupedDataset& dataset);

/// Pseudo group id y * 2 + error flag: 2k groups for k classes.
std::vector<int> pseudo_groups(std::span<const int> labels, std::span<const int> error_flags);

}  // namespace crois
