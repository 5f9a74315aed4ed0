#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crois/data.hpp"
#include "crois/diffnet.hpp"

namespace crois {

enum class Weighting { plain, train_weighted };

std::string to_string(Weighting w);
Weighting weighting_from_string(const std::string& s);

/// 0/1 accuracy per group. Groups absent from the evaluated split have count 0,
/// a NaN accuracy, and are left out of the worst-group minimum.
struct GroupMetrics {
  std::vector<double> group_accuracy;
  std::vector<std::size_t> group_count;
  double worst_group_accuracy = 0.0;
  double average_accuracy = 0.0;
  Weighting weighting = Weighting::plain;
  std::vector<std::string> warnings;

  /// Lowest-id group attaining the worst-group accuracy, or -1 if none present.
  int worst_group() const;
};

/// plain: overall fraction correct.
/// train_weighted: sum_g pi_g acc_g over present groups, renormalized by the
/// mass of present groups.
GroupMetrics evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                  std::span<const int> groups, int num_groups, Weighting weighting,
                                  std::span<const double> train_proportions = {});

GroupMetrics evaluate(const MlpModel& model, const GroupedDataset& dataset, Weighting weighting,
                      std::span<const double> train_proportions = {});

/// Fraction of `rows` in each group.
std::vector<double> group_proportions(const GroupedDataset& dataset, std::span<const std::size_t> rows);

struct FieldSummary {
  double mean = 0.0;
  std::optional<double> stddev;  // sample (n - 1) standard deviation; needs >= 2 values
};

struct MetricsSummary {
  std::size_t runs = 0;
  FieldSummary average_accuracy;
  FieldSummary worst_group_accuracy;
  std::vector<FieldSummary> group_accuracy;
};

FieldSummary summarize(std::span<const double> values);
MetricsSummary aggregate_seeds(std::span<const GroupMetrics> runs);

}  // namespace crois
