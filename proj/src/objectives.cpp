#include "crois/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "crois/errors.hpp"

namespace crois {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

GroupLossReport group_losses(const Vector& example_losses, std::span<const int> groups, int num_groups) {
  if (static_cast<std::size_t>(example_losses.size()) != groups.size())
    throw ShapeError("per-example losses and group ids must be aligned");
  const auto G = static_cast<std::size_t>(num_groups);
  std::vector<double> sums(G, 0.0);
  GroupLossReport report{std::vector<double>(G, kNaN), std::vector<std::size_t>(G, 0), kNaN};
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const int g = groups[i];
    if (g < 0 || g >= num_groups) throw RangeError("group id " + std::to_string(g) + " out of range");
    sums[static_cast<std::size_t>(g)] += example_losses(static_cast<Eigen::Index>(i));
    ++report.count[static_cast<std::size_t>(g)];
  }
  for (std::size_t g = 0; g < G; ++g)
    if (report.count[g] > 0) report.loss[g] = sums[g] / static_cast<double>(report.count[g]);
  return report;
}

GroupLossReport group_losses(const Matrix& logits, std::span<const int> labels, std::span<const int> groups,
                             int num_groups) {
  return group_losses(cross_entropy(logits, labels), groups, num_groups);
}

std::vector<double> adjust_losses(const GroupLossReport& report, double adjustment,
                                  std::span<const std::size_t> group_sizes) {
  if (adjustment < 0.0) throw RangeError("group adjustment must be >= 0");
  if (group_sizes.size() != report.loss.size()) throw ShapeError("group size vector has the wrong length");
  std::vector<double> out(report.loss.size());
  for (std::size_t g = 0; g < out.size(); ++g) {
    if (group_sizes[g] == 0)
      throw EmptyGroupError("group " + std::to_string(g) + " has no training examples", static_cast<int>(g));
    out[g] = report.loss[g] + adjustment / std::sqrt(static_cast<double>(group_sizes[g]));
  }
  return out;
}

GdroState GdroState::uniform(std::vector<std::size_t> group_sizes, double step_size, double adjustment) {
  if (group_sizes.empty()) throw PreconditionError("need at least one group");
  if (!(step_size >= 0.0)) throw RangeError("GDRO step size must be >= 0");
  for (std::size_t g = 0; g < group_sizes.size(); ++g)
    if (group_sizes[g] == 0)
      throw EmptyGroupError("group " + std::to_string(g) + " has no training examples", static_cast<int>(g));
  GdroState s;
  s.q.assign(group_sizes.size(), 1.0 / static_cast<double>(group_sizes.size()));
  s.step_size = step_size;
  s.adjustment = adjustment;
  s.group_sizes = std::move(group_sizes);
  return s;
}

GdroState gdro_update_q(const GdroState& state, std::span<const double> adjusted_losses,
                        std::span<const std::size_t> batch_counts) {
  const std::size_t G = state.q.size();
  if (adjusted_losses.size() != G || batch_counts.size() != G)
    throw ShapeError("loss and count vectors must have one entry per group");
  std::vector<double> exponent(G, 0.0);
  for (std::size_t g = 0; g < G; ++g) {
    if (batch_counts[g] == 0) continue;
    if (!std::isfinite(adjusted_losses[g]))
      throw RangeError("non-finite loss for observed group " + std::to_string(g));
    exponent[g] = state.step_size * adjusted_losses[g];
  }
  const double shift = *std::max_element(exponent.begin(), exponent.end());
  GdroState next = state;
  double total = 0.0;
  for (std::size_t g = 0; g < G; ++g) {
    next.q[g] = state.q[g] * std::exp(exponent[g] - shift);
    total += next.q[g];
  }
  for (double& qg : next.q) qg /= total;
  return next;
}

WeightedLoss gdro_weighted_loss(const GdroState& state, GroupLossReport& report,
                                std::span<const double> adjusted_losses, std::span<const int> batch_groups) {
  const std::size_t G = state.q.size();
  if (adjusted_losses.size() != G || report.count.size() != G)
    throw ShapeError("loss vectors must have one entry per group");
  WeightedLoss out;
  for (std::size_t g = 0; g < G; ++g)
    if (report.count[g] > 0) out.loss += state.q[g] * adjusted_losses[g];
  report.weighted_total = out.loss;
  out.example_weights.reserve(batch_groups.size());
  for (int g : batch_groups) {
    const auto gi = static_cast<std::size_t>(g);
    if (g < 0 || gi >= G || report.count[gi] == 0)
      throw ShapeError("batch group ids disagree with the loss report");
    out.example_weights.push_back(state.q[gi] / static_cast<double>(report.count[gi]));
  }
  return out;
}

std::vector<double> reweight_weights(std::span<const int> groups, std::span<const std::size_t> group_sizes) {
  std::vector<double> w;
  w.reserve(groups.size());
  double total = 0.0;
  for (int g : groups) {
    if (g < 0 || static_cast<std::size_t>(g) >= group_sizes.size())
      throw RangeError("group id " + std::to_string(g) + " out of range");
    const auto n = group_sizes[static_cast<std::size_t>(g)];
    if (n == 0) throw EmptyGroupError("group " + std::to_string(g) + " has no training examples", g);
    w.push_back(1.0 / static_cast<double>(n));
    total += w.back();
  }
  if (w.empty()) return w;
  const double scale = static_cast<double>(w.size()) / total;
  for (double& wi : w) wi *= scale;
  return w;
}

std::vector<int> error_set_pseudolabels(const MlpModel& model, const GroupedDataset& dataset) {
  const auto preds = predict(forward(model, dataset.features()).logits);
  std::vector<int> flags(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) flags[i] = preds[i] == dataset.labels()[i] ? 0 : 1;
  return flags;
}

std::vector<int> pseudo_groups(std::span<const int> labels, std::span<const int> error_flags) {
  if (labels.size() != error_flags.size()) throw ShapeError("labels and error flags must be aligned");
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = labels[i] * 2 + error_flags[i];
  return out;
}

}  // namespace crois
