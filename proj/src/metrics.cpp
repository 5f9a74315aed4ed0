#include "crois/metrics.hpp"

#include <cmath>
#include <limits>

#include "crois/errors.hpp"

namespace crois {

std::string to_string(Weighting w) { return w == Weighting::plain ? "plain" : "train_weighted"; }

Weighting weighting_from_string(const std::string& s) {
  if (s == "plain") return Weighting::plain;
  if (s == "train_weighted") return Weighting::train_weighted;
  throw ConfigError("unknown weighting '" + s + "' (expected plain or train_weighted)");
}

int GroupMetrics::worst_group() const {
  int worst = -1;
  for (std::size_t g = 0; g < group_accuracy.size(); ++g) {
    if (group_count[g] == 0) continue;
    if (worst < 0 || group_accuracy[g] < group_accuracy[static_cast<std::size_t>(worst)])
      worst = static_cast<int>(g);
  }
  return worst;
}

GroupMetrics evaluate_predictions(std::span<const int> predictions, std::span<const int> labels,
                                  std::span<const int> groups, int num_groups, Weighting weighting,
                                  std::span<const double> train_proportions) {
  if (predictions.size() != labels.size() || labels.size() != groups.size())
    throw ShapeError("predictions, labels, and groups must be aligned");
  const auto G = static_cast<std::size_t>(num_groups);
  if (weighting == Weighting::train_weighted) {
    if (train_proportions.size() != G)
      throw PreconditionError("train_weighted evaluation needs one training proportion per group");
    double total = 0.0;
    for (double p : train_proportions) {
      if (!(p >= 0.0)) throw RangeError("training proportions must be nonnegative");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw RangeError("training proportions must sum to 1");
  }

  GroupMetrics m;
  m.weighting = weighting;
  m.group_count.assign(G, 0);
  std::vector<std::size_t> correct(G, 0);
  std::size_t total_correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int g = groups[i];
    if (g < 0 || g >= num_groups) throw RangeError("group id " + std::to_string(g) + " out of range");
    ++m.group_count[static_cast<std::size_t>(g)];
    if (predictions[i] == labels[i]) {
      ++correct[static_cast<std::size_t>(g)];
      ++total_correct;
    }
  }

  m.group_accuracy.assign(G, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t g = 0; g < G; ++g) {
    if (m.group_count[g] == 0) {
      m.warnings.push_back("group " + std::to_string(g) + " absent from evaluation split");
      continue;
    }
    m.group_accuracy[g] = static_cast<double>(correct[g]) / static_cast<double>(m.group_count[g]);
  }
  const int worst = m.worst_group();
  m.worst_group_accuracy = worst < 0 ? std::numeric_limits<double>::quiet_NaN()
                                     : m.group_accuracy[static_cast<std::size_t>(worst)];

  if (weighting == Weighting::plain) {
    m.average_accuracy = labels.empty() ? std::numeric_limits<double>::quiet_NaN()
                                        : static_cast<double>(total_correct) / static_cast<double>(labels.size());
  } else {
    double acc = 0.0;
    double mass = 0.0;
    for (std::size_t g = 0; g < G; ++g) {
      if (m.group_count[g] == 0) continue;
      acc += train_proportions[g] * m.group_accuracy[g];
      mass += train_proportions[g];
    }
    m.average_accuracy = mass > 0.0 ? acc / mass : std::numeric_limits<double>::quiet_NaN();
  }
  return m;
}

GroupMetrics evaluate(const MlpModel& model, const GroupedDataset& dataset, Weighting weighting,
                      std::span<const double> train_proportions) {
  const auto preds = predict(forward(model, dataset.features()).logits);
  const auto groups = dataset.all_groups();
  return evaluate_predictions(preds, dataset.labels(), groups, dataset.num_groups(), weighting,
                              train_proportions);
}

std::vector<double> group_proportions(const GroupedDataset& dataset, std::span<const std::size_t> rows) {
  if (rows.empty()) throw InsufficientDataError("cannot compute proportions of an empty set");
  const auto counts = dataset.group_counts(rows);
  std::vector<double> out(counts.size());
  for (std::size_t g = 0; g < counts.size(); ++g)
    out[g] = static_cast<double>(counts[g]) / static_cast<double>(rows.size());
  return out;
}

FieldSummary summarize(std::span<const double> values) {
  FieldSummary s;
  if (values.empty()) throw InsufficientDataError("nothing to summarize");
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

MetricsSummary aggregate_seeds(std::span<const GroupMetrics> runs) {
  if (runs.empty()) throw InsufficientDataError("aggregate_seeds needs at least one run");
  MetricsSummary out;
  out.runs = runs.size();
  std::vector<double> avg;
  std::vector<double> wg;
  for (const auto& r : runs) {
    avg.push_back(r.average_accuracy);
    wg.push_back(r.worst_group_accuracy);
  }
  out.average_accuracy = summarize(avg);
  out.worst_group_accuracy = summarize(wg);
  const std::size_t G = runs.front().group_accuracy.size();
  for (std::size_t g = 0; g < G; ++g) {
    std::vector<double> vals;
    for (const auto& r : runs) {
      if (r.group_accuracy.size() != G) throw ShapeError("runs disagree on group count");
      vals.push_back(r.group_accuracy[g]);
    }
    out.group_accuracy.push_back(summarize(vals));
  }
  return out;
}

}  // namespace crois
