#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "crois/errors.hpp"
#include "crois/metrics.hpp"

using namespace crois;

namespace {

// Group A (id 0): 9 of 10 correct; group B (id 1): 5 of 10 correct.
struct TwoGroups {
  std::vector<int> preds;
  std::vector<int> labels;
  std::vector<int> groups;
  TwoGroups() {
    for (int i = 0; i < 20; ++i) {
      labels.push_back(0);
      groups.push_back(i < 10 ? 0 : 1);
      const bool correct = i < 10 ? i < 9 : i < 15;
      preds.push_back(correct ? 0 : 1);
    }
  }
};

}  // namespace

TEST_CASE("evaluate_predictions worked examples") {
  const TwoGroups t;
  const auto plain = evaluate_predictions(t.preds, t.labels, t.groups, 2, Weighting::plain);
  CHECK(plain.average_accuracy == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(plain.worst_group_accuracy == 0.5);
  CHECK(plain.worst_group() == 1);

  const std::vector<double> props = {0.9, 0.1};
  const auto weighted = evaluate_predictions(t.preds, t.labels, t.groups, 2, Weighting::train_weighted, props);
  CHECK(weighted.average_accuracy == 0.9 * 0.9 + 0.1 * 0.5);
  CHECK(std::abs(weighted.average_accuracy - 0.86) < 1e-15);

  const std::vector<int> all_right(20, 0);
  const auto perfect = evaluate_predictions(all_right, t.labels, t.groups, 2, Weighting::plain);
  CHECK(perfect.average_accuracy == 1.0);
  CHECK(perfect.worst_group_accuracy == 1.0);
  CHECK(perfect.group_accuracy == std::vector<double>{1.0, 1.0});
}

TEST_CASE("evaluate_predictions preconditions and absent groups") {
  const TwoGroups t;
  CHECK_THROWS_AS(evaluate_predictions(t.preds, t.labels, t.groups, 2, Weighting::train_weighted), PreconditionError);
  const std::vector<double> bad = {0.5, 0.6};
  CHECK_THROWS_AS(evaluate_predictions(t.preds, t.labels, t.groups, 2, Weighting::train_weighted, bad), RangeError);

  const auto m = evaluate_predictions(t.preds, t.labels, t.groups, 3, Weighting::plain);
  CHECK(std::isnan(m.group_accuracy[2]));
  CHECK(m.worst_group_accuracy == 0.5);
  CHECK(m.warnings.size() == 1);
}

TEST_CASE("metric invariants on random predictions") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const int G = 2 + static_cast<int>(rng() % 4);
    const std::size_t n = 20 + rng() % 50;
    std::vector<int> preds(n), labels(n), groups(n);
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>(rng() % 2);
      preds[i] = static_cast<int>(rng() % 2);
      groups[i] = static_cast<int>(i < static_cast<std::size_t>(G) ? i : rng() % static_cast<unsigned>(G));
    }
    const auto m = evaluate_predictions(preds, labels, groups, G, Weighting::plain);
    const double best = *std::max_element(m.group_accuracy.begin(), m.group_accuracy.end());
    CHECK(m.worst_group_accuracy <= m.average_accuracy + 1e-15);
    CHECK(m.average_accuracy <= best + 1e-15);

    const std::vector<double> uniform(static_cast<std::size_t>(G), 1.0 / G);
    const auto u = evaluate_predictions(preds, labels, groups, G, Weighting::train_weighted, uniform);
    double mean = 0.0;
    for (double a : m.group_accuracy) mean += a / G;
    CHECK(u.average_accuracy == doctest::Approx(mean).epsilon(1e-14));

    // Row permutation invariance.
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> p2(n), l2(n), g2(n);
    for (std::size_t i = 0; i < n; ++i) {
      p2[i] = preds[perm[i]];
      l2[i] = labels[perm[i]];
      g2[i] = groups[perm[i]];
    }
    const auto m2 = evaluate_predictions(p2, l2, g2, G, Weighting::plain);
    CHECK(m2.group_accuracy == m.group_accuracy);
    CHECK(m2.average_accuracy == m.average_accuracy);
  }
}

TEST_CASE("aggregate_seeds") {
  GroupMetrics a;
  a.group_accuracy = {0.8};
  a.group_count = {10};
  a.average_accuracy = 0.8;
  a.worst_group_accuracy = 0.8;
  GroupMetrics b = a;
  b.group_accuracy = {0.9};
  b.average_accuracy = 0.9;
  b.worst_group_accuracy = 0.9;

  const std::vector<GroupMetrics> one = {a};
  const auto single = aggregate_seeds(one);
  CHECK(single.average_accuracy.mean == 0.8);
  CHECK_FALSE(single.average_accuracy.stddev.has_value());

  const std::vector<GroupMetrics> two = {a, b};
  const auto s = aggregate_seeds(two);
  CHECK(s.average_accuracy.mean == doctest::Approx(0.85).epsilon(1e-15));
  REQUIRE(s.average_accuracy.stddev.has_value());
  CHECK(std::abs(*s.average_accuracy.stddev - 0.070710678) < 1e-9);
  CHECK(std::abs(*s.average_accuracy.stddev - std::sqrt(0.005)) < 1e-12);

  CHECK_THROWS_AS(aggregate_seeds(std::vector<GroupMetrics>{}), InsufficientDataError);
}

TEST_CASE("summarize matches a loop oracle") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 3; ++t) {
    std::vector<double> v(3 + t);
    for (auto& x : v) x = u(rng);
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    const auto s = summarize(v);
    CHECK(std::abs(s.mean - mean) < 1e-12);
    CHECK(std::abs(*s.stddev - sd) < 1e-12);
  }
}
