#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "crois/data.hpp"
#include "crois/errors.hpp"

using namespace crois;

namespace {

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

GroupedDataset tiny_dataset(const std::vector<int>& labels, const std::vector<int>& attrs) {
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) x(static_cast<Eigen::Index>(i), 0) = static_cast<double>(i);
  return GroupedDataset("tiny", x, labels, attrs, 2, 2);
}

}  // namespace

TEST_CASE("group ids encode (label, attribute)") {
  const GroupedDataset d = tiny_dataset({0, 0, 1, 1}, {0, 1, 0, 1});
  for (std::size_t i = 0; i < 4; ++i) CHECK(d.group(i) == d.labels()[i] * 2 + d.attribute(i));
  CHECK(d.num_groups() == 4);
  CHECK_THROWS_AS(tiny_dataset({0, 2}, {0, 0}), RangeError);
}

TEST_CASE("label audit counts reads on restricted rows only") {
  GroupedDataset d = tiny_dataset({0, 0, 1, 1}, {0, 1, 0, 1});
  auto audit = std::make_shared<LabelAudit>(d.size());
  d.attach_audit(audit);
  (void)d.group(0);
  CHECK(audit->restricted_reads() == 0);
  const std::vector<std::size_t> hidden = {1, 2};
  audit->restrict_rows(hidden);
  (void)d.group(0);
  (void)d.group(3);
  CHECK(audit->restricted_reads() == 0);
  (void)d.group(1);
  (void)d.attribute(2);
  CHECK(audit->restricted_reads() == 2);
  (void)d.all_groups();
  CHECK(audit->restricted_reads() == 4);
  // Labels and features are not group information.
  (void)d.labels();
  (void)d.rows(hidden);
  CHECK(audit->restricted_reads() == 4);
}

TEST_CASE("synthetic group counts") {
  CHECK(synthetic_group_counts(1000, 0.95) == std::vector<std::size_t>{475, 25, 25, 475});

  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> n_dist(40, 3000);
  std::uniform_real_distribution<double> rho_dist(0.55, 0.97);
  for (int t = 0; t < 100; ++t) {
    SyntheticSpec spec;
    spec.n = n_dist(rng);
    spec.majority_fraction = rho_dist(rng);
    spec.seed = rng();
    const auto expected = synthetic_group_counts(spec.n, spec.majority_fraction);
    const auto minority = static_cast<std::size_t>(std::llround(spec.n * (1 - spec.majority_fraction) / 2));
    CHECK(expected[1] == minority);
    CHECK(expected[2] == minority);
    CHECK(expected[0] == static_cast<std::size_t>(std::llround(spec.n * spec.majority_fraction / 2)));
    CHECK(std::accumulate(expected.begin(), expected.end(), std::size_t{0}) == spec.n);
    const GroupedDataset d = generate_synthetic(spec);
    CHECK(d.group_counts(d.all_indices()) == expected);
  }
}

TEST_CASE("synthetic generator preconditions") {
  SyntheticSpec spec;
  spec.majority_fraction = 0.5;
  CHECK_THROWS_AS(generate_synthetic(spec), PreconditionError);
  spec.majority_fraction = 0.5 + 1e-3;
  const auto counts = synthetic_group_counts(spec.n, spec.majority_fraction);
  for (auto c : counts) CHECK((c >= 249 && c <= 251));
  spec.majority_fraction = 0.999;
  spec.n = 100;
  CHECK_THROWS_AS(generate_synthetic(spec), EmptyGroupError);
  spec.majority_fraction = 0.9;
  spec.spurious_margin = 0.0;
  CHECK_THROWS_AS(generate_synthetic(spec), PreconditionError);
}

TEST_CASE("synthetic features: least squares leans on the spurious coordinate") {
  SyntheticSpec spec;
  spec.n = 4000;
  spec.majority_fraction = 0.95;
  spec.core_margin = 1.0;
  spec.spurious_margin = 3.0;
  spec.noise_dims = 2;
  spec.seed = 5;
  const GroupedDataset d = generate_synthetic(spec);
  REQUIRE(d.input_dim() == 4);
  // Normal equations for y in {-1, 1} on [1, x].
  Matrix A(static_cast<Eigen::Index>(d.size()), 5);
  Vector b(static_cast<Eigen::Index>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    A(r, 0) = 1.0;
    A.row(r).tail(4) = d.features().row(r);
    b(r) = d.labels()[i] == 1 ? 1.0 : -1.0;
  }
  const Vector w = (A.transpose() * A).ldlt().solve(A.transpose() * b);
  // Standardized coefficients: the spurious coordinate carries more weight.
  const auto sd = [&](Eigen::Index c) {
    const double mean = d.features().col(c).mean();
    return std::sqrt((d.features().col(c).array() - mean).square().mean());
  };
  CHECK(std::abs(w(2)) * sd(1) > std::abs(w(1)) * sd(0));
  // Core coordinate mean is +-core_margin by label.
  double core_pos = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.labels()[i] == 1) {
      core_pos += d.features()(static_cast<Eigen::Index>(i), 0);
      ++n_pos;
    }
  CHECK(core_pos / static_cast<double>(n_pos) == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("synthetic splits are deterministic and balanced on eval") {
  SyntheticSplitsSpec spec;
  spec.train.n = 500;
  spec.train.seed = 3;
  spec.n_val = 200;
  spec.n_test = 200;
  const auto a = generate_synthetic_splits(spec);
  const auto b = generate_synthetic_splits(spec);
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.val.group_counts(a.val.all_indices()) == std::vector<std::size_t>{50, 50, 50, 50});
  CHECK(a.skewed_eval);
  CHECK_FALSE(a.val.features() == a.test.features());
}

TEST_CASE("embedding CSV loading") {
  SUBCASE("two rows, header-driven column order") {
    const auto p1 = temp_file("crois_csv_a.csv");
    const auto p2 = temp_file("crois_csv_b.csv");
    write_file(p1, "label,attribute,f0,f1\n1,0,0.5,-2\n0,1,3,4.25\n");
    write_file(p2, "f1,attribute,extra,f0,label\n-2,0,x,0.5,1\n4.25,1,y,3,0\n");
    const auto a = load_embedding_csv(p1);
    const auto b = load_embedding_csv(p2);
    CHECK(a.features().rows() == 2);
    CHECK(a.features().cols() == 2);
    CHECK(a.group(0) == 2);
    CHECK(a.group(1) == 1);
    CHECK(a.features() == b.features());
    CHECK(a.labels() == b.labels());
    CHECK(a.all_groups() == b.all_groups());
    std::filesystem::remove(p1);
    std::filesystem::remove(p2);
  }
  SUBCASE("errors") {
    const auto p = temp_file("crois_csv_err.csv");
    write_file(p, "label,f0,f1\n1,0,0\n");
    try {
      load_embedding_csv(p);
      FAIL("expected a format error");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("attribute") != std::string::npos);
    }
    write_file(p, "label,attribute,f0\n1,0,0.5\n0,1,abc\n");
    try {
      load_embedding_csv(p);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("3") != std::string::npos);
    }
    write_file(p, "label,attribute,f0\n1,0,0.5\n0,2,1\n");
    CsvLoadOptions opt;
    opt.num_attributes = 2;
    CHECK_THROWS_AS(load_embedding_csv(p, opt), RangeError);
    CHECK_NOTHROW(load_embedding_csv(p));
    std::filesystem::remove(p);
    CHECK_THROWS(load_embedding_csv(temp_file("crois_csv_missing.csv")));
  }
  SUBCASE("10k rows round-trip bit-identically") {
    SyntheticSpec spec;
    spec.n = 10000;
    spec.noise_dims = 3;
    spec.seed = 17;
    const GroupedDataset d = generate_synthetic(spec);
    const auto p = temp_file("crois_csv_roundtrip.csv");
    save_embedding_csv(d, p);
    CsvLoadOptions opt;
    opt.name = d.name();
    const GroupedDataset back = load_embedding_csv(p, opt);
    CHECK(back == d);
    save_embedding_csv(back, p);
    CHECK(load_embedding_csv(p, opt) == d);
    std::filesystem::remove(p);
  }
}

TEST_CASE("make_split sizes and boundaries") {
  const auto idx = iota_indices(100);
  const SplitPlan plan = make_split(idx, 0.3, 7);
  CHECK(plan.labeled.size() == 30);
  CHECK(plan.unlabeled.size() == 70);
  std::vector<std::size_t> inter;
  std::set_intersection(plan.labeled.begin(), plan.labeled.end(), plan.unlabeled.begin(), plan.unlabeled.end(),
                        std::back_inserter(inter));
  CHECK(inter.empty());
  CHECK(make_split(idx, 1.0, 7).unlabeled.empty());
  CHECK(make_split(idx, 0.0, 7).labeled.empty());
  CHECK_THROWS_AS(make_split(idx, 1.5, 7), RangeError);
  CHECK_THROWS_AS(make_split(idx, -0.1, 7), RangeError);
}

TEST_CASE("make_split on n=10 matches the exact hypergeometric overlap law") {
  // Exhaustive oracle: for two independent uniform 3-subsets of 10 items the
  // overlap k has probability C(3,k) C(7,3-k) / C(10,3). Enumerate all 120
  // subsets to build it.
  const auto idx = iota_indices(10);
  std::vector<std::vector<std::size_t>> subsets;
  for (std::size_t a = 0; a < 10; ++a)
    for (std::size_t b = a + 1; b < 10; ++b)
      for (std::size_t c = b + 1; c < 10; ++c) subsets.push_back({a, b, c});
  REQUIRE(subsets.size() == 120);
  std::vector<double> law(4, 0.0);
  for (const auto& s : subsets) {
    std::size_t k = 0;
    for (std::size_t x : s) k += (x < 3) ? 1 : 0;  // overlap with a fixed reference {0,1,2}
    law[k] += 1.0 / 120.0;
  }

  CHECK(make_split(idx, 0.3, 99).labeled == make_split(idx, 0.3, 99).labeled);
  const int trials = 6000;
  std::vector<double> observed(4, 0.0);
  std::map<std::vector<std::size_t>, int> subset_counts;
  for (int t = 0; t < trials; ++t) {
    const auto a = make_split(idx, 0.3, static_cast<std::uint64_t>(2 * t)).labeled;
    const auto b = make_split(idx, 0.3, static_cast<std::uint64_t>(2 * t + 1)).labeled;
    std::vector<std::size_t> inter;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    observed[inter.size()] += 1.0;
    ++subset_counts[a];
  }
  double chi2 = 0.0;
  for (int k = 0; k < 4; ++k) {
    const double expected = law[static_cast<std::size_t>(k)] * trials;
    chi2 += (observed[static_cast<std::size_t>(k)] - expected) * (observed[static_cast<std::size_t>(k)] - expected) /
            expected;
  }
  CHECK(chi2 < 16.27);  // chi-square, 3 dof, p = 0.001
  CHECK(subset_counts.size() == 120);  // every subset reachable
  double chi2_subsets = 0.0;
  for (const auto& [_, c] : subset_counts) chi2_subsets += (c - 50.0) * (c - 50.0) / 50.0;
  CHECK(chi2_subsets < 180.0);  // chi-square, 119 dof, p ~ 0.0003
}

TEST_CASE("stratified split keeps per-group proportions") {
  std::vector<int> labels;
  std::vector<int> attrs;
  for (int i = 0; i < 200; ++i) {
    labels.push_back(i < 100 ? 0 : 1);
    attrs.push_back(i % 10 == 0 ? 1 - labels.back() : labels.back());
  }
  const GroupedDataset d = tiny_dataset(labels, attrs);
  const SplitPlan plan = make_split(d, 0.3, 4, true);
  CHECK(plan.labeled.size() == 60);
  CHECK(plan.stratified);
  const auto all = d.group_counts(d.all_indices());
  const auto lab = d.group_counts(plan.labeled);
  for (std::size_t g = 0; g < 4; ++g) CHECK(std::abs(static_cast<double>(lab[g]) - 0.3 * all[g]) <= 1.0);
  CHECK(plan.warnings.empty());

  const GroupedDataset scarce = tiny_dataset({0, 0, 0, 0, 1, 1, 1, 1, 0}, {0, 0, 0, 0, 1, 1, 1, 1, 1});
  const SplitPlan warned = make_split(scarce, 0.3, 1, true);
  CHECK_FALSE(warned.warnings.empty());
}

TEST_CASE("split_val_in_half") {
  auto ten = split_val_in_half(iota_indices(10), 1);
  CHECK(ten.first.size() == 5);
  CHECK(ten.second.size() == 5);
  auto eleven = split_val_in_half(iota_indices(11), 1);
  CHECK(eleven.first.size() == 6);  // retraining half takes the extra element
  CHECK(eleven.second.size() == 5);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto idx = iota_indices(37);
    auto [a, b] = split_val_in_half(idx, seed);
    std::vector<std::size_t> all;
    std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(all));
    CHECK(all == idx);
  }
  CHECK_THROWS_AS(split_val_in_half(iota_indices(1), 0), InsufficientDataError);
}

TEST_CASE("shrink_indices") {
  const auto idx = iota_indices(100);
  const auto s = shrink_indices(idx, 0.05, 3);
  CHECK(s.size() == 5);
  CHECK(std::includes(idx.begin(), idx.end(), s.begin(), s.end()));
  CHECK(shrink_indices(idx, 0.001, 3).size() == 1);
  CHECK(shrink_indices(idx, 1.0, 3) == idx);
  CHECK_THROWS_AS(shrink_indices(idx, 0.0, 3), RangeError);
}

TEST_CASE("group-balanced batches") {
  // sizes 10, 3, 20, 7
  std::vector<std::size_t> idx;
  std::vector<int> groups;
  const int sizes[] = {10, 3, 20, 7};
  std::size_t next = 0;
  for (int g = 0; g < 4; ++g)
    for (int i = 0; i < sizes[g]; ++i) {
      idx.push_back(next++);
      groups.push_back(g);
    }
  std::map<std::size_t, int> group_of;
  for (std::size_t i = 0; i < idx.size(); ++i) group_of[idx[i]] = groups[i];

  SUBCASE("quota and duplicates") {
    GroupBalancedBatches stream(idx, groups, 4, 32, 5);
    CHECK(stream.quota() == 8);
    CHECK(stream.batches_per_epoch() == 2);
    const Batch b = stream.next();
    CHECK(b.indices.size() == 32);
    std::vector<int> per(4, 0);
    for (auto i : b.indices) ++per[static_cast<std::size_t>(group_of[i])];
    CHECK(per == std::vector<int>{8, 8, 8, 8});
    CHECK(b.has_duplicates);  // group of size 3 with quota 8
    CHECK(b.with_replacement);
  }
  SUBCASE("full epoch counts are equal per group") {
    GroupBalancedBatches stream(idx, groups, 4, 8, 6);
    std::vector<int> per(4, 0);
    for (std::size_t k = 0; k < stream.batches_per_epoch(); ++k)
      for (auto i : stream.next().indices) ++per[static_cast<std::size_t>(group_of[i])];
    CHECK(per[0] == per[1]);
    CHECK(per[1] == per[2]);
    CHECK(per[2] == per[3]);
  }
  SUBCASE("each group cycles through all members before repeating") {
    GroupBalancedBatches stream(idx, groups, 4, 4, 7);
    std::multiset<std::size_t> seen;
    for (int k = 0; k < 20; ++k)
      for (auto i : stream.next().indices)
        if (group_of[i] == 2) seen.insert(i);
    for (std::size_t i = 13; i < 33; ++i) CHECK(seen.count(i) == 1);
  }
  SUBCASE("deterministic under seed") {
    GroupBalancedBatches a(idx, groups, 4, 8, 9);
    GroupBalancedBatches b(idx, groups, 4, 8, 9);
    for (int k = 0; k < 10; ++k) CHECK(a.next().indices == b.next().indices);
  }
  SUBCASE("slot frequencies are 1/|G| within 3 sigma") {
    GroupBalancedBatches stream(idx, groups, 4, 4, 10);
    std::vector<std::vector<int>> slot_group_counts(4, std::vector<int>(4, 0));
    const int batches = 2500;  // 10^4 slots
    for (int k = 0; k < batches; ++k) {
      const Batch b = stream.next();
      for (std::size_t s = 0; s < 4; ++s) ++slot_group_counts[s][static_cast<std::size_t>(group_of[b.indices[s]])];
    }
    std::vector<int> total(4, 0);
    for (const auto& s : slot_group_counts)
      for (std::size_t g = 0; g < 4; ++g) total[g] += s[g];
    const double n = 4.0 * batches;
    const double sigma = std::sqrt(n * 0.25 * 0.75);
    for (int t : total) CHECK(std::abs(t - n / 4) <= 3 * sigma);
  }
  SUBCASE("preconditions") {
    CHECK_THROWS_AS(GroupBalancedBatches(idx, groups, 4, 30, 1), PreconditionError);
    std::vector<int> missing = groups;
    for (auto& g : missing)
      if (g == 1) g = 0;
    try {
      GroupBalancedBatches(idx, missing, 4, 8, 1);
      FAIL("expected an empty-group error");
    } catch (const EmptyGroupError& e) {
      CHECK(e.group() == 1);
    }
  }
}

TEST_CASE("shuffled batches cover every index once per epoch") {
  ShuffledBatches stream(iota_indices(10), 4, 3);
  CHECK(stream.batches_per_epoch() == 3);
  std::vector<std::size_t> seen;
  for (int k = 0; k < 3; ++k) {
    const Batch b = stream.next();
    seen.insert(seen.end(), b.indices.begin(), b.indices.end());
  }
  std::sort(seen.begin(), seen.end());
  CHECK(seen == iota_indices(10));
}

TEST_CASE("subsample_to_minority") {
  SUBCASE("synthetic sizes") {
    SyntheticSpec spec;
    spec.seed = 2;
    const GroupedDataset d = generate_synthetic(spec);
    const auto idx = d.all_indices();
    const auto out = subsample_to_minority(idx, d.all_groups(), 4, 1);
    CHECK(d.group_counts(out) == std::vector<std::size_t>{25, 25, 25, 25});
  }
  SUBCASE("balanced input is the identity up to order") {
    const auto idx = iota_indices(8);
    const std::vector<int> g = {0, 1, 2, 3, 0, 1, 2, 3};
    CHECK(subsample_to_minority(idx, g, 4, 5) == idx);
  }
  SUBCASE("exhaustive subset check on n=40") {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 50; ++t) {
      std::vector<std::size_t> idx = iota_indices(40);
      std::vector<int> g(40);
      for (std::size_t i = 0; i < 40; ++i) g[i] = static_cast<int>(i < 4 ? i : rng() % 4);
      const auto out = subsample_to_minority(idx, g, 4, rng());
      std::vector<std::size_t> counts(4, 0);
      for (std::size_t i = 0; i < 40; ++i) ++counts[static_cast<std::size_t>(g[i])];
      const std::size_t smallest = *std::min_element(counts.begin(), counts.end());
      CHECK(out.size() == 4 * smallest);
      CHECK(std::set<std::size_t>(out.begin(), out.end()).size() == out.size());
      std::vector<std::size_t> out_counts(4, 0);
      for (auto i : out) {
        REQUIRE(i < 40);
        ++out_counts[static_cast<std::size_t>(g[i])];
      }
      for (auto c : out_counts) CHECK(c == smallest);
    }
  }
  SUBCASE("empty group") {
    const auto idx = iota_indices(4);
    const std::vector<int> g = {0, 0, 1, 1};
    CHECK_THROWS_AS(subsample_to_minority(idx, g, 3, 0), EmptyGroupError);
  }
}
