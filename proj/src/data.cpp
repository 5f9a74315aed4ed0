#include "crois/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "crois/errors.hpp"
#include "crois/seeding.hpp"

namespace crois {

void LabelAudit::restrict_rows(std::span<const std::size_t> rows) {
  for (std::size_t r : rows) {
    if (r >= restricted_.size()) throw RangeError("audited row " + std::to_string(r) + " out of range");
    restricted_[r] = true;
  }
}

void LabelAudit::restrict_all() { std::fill(restricted_.begin(), restricted_.end(), true); }

GroupedDataset::GroupedDataset(std::string name, Matrix features, std::vector<int> labels,
                               std::vector<int> attributes, int num_classes, int num_attributes)
    : name_(std::move(name)),
      features_(std::move(features)),
      labels_(std::move(labels)),
      attributes_(std::move(attributes)),
      num_classes_(num_classes),
      num_attributes_(num_attributes) {
  const auto n = labels_.size();
  if (static_cast<std::size_t>(features_.rows()) != n || attributes_.size() != n)
    throw ShapeError("features, labels, and attributes must have the same row count");
  if (num_classes_ < 1 || num_attributes_ < 1) throw RangeError("need at least one class and one attribute");
  for (std::size_t i = 0; i < n; ++i) {
    if (labels_[i] < 0 || labels_[i] >= num_classes_)
      throw RangeError("row " + std::to_string(i) + ": label " + std::to_string(labels_[i]) +
                       " outside [0," + std::to_string(num_classes_) + ")");
    if (attributes_[i] < 0 || attributes_[i] >= num_attributes_)
      throw RangeError("row " + std::to_string(i) + ": attribute " + std::to_string(attributes_[i]) +
                       " outside [0," + std::to_string(num_attributes_) + ")");
  }
}

int GroupedDataset::attribute(std::size_t row) const {
  if (audit_) audit_->record(row);
  return attributes_.at(row);
}

int GroupedDataset::group(std::size_t row) const {
  if (audit_) audit_->record(row);
  return labels_.at(row) * num_attributes_ + attributes_.at(row);
}

std::vector<int> GroupedDataset::groups(std::span<const std::size_t> rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(group(r));
  return out;
}

std::vector<int> GroupedDataset::all_groups() const {
  const auto idx = all_indices();
  return groups(idx);
}

std::vector<std::size_t> GroupedDataset::group_counts(std::span<const std::size_t> rows) const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_groups()), 0);
  for (std::size_t r : rows) ++counts[static_cast<std::size_t>(group(r))];
  return counts;
}

std::vector<std::size_t> GroupedDataset::all_indices() const {
  std::vector<std::size_t> idx(size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

Matrix GroupedDataset::rows(std::span<const std::size_t> rows) const {
  Matrix out(static_cast<Eigen::Index>(rows.size()), features_.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw RangeError("row index " + std::to_string(rows[i]) + " out of range");
    out.row(static_cast<Eigen::Index>(i)) = features_.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

std::vector<int> GroupedDataset::labels_at(std::span<const std::size_t> rows) const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (std::size_t r : rows) out.push_back(labels_.at(r));
  return out;
}

GroupedDataset GroupedDataset::subset(std::span<const std::size_t> rows, std::string name) const {
  std::vector<int> attrs;
  attrs.reserve(rows.size());
  for (std::size_t r : rows) attrs.push_back(attribute(r));
  return GroupedDataset(name.empty() ? name_ : std::move(name), this->rows(rows), labels_at(rows),
                        std::move(attrs), num_classes_, num_attributes_);
}

bool operator==(const GroupedDataset& a, const GroupedDataset& b) {
  return a.name_ == b.name_ && a.num_classes_ == b.num_classes_ &&
         a.num_attributes_ == b.num_attributes_ && a.labels_ == b.labels_ &&
         a.attributes_ == b.attributes_ && a.features_.rows() == b.features_.rows() &&
         a.features_.cols() == b.features_.cols() && a.features_ == b.features_;
}

// ---------------------------------------------------------------------------
// Synthetic generation

std::vector<std::size_t> synthetic_group_counts(std::size_t n, double majority_fraction) {
  const auto nd = static_cast<double>(n);
  const auto minority = static_cast<std::size_t>(std::llround(nd * (1.0 - majority_fraction) / 2.0));
  const auto first_majority = static_cast<std::size_t>(std::llround(nd * majority_fraction / 2.0));
  if (first_majority + 2 * minority > n) throw RangeError("group counts exceed n");
  return {first_majority, minority, minority, n - first_majority - 2 * minority};
}

namespace {

GroupedDataset generate_with_counts(const std::vector<std::size_t>& counts, const SyntheticSpec& spec,
                                    std::string name) {
  for (std::size_t g = 0; g < counts.size(); ++g)
    if (counts[g] == 0)
      throw EmptyGroupError("synthetic group " + std::to_string(g) + " would be empty (n=" +
                                std::to_string(spec.n) + ", majority fraction " +
                                std::to_string(spec.majority_fraction) +
                                "): cannot sample any minority-group example",
                            static_cast<int>(g));
  const std::size_t n = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  std::vector<int> ys;
  std::vector<int> as;
  ys.reserve(n);
  as.reserve(n);
  for (int g = 0; g < 4; ++g)
    for (std::size_t c = 0; c < counts[static_cast<std::size_t>(g)]; ++c) {
      ys.push_back(g / 2);
      as.push_back(g % 2);
    }

  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  std::normal_distribution<double> normal(0.0, 1.0);
  const int dim = 2 + spec.noise_dims;
  Matrix x(static_cast<Eigen::Index>(n), dim);
  std::vector<int> labels(n);
  std::vector<int> attrs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int y = ys[order[i]];
    const int a = as[order[i]];
    labels[i] = y;
    attrs[i] = a;
    const auto r = static_cast<Eigen::Index>(i);
    x(r, 0) = (2.0 * y - 1.0) * spec.core_margin + spec.noise_scale * normal(rng);
    x(r, 1) = (2.0 * a - 1.0) * spec.spurious_margin + spec.noise_scale * normal(rng);
    for (int j = 0; j < spec.noise_dims; ++j) x(r, 2 + j) = spec.noise_scale * normal(rng);
  }
  return GroupedDataset(std::move(name), std::move(x), std::move(labels), std::move(attrs), 2, 2);
}

}  // namespace

GroupedDataset generate_synthetic(const SyntheticSpec& spec) {
  if (!(spec.majority_fraction > 0.5 && spec.majority_fraction < 1.0))
    throw PreconditionError("majority fraction must lie in (0.5, 1)");
  if (!(spec.core_margin > 0.0) || !(spec.spurious_margin > 0.0))
    throw PreconditionError("feature margins must be positive");
  if (spec.noise_dims < 0 || !(spec.noise_scale >= 0.0))
    throw PreconditionError("noise dimension and scale must be nonnegative");
  return generate_with_counts(synthetic_group_counts(spec.n, spec.majority_fraction), spec, "synthetic");
}

DatasetSplits generate_synthetic_splits(const SyntheticSplitsSpec& spec) {
  if (!(spec.eval_majority_fraction >= 0.5 && spec.eval_majority_fraction < 1.0))
    throw PreconditionError("eval majority fraction must lie in [0.5, 1)");
  DatasetSplits out;
  out.train = generate_synthetic(spec.train);
  auto eval_spec = spec.train;
  eval_spec.majority_fraction = spec.eval_majority_fraction;

  eval_spec.n = spec.n_val;
  eval_spec.seed = mix_seed(spec.train.seed, {0x7661ULL});
  out.val = generate_with_counts(synthetic_group_counts(spec.n_val, spec.eval_majority_fraction),
                                 eval_spec, "synthetic-val");
  eval_spec.n = spec.n_test;
  eval_spec.seed = mix_seed(spec.train.seed, {0x7465ULL});
  out.test = generate_with_counts(synthetic_group_counts(spec.n_test, spec.eval_majority_fraction),
                                  eval_spec, "synthetic-test");
  out.skewed_eval = spec.eval_majority_fraction != spec.train.majority_fraction;
  return out;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
    while (!f.empty() && (f.back() == ' ' || f.back() == '\t' || f.back() == '\r')) f.remove_suffix(1);
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last && first != last;
}

}  // namespace

GroupedDataset load_embedding_csv(const std::filesystem::path& path, const CsvLoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

  const auto header = split_fields(line);
  std::map<std::string, std::size_t, std::less<>> column;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!column.emplace(std::string(header[c]), c).second)
      throw FormatError(path.string() + ": duplicate column '" + std::string(header[c]) + "'");
  }
  auto require = [&](const std::string& name) {
    const auto it = column.find(name);
    if (it == column.end()) throw FormatError(path.string() + ": missing column '" + name + "'");
    return it->second;
  };
  const std::size_t label_col = require("label");
  const std::size_t attr_col = require("attribute");
  std::size_t dim = 0;
  for (const auto& [name, _] : column)
    if (name.size() > 1 && name[0] == 'f' &&
        std::all_of(name.begin() + 1, name.end(), [](char ch) { return ch >= '0' && ch <= '9'; }))
      ++dim;
  std::vector<std::size_t> feature_cols(dim);
  for (std::size_t j = 0; j < dim; ++j) feature_cols[j] = require("f" + std::to_string(j));
  if (dim == 0) throw FormatError(path.string() + ": missing column 'f0'");

  std::vector<double> values;
  std::vector<int> labels;
  std::vector<int> attrs;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto fields = split_fields(line);
    if (fields.size() != header.size())
      throw FormatError(path.string() + ": line " + std::to_string(line_no) + " has " +
                        std::to_string(fields.size()) + " fields, header has " +
                        std::to_string(header.size()));
    int y = 0;
    int a = 0;
    if (!parse_number(fields[label_col], y))
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": label '" +
                       std::string(fields[label_col]) + "' is not an integer");
    if (!parse_number(fields[attr_col], a))
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": attribute '" +
                       std::string(fields[attr_col]) + "' is not an integer");
    if (y < 0 || (options.num_classes && y >= *options.num_classes))
      throw RangeError(path.string() + ": line " + std::to_string(line_no) + ": label " +
                       std::to_string(y) + " out of range");
    if (a < 0 || (options.num_attributes && a >= *options.num_attributes))
      throw RangeError(path.string() + ": line " + std::to_string(line_no) + ": attribute " +
                       std::to_string(a) + " out of range");
    labels.push_back(y);
    attrs.push_back(a);
    for (std::size_t j = 0; j < dim; ++j) {
      double v = 0.0;
      if (!parse_number(fields[feature_cols[j]], v))
        throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": column f" +
                         std::to_string(j) + " value '" + std::string(fields[feature_cols[j]]) +
                         "' is not numeric");
      values.push_back(v);
    }
  }

  const std::size_t n = labels.size();
  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j)
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = values[i * dim + j];
  const int k = options.num_classes.value_or(
      labels.empty() ? 1 : *std::max_element(labels.begin(), labels.end()) + 1);
  const int m = options.num_attributes.value_or(
      attrs.empty() ? 1 : *std::max_element(attrs.begin(), attrs.end()) + 1);
  return GroupedDataset(options.name.empty() ? path.stem().string() : options.name, std::move(x),
                        std::move(labels), std::move(attrs), k, m);
}

void save_embedding_csv(const GroupedDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "label,attribute";
  for (int j = 0; j < dataset.input_dim(); ++j) out << ",f" << j;
  out << '\n';
  char buf[64];
  std::string row;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    row.clear();
    row += std::to_string(dataset.labels()[i]);
    row += ',';
    row += std::to_string(dataset.attribute(i));
    for (int j = 0; j < dataset.input_dim(); ++j) {
      // Shortest representation that round-trips exactly.
      const auto res = std::to_chars(buf, buf + sizeof(buf),
                                     dataset.features()(static_cast<Eigen::Index>(i), j));
      row += ',';
      row.append(buf, res.ptr);
    }
    row += '\n';
    out << row;
  }
}

// ---------------------------------------------------------------------------
// Splitting and sampling

namespace {

void check_proportion(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw RangeError("split proportion must lie in [0, 1]");
}

}  // namespace

SplitPlan make_split(std::span<const std::size_t> indices, double p, std::uint64_t seed) {
  check_proportion(p);
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_labeled = static_cast<std::size_t>(std::llround(p * static_cast<double>(order.size())));
  SplitPlan plan;
  plan.p = p;
  plan.seed = seed;
  plan.labeled.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  plan.unlabeled.assign(order.begin() + static_cast<std::ptrdiff_t>(n_labeled), order.end());
  std::sort(plan.labeled.begin(), plan.labeled.end());
  std::sort(plan.unlabeled.begin(), plan.unlabeled.end());
  return plan;
}

SplitPlan make_split(const GroupedDataset& dataset, double p, std::uint64_t seed, bool stratify) {
  const auto all = dataset.all_indices();
  if (!stratify) return make_split(all, p, seed);
  check_proportion(p);

  const auto groups = dataset.all_groups();
  const auto num_groups = static_cast<std::size_t>(dataset.num_groups());
  std::vector<std::vector<std::size_t>> members(num_groups);
  for (std::size_t i = 0; i < all.size(); ++i) members[static_cast<std::size_t>(groups[i])].push_back(i);

  // Largest-remainder allocation of round(p * n) labeled slots across groups.
  const auto total = static_cast<std::size_t>(std::llround(p * static_cast<double>(all.size())));
  std::vector<std::size_t> quota(num_groups);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < num_groups; ++g) {
    const double exact = p * static_cast<double>(members[g].size());
    quota[g] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[g];
    remainders.emplace_back(exact - std::floor(exact), g);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < total && r < remainders.size(); ++r) {
    const auto g = remainders[r].second;
    if (quota[g] < members[g].size()) {
      ++quota[g];
      ++assigned;
    }
  }

  SplitPlan plan;
  plan.p = p;
  plan.seed = seed;
  plan.stratified = true;
  std::mt19937_64 rng(seed);
  for (std::size_t g = 0; g < num_groups; ++g) {
    auto& m = members[g];
    std::shuffle(m.begin(), m.end(), rng);
    plan.labeled.insert(plan.labeled.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(quota[g]));
    plan.unlabeled.insert(plan.unlabeled.end(), m.begin() + static_cast<std::ptrdiff_t>(quota[g]), m.end());
    if (!m.empty() && p > 0.0 && p < 1.0 && (quota[g] == 0 || quota[g] == m.size()))
      plan.warnings.push_back("group " + std::to_string(g) + " has " + std::to_string(m.size()) +
                              " members, too few to appear on both sides of the split");
  }
  std::sort(plan.labeled.begin(), plan.labeled.end());
  std::sort(plan.unlabeled.begin(), plan.unlabeled.end());
  return plan;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_val_in_half(
    std::span<const std::size_t> indices, std::uint64_t seed) {
  if (indices.size() < 2) throw InsufficientDataError("need at least 2 validation examples to split in half");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t first = (order.size() + 1) / 2;
  std::vector<std::size_t> retrain(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(first));
  std::vector<std::size_t> select(order.begin() + static_cast<std::ptrdiff_t>(first), order.end());
  std::sort(retrain.begin(), retrain.end());
  std::sort(select.begin(), select.end());
  return {std::move(retrain), std::move(select)};
}

std::vector<std::size_t> shrink_indices(std::span<const std::size_t> indices, double fraction,
                                        std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw RangeError("fraction must lie in (0, 1]");
  if (indices.empty()) throw InsufficientDataError("cannot shrink an empty index set");
  std::vector<std::size_t> order(indices.begin(), indices.end());
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto keep = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size()))));
  order.resize(keep);
  std::sort(order.begin(), order.end());
  return order;
}

namespace {

std::vector<std::vector<std::size_t>> bucket_by_group(std::span<const std::size_t> indices,
                                                      std::span<const int> groups, int num_groups) {
  if (indices.size() != groups.size()) throw ShapeError("indices and groups must be aligned");
  std::vector<std::vector<std::size_t>> buckets(static_cast<std::size_t>(num_groups));
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (groups[i] < 0 || groups[i] >= num_groups) throw RangeError("group id out of range");
    buckets[static_cast<std::size_t>(groups[i])].push_back(indices[i]);
  }
  for (int g = 0; g < num_groups; ++g)
    if (buckets[static_cast<std::size_t>(g)].empty())
      throw EmptyGroupError("group " + std::to_string(g) + " has no examples", g);
  return buckets;
}

}  // namespace

std::vector<std::size_t> subsample_to_minority(std::span<const std::size_t> indices,
                                               std::span<const int> groups, int num_groups,
                                               std::uint64_t seed) {
  auto buckets = bucket_by_group(indices, groups, num_groups);
  std::size_t smallest = buckets.front().size();
  for (const auto& b : buckets) smallest = std::min(smallest, b.size());
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (auto& b : buckets) {
    std::shuffle(b.begin(), b.end(), rng);
    out.insert(out.end(), b.begin(), b.begin() + static_cast<std::ptrdiff_t>(smallest));
  }
  std::sort(out.begin(), out.end());
  return out;
}

ShuffledBatches::ShuffledBatches(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed)
    : order_(std::move(indices)), batch_size_(batch_size), rng_(seed) {
  if (order_.empty()) throw InsufficientDataError("cannot batch an empty index set");
  if (batch_size_ == 0) throw PreconditionError("batch size must be positive");
}

std::size_t ShuffledBatches::batches_per_epoch() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

Batch ShuffledBatches::next() {
  if (cursor_ == 0) std::shuffle(order_.begin(), order_.end(), rng_);
  const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
  Batch batch;
  batch.indices.assign(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                       order_.begin() + static_cast<std::ptrdiff_t>(end));
  cursor_ = end == order_.size() ? 0 : end;
  return batch;
}

GroupBalancedBatches::GroupBalancedBatches(std::span<const std::size_t> indices, std::span<const int> groups,
                                           int num_groups, std::size_t batch_size, std::uint64_t seed)
    : rng_(seed) {
  if (num_groups <= 0) throw PreconditionError("need at least one group");
  if (batch_size == 0 || batch_size % static_cast<std::size_t>(num_groups) != 0)
    throw PreconditionError("balanced batch size " + std::to_string(batch_size) +
                            " must be a positive multiple of the group count " + std::to_string(num_groups));
  auto buckets = bucket_by_group(indices, groups, num_groups);
  quota_ = batch_size / static_cast<std::size_t>(num_groups);
  batches_per_epoch_ = (indices.size() + batch_size - 1) / batch_size;
  for (auto& b : buckets) {
    std::shuffle(b.begin(), b.end(), rng_);
    pools_.push_back(Pool{std::move(b), 0});
  }
}

Batch GroupBalancedBatches::next() {
  Batch batch;
  batch.indices.reserve(quota_ * pools_.size());
  for (auto& pool : pools_) {
    for (std::size_t s = 0; s < quota_; ++s) {
      if (pool.cursor == pool.members.size()) {
        std::shuffle(pool.members.begin(), pool.members.end(), rng_);
        pool.cursor = 0;
        batch.with_replacement = true;
      }
      batch.indices.push_back(pool.members[pool.cursor++]);
    }
  }
  auto sorted = batch.indices;
  std::sort(sorted.begin(), sorted.end());
  batch.has_duplicates = std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end();
  return batch;
}

}  // namespace crois
