#include "flsim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "flsim/errors.hpp"

namespace flsim {
namespace {

constexpr double kCenterRadius = 4.0;
constexpr std::uint64_t kCenterSeed = 0xB10B5EEDULL;

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

std::vector<std::vector<std::size_t>> indices_by_class(const LabeledDataset& data) {
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < data.size(); ++i) {
    by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);
  }
  return by_class;
}

void check_client_count(const LabeledDataset& data, std::size_t n_clients) {
  if (n_clients == 0) throw ConfigError("n_clients must be positive");
  if (n_clients > data.size()) {
    throw ConfigError(fmt::format("n_clients ({}) exceeds sample count ({})", n_clients,
                                  data.size()));
  }
}

// Every empty client, in ascending id order, takes the highest index held by
// the currently largest client (lowest id on ties).
void repair_empty_clients(std::vector<std::vector<std::size_t>>& lists) {
  for (auto& list : lists) std::sort(list.begin(), list.end());
  for (auto& list : lists) {
    if (!list.empty()) continue;
    auto largest = std::max_element(lists.begin(), lists.end(),
                                    [](const auto& a, const auto& b) { return a.size() < b.size(); });
    if (largest->size() < 2) throw ConfigError("not enough samples to give every client one");
    list.push_back(largest->back());
    largest->pop_back();
  }
}

// Split `items` into `parts` contiguous chunks, first (n mod parts) one larger.
std::vector<std::vector<std::size_t>> equal_chunks(const std::vector<std::size_t>& items,
                                                   std::size_t parts) {
  std::vector<std::vector<std::size_t>> chunks(parts);
  const std::size_t base = items.size() / parts;
  const std::size_t extra = items.size() % parts;
  std::size_t pos = 0;
  for (std::size_t c = 0; c < parts; ++c) {
    const std::size_t take = base + (c < extra ? 1 : 0);
    chunks[c].assign(items.begin() + static_cast<std::ptrdiff_t>(pos),
                     items.begin() + static_cast<std::ptrdiff_t>(pos + take));
    pos += take;
  }
  return chunks;
}

}  // namespace

void LabeledDataset::validate() const {
  if (num_classes < 2) throw ConfigError("dataset needs at least two classes");
  if (features.rows != labels.size()) throw ConfigError("feature rows and labels differ");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw ConfigError(fmt::format("label {} out of range", y));
    ++counts[static_cast<std::size_t>(y)];
  }
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) throw ConfigError(fmt::format("class {} has no samples", k));
  }
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices) const {
  LabeledDataset out;
  out.num_classes = num_classes;
  out.features = Matrix(indices.size(), dim());
  out.labels.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = features.row(indices[r]);
    std::copy(src.begin(), src.end(), out.features.row(r).begin());
    out.labels.push_back(labels[indices[r]]);
  }
  return out;
}

Batch LabeledDataset::gather(std::span<const std::size_t> indices) const {
  Batch batch;
  batch.features = Matrix(indices.size(), dim());
  batch.labels.reserve(indices.size());
  batch.ids.assign(indices.begin(), indices.end());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto src = features.row(indices[r]);
    std::copy(src.begin(), src.end(), batch.features.row(r).begin());
    batch.labels.push_back(labels[indices[r]]);
  }
  return batch;
}

Batch LabeledDataset::as_batch() const {
  Batch batch;
  batch.features = features;
  batch.labels = labels;
  return batch;
}

std::vector<double> blob_center(int k, std::size_t dim) {
  Stream rng(splitmix64(kCenterSeed ^ splitmix64(static_cast<std::uint64_t>(k))));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> center(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (double& c : center) {
      c = normal(rng);
      norm += c * c;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (double& c : center) c = kCenterRadius * c / norm;
  return center;
}

LabeledDataset gen_blobs(int num_classes, std::size_t dim, std::size_t per_class, double spread,
                         Stream& rng) {
  if (num_classes < 2) throw ConfigError("gen_blobs needs num_classes >= 2");
  if (per_class < 1) throw ConfigError("gen_blobs needs per_class >= 1");
  if (dim < 1) throw ConfigError("gen_blobs needs dim >= 1");
  if (!(spread >= 0.0)) throw ConfigError("gen_blobs needs spread >= 0");

  LabeledDataset data;
  data.num_classes = num_classes;
  data.features = Matrix(static_cast<std::size_t>(num_classes) * per_class, dim);
  data.labels.reserve(data.features.rows);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::size_t row = 0;
  for (int k = 0; k < num_classes; ++k) {
    const auto center = blob_center(k, dim);
    for (std::size_t s = 0; s < per_class; ++s, ++row) {
      auto x = data.features.row(row);
      for (std::size_t j = 0; j < dim; ++j) x[j] = center[j] + spread * normal(rng);
      data.labels.push_back(k);
    }
  }
  return data;
}

TrainTestSplit split_train_test(const LabeledDataset& data, double test_fraction, Stream& rng) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie strictly between 0 and 1");
  }
  TrainTestSplit split;
  auto by_class = indices_by_class(data);
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& idx = by_class[k];
    const auto floor_count =
        static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(idx.size())));
    const std::size_t n_test = std::max<std::size_t>(1, floor_count);
    if (n_test >= idx.size()) {
      throw ConfigError(fmt::format(
          "class {} has {} samples, too few for a test split with one training sample left", k,
          idx.size()));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    split.test_indices.insert(split.test_indices.end(), idx.begin(),
                              idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    split.train_indices.insert(split.train_indices.end(),
                               idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(split.train_indices.begin(), split.train_indices.end());
  std::sort(split.test_indices.begin(), split.test_indices.end());
  split.train = data.subset(split.train_indices);
  split.test = data.subset(split.test_indices);
  return split;
}

void PartitionPlan::validate(std::size_t total) const {
  std::vector<char> seen(total, 0);
  std::size_t covered = 0;
  for (std::size_t c = 0; c < assignments.size(); ++c) {
    if (assignments[c].empty()) throw ConfigError(fmt::format("client {} has no samples", c));
    for (std::size_t i : assignments[c]) {
      if (i >= total) throw ConfigError(fmt::format("client {} holds out-of-range index {}", c, i));
      if (seen[i]) throw ConfigError(fmt::format("index {} assigned twice", i));
      seen[i] = 1;
      ++covered;
    }
  }
  if (covered != total) throw ConfigError("partition does not cover every sample");
}

PartitionPlan partition_iid(const LabeledDataset& data, std::size_t n_clients, Stream& rng) {
  check_client_count(data, n_clients);
  auto order = iota_indices(data.size());
  std::shuffle(order.begin(), order.end(), rng);
  PartitionPlan plan;
  plan.assignments = equal_chunks(order, n_clients);
  for (auto& list : plan.assignments) std::sort(list.begin(), list.end());
  return plan;
}

PartitionPlan partition_dirichlet(const LabeledDataset& data, std::size_t n_clients, double alpha,
                                  Stream& rng) {
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw ConfigError("Dirichlet alpha must be finite and >= 0");
  }
  check_client_count(data, n_clients);
  const auto num_classes = static_cast<std::size_t>(data.num_classes);
  auto by_class = indices_by_class(data);
  std::vector<std::vector<std::size_t>> lists(n_clients);

  if (alpha == 0.0) {
    if (n_clients < num_classes) {
      throw ConfigError(fmt::format(
          "alpha=0 needs n_clients ({}) >= num_classes ({})", n_clients, num_classes));
    }
    for (std::size_t k = 0; k < num_classes; ++k) {
      auto& idx = by_class[k];
      std::shuffle(idx.begin(), idx.end(), rng);
      std::vector<std::size_t> owners;
      for (std::size_t c = k; c < n_clients; c += num_classes) owners.push_back(c);
      auto chunks = equal_chunks(idx, owners.size());
      for (std::size_t o = 0; o < owners.size(); ++o) lists[owners[o]] = std::move(chunks[o]);
    }
  } else {
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> weights(n_clients);
    for (std::size_t k = 0; k < num_classes; ++k) {
      double total = 0.0;
      for (double& w : weights) {
        w = gamma(rng);
        total += w;
      }
      auto& idx = by_class[k];
      std::shuffle(idx.begin(), idx.end(), rng);
      // Very small alpha can underflow every draw; the limit puts the whole
      // class on a single client.
      if (!(total > 0.0) || !std::isfinite(total)) {
        std::fill(weights.begin(), weights.end(), 0.0);
        weights[std::uniform_int_distribution<std::size_t>(0, n_clients - 1)(rng)] = 1.0;
        total = 1.0;
      }
      const auto n = static_cast<double>(idx.size());
      double cumulative = 0.0;
      std::size_t begin = 0;
      for (std::size_t c = 0; c < n_clients; ++c) {
        cumulative += weights[c];
        std::size_t end = c + 1 == n_clients
                              ? idx.size()
                              : static_cast<std::size_t>(std::llround(n * cumulative / total));
        end = std::clamp(end, begin, idx.size());
        lists[c].insert(lists[c].end(), idx.begin() + static_cast<std::ptrdiff_t>(begin),
                        idx.begin() + static_cast<std::ptrdiff_t>(end));
        begin = end;
      }
    }
  }

  repair_empty_clients(lists);
  PartitionPlan plan;
  plan.assignments = std::move(lists);
  plan.alpha = alpha;
  return plan;
}

double mean_label_entropy(const PartitionPlan& plan, const LabeledDataset& data) {
  if (plan.assignments.empty()) return 0.0;
  double sum = 0.0;
  std::vector<std::size_t> counts(static_cast<std::size_t>(data.num_classes));
  for (const auto& list : plan.assignments) {
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i : list) ++counts[static_cast<std::size_t>(data.labels[i])];
    const auto n = static_cast<double>(list.size());
    double h = 0.0;
    for (std::size_t c : counts) {
      if (c == 0) continue;
      const double p = static_cast<double>(c) / n;
      h -= p * std::log(p);
    }
    sum += h;
  }
  return sum / static_cast<double>(plan.assignments.size());
}

void write_dataset(std::ostream& out, const LabeledDataset& data) {
  out << fmt::format("{},{},{}\n", data.dim(), data.num_classes, data.size());
  std::string line;
  for (std::size_t r = 0; r < data.size(); ++r) {
    line.clear();
    for (double v : data.features.row(r)) fmt::format_to(std::back_inserter(line), "{:.17g},", v);
    fmt::format_to(std::back_inserter(line), "{}\n", data.labels[r]);
    out << line;
  }
}

LabeledDataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw IoError("dataset: missing header line");
  std::size_t dim = 0, count = 0;
  int num_classes = 0;
  {
    std::istringstream header(line);
    char c1 = 0, c2 = 0;
    if (!(header >> dim >> c1 >> num_classes >> c2 >> count) || c1 != ',' || c2 != ',') {
      throw IoError("dataset: header must be 'dim,num_classes,count'");
    }
  }
  LabeledDataset data;
  data.num_classes = num_classes;
  data.features = Matrix(count, dim);
  data.labels.reserve(count);
  for (std::size_t r = 0; r < count; ++r) {
    if (!std::getline(in, line)) throw IoError(fmt::format("dataset: expected {} rows, got {}", count, r));
    std::istringstream row(line);
    std::string field;
    for (std::size_t j = 0; j < dim; ++j) {
      if (!std::getline(row, field, ',')) throw IoError(fmt::format("dataset: row {} too short", r));
      data.features(r, j) = std::stod(field);
    }
    if (!std::getline(row, field, ',')) throw IoError(fmt::format("dataset: row {} missing label", r));
    data.labels.push_back(std::stoi(field));
  }
  data.validate();
  return data;
}

void save_dataset(const std::string& path, const LabeledDataset& data) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_dataset(out, data);
  if (!out) throw IoError("failed writing " + path);
}

LabeledDataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return read_dataset(in);
}

}  // namespace flsim
