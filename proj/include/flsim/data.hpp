#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flsim/model.hpp"
#include "flsim/rng.hpp"

namespace flsim {

struct LabeledDataset {
  Matrix features;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols; }

  /// Labels in range and at least one sample per class.
  void validate() const;
  std::vector<std::size_t> class_counts() const;

  /// Rows `indices` (in the given order) as a new dataset.
  LabeledDataset subset(std::span<const std::size_t> indices) const;
  /// Rows `indices` as a batch whose ids are the dataset indices.
  Batch gather(std::span<const std::size_t> indices) const;
  /// Whole dataset as one batch.
  Batch as_batch() const;
};

/// Class k is centred at a fixed unit direction scaled by 4; samples add
/// `spread` times standard normal noise. Rows are class-major.
LabeledDataset gen_blobs(int num_classes, std::size_t dim, std::size_t per_class, double spread,
                         Stream& rng);

/// Deterministic unit-norm direction times 4 used as the centre of class k.
std::vector<double> blob_center(int k, std::size_t dim);

struct TrainTestSplit {
  LabeledDataset train;
  LabeledDataset test;
  std::vector<std::size_t> train_indices;  // ascending, into the source
  std::vector<std::size_t> test_indices;   // ascending, into the source
};

/// Stratified: each class sends max(1, floor(fraction * count)) samples to
/// test and keeps at least one for training.
TrainTestSplit split_train_test(const LabeledDataset& data, double test_fraction, Stream& rng);

struct PartitionPlan {
  /// client id -> ascending sample indices.
  std::vector<std::vector<std::size_t>> assignments;
  /// Concentration used; nullopt for the IID plan.
  std::optional<double> alpha;

  std::size_t n_clients() const { return assignments.size(); }
  /// Throws ConfigError unless assignments are a disjoint cover of
  /// 0..total-1 with no empty client.
  void validate(std::size_t total) const;
};

/// Global shuffle, then contiguous chunks; the first (total mod n) clients
/// get one extra sample.
PartitionPlan partition_iid(const LabeledDataset& data, std::size_t n_clients, Stream& rng);

/// Per-class label skew. For alpha > 0 each class draws proportions from
/// Dirichlet(alpha) over clients and splits its shuffled samples by
/// cumulative rounding. alpha = 0 assigns class (id mod K) to client id so
/// every client holds one class. Empty clients then take one sample from the
/// largest client, in ascending id order.
PartitionPlan partition_dirichlet(const LabeledDataset& data, std::size_t n_clients, double alpha,
                                  Stream& rng);

/// Mean over clients of the Shannon entropy (nats) of the client's labels.
double mean_label_entropy(const PartitionPlan& plan, const LabeledDataset& data);

/// Text table: header "dim,num_classes,count", then one comma-separated row
/// per sample with the label last.
void write_dataset(std::ostream& out, const LabeledDataset& data);
LabeledDataset read_dataset(std::istream& in);
void save_dataset(const std::string& path, const LabeledDataset& data);
LabeledDataset load_dataset(const std::string& path);

}  // namespace flsim
