#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebsa/matrix.hpp"
#include "ebsa/rng.hpp"

namespace ebsa {

/// One minibatch. Rows of `features` align with `labels` and `domains`; a
/// batch of negatives can mix several domains of origin.
struct DomainBatch {
  Matrix features;
  std::vector<int> labels;
  std::vector<int> domains;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  void validate() const;

  static DomainBatch concat(std::span<const DomainBatch> parts);
  DomainBatch select(std::span<const std::size_t> rows) const;
};

struct DomainDataset {
  int domain = 0;
  double angle = 0.0;  // rotation in degrees; 0 for external data
  Matrix features;     // n × d
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }
  void validate(std::size_t num_classes = 0) const;
  DomainBatch as_batch() const;
};

struct BenchmarkSpec {
  std::size_t num_classes = 4;
  std::size_t dim = 16;
  std::size_t per_class = 200;
  std::size_t validation_per_class = 50;
  std::vector<double> source_angles = {15, 30, 45, 60, 75};
  std::vector<double> target_angles = {0, 90};
  std::uint64_t geometry_seed = 7;
  double radius = 3.0;
  double cluster_std = 0.5;
  double nuisance_std = 0.5;

  void validate() const;
};

struct Benchmark {
  std::vector<DomainDataset> sources;     // training split
  std::vector<DomainDataset> validation;  // fresh draws at the source angles
  std::vector<DomainDataset> targets;
  std::vector<std::vector<double>> class_means;  // unrotated 2-D means
};

/// Class cluster means on a circle, drawn from the geometry seed.
std::vector<std::vector<double>> class_means(const BenchmarkSpec& spec);

/// Samples one domain: clusters in the first two coordinates rotated by
/// `angle_deg`, isotropic nuisance noise elsewhere.
DomainDataset generate_domain(const BenchmarkSpec& spec, double angle_deg, std::size_t per_class,
                              std::uint64_t seed);

Benchmark generate_rotated_benchmark(const BenchmarkSpec& spec, std::uint64_t seed);

/// Rotates the first two columns of every row by `angle_deg`.
void rotate_plane(Matrix& features, double angle_deg);

/// CSV with header `domain,label,f0,...,f{d-1}`.
void save_feature_csv(const std::filesystem::path& path, std::span<const DomainDataset> datasets);
void save_feature_csv(const std::filesystem::path& path, const DomainDataset& dataset);

struct FeatureSchema {
  std::size_t dim = 0;  // 0 → take from header
};

/// Loads a single-domain file. Throws IoError naming the line on malformed rows.
DomainDataset load_feature_csv(const std::filesystem::path& path, const FeatureSchema& schema = {});
/// Loads a file that may interleave several domains; one dataset per domain
/// id in order of first appearance.
std::vector<DomainDataset> load_feature_csv_domains(const std::filesystem::path& path,
                                                    const FeatureSchema& schema = {});

/// Epoch-wise shuffled minibatches without replacement; the final short batch
/// of each epoch is emitted.
class BatchStream {
 public:
  BatchStream(const DomainDataset& ds, std::size_t batch_size, std::uint64_t seed);

  DomainBatch next();
  std::size_t epoch() const { return epoch_; }

 private:
  void reshuffle();

  const DomainDataset* ds_;
  std::size_t batch_size_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
};

/// All batches of one epoch.
std::vector<DomainBatch> batch_iter(const DomainDataset& ds, std::size_t batch_size, std::uint64_t seed);

/// `n` rows drawn without replacement (all rows, shuffled, if n ≥ size).
DomainBatch sample_batch(const DomainDataset& ds, std::size_t n, Rng& rng);

}  // namespace ebsa
