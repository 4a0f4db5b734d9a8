#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebsa/data.hpp"
#include "ebsa/sgld.hpp"
#include "ebsa/trainer.hpp"

namespace ebsa::infer {

/// Where the fixed latent of each chain comes from.
///   none   – zero vector (classifier and energy ignore the latent heads)
///   prior  – p(z | x_t) of the unadapted sample
///   oracle – q(z | d) with d the source class center of the true label
enum class LatentMode { none, prior, oracle };

enum class Aggregation { ensemble, closest_cosine, weighted_cosine, most_confident };

std::string to_string(LatentMode m);
std::string to_string(Aggregation a);
LatentMode latent_mode_from_string(const std::string& s);
Aggregation aggregation_from_string(const std::string& s);

struct InferenceConfig {
  sgld::SgldConfig sgld;
  int mc_samples = 5;
  LatentMode mode = LatentMode::prior;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

struct PredictionRecord {
  std::size_t sample = 0;
  int label = -1;  // -1 when unknown
  std::vector<std::vector<double>> pre_per_source;   // S × C
  std::vector<std::vector<double>> post_per_source;  // S × C
  std::vector<double> pre_ensemble;
  std::vector<double> ensemble;  // post-adaptation, uniform average
  int predicted = 0;
  int predicted_pre = 0;
  std::vector<double> pre_energy_per_source;   // mean over chains
  std::vector<double> post_energy_per_source;  // mean over chains
  std::vector<double> feature;                 // trunk output x_t
  /// Per source, chains of this sample; filled when sgld.record_trace is set.
  std::vector<sgld::AdaptationTrace> traces;
};

/// Adapts one raw input to every source domain and ensembles the predictions.
/// `sample_index` seeds the sample's chains so results do not depend on the
/// order in which samples are evaluated.
PredictionRecord predict_sample(std::span<const double> raw, std::optional<int> label,
                                const train::ModelBundle& bundle, const InferenceConfig& cfg,
                                std::size_t sample_index);

/// Same as calling predict_sample for row r with sample index
/// `first_index + r`; chains are batched and optionally split across threads.
std::vector<PredictionRecord> predict_batch(const Matrix& raw, std::span<const int> labels,
                                            const train::ModelBundle& bundle, const InferenceConfig& cfg,
                                            std::size_t first_index = 0);

/// Combines per-source probability vectors. Cosine modes compare the trunk
/// feature with each domain centroid.
std::vector<double> aggregate(std::span<const std::vector<double>> per_source, Aggregation mode,
                              std::span<const double> feature = {}, const Matrix* centroids = nullptr);

int argmax(std::span<const double> p);

struct SweepRow {
  LatentMode mode = LatentMode::prior;
  int steps = 0;
  double mean_energy = 0.0;
  double accuracy = 0.0;
};

/// One row per (mode, steps). Chains run once to the largest step count and
/// are read off at each requested count, which matches separate runs exactly.
std::vector<SweepRow> step_sweep(std::span<const DomainDataset> test_sets, const train::ModelBundle& bundle,
                                 std::span<const int> steps, std::span<const LatentMode> modes,
                                 const InferenceConfig& cfg);

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows);

/// sample,domain,label,pre_s{i}...,post_s{i}...,pre_ensemble,ensemble,p0..p{C-1}
void write_predictions_csv(const std::filesystem::path& path, std::span<const PredictionRecord> records,
                           std::span<const int> sample_domains);

}  // namespace ebsa::infer
