#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ebsa/data.hpp"
#include "ebsa/nets.hpp"
#include "ebsa/objective.hpp"
#include "ebsa/sgld.hpp"

namespace ebsa::train {

enum class Objective { no_latent, with_latent };

std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  int iterations = 2000;
  std::size_t batch_size = 64;
  /// Negatives per step drawn across the other domains; 0 → batch_size.
  std::size_t negatives = 0;
  double lr_trunk = 1e-4;
  double lr_model = 1e-4;
  sgld::SgldConfig sgld;
  std::size_t buffer_capacity = 500;
  double buffer_probability = 0.5;
  std::uint64_t seed = 0;
  AdamConfig adam;
  Objective objective = Objective::with_latent;
  objective::LossWeights weights;
  int spectral_iterations = 1;
  int checkpoint_every = 500;

  void validate() const;
};

struct AdamSlot {
  Matrix m;
  Matrix v;
  long steps = 0;
};

struct DomainModel {
  int domain = 0;
  nets::PhiNets phi;
  nets::EnergyNet theta;
  sgld::ReplayBuffer buffer;
};

/// Shared trunk plus one (classifier, latent heads, energy, buffer) set per
/// source domain, and the optimizer state needed to resume training.
struct ModelBundle {
  nets::NetConfig net;
  nets::Mlp trunk;
  std::vector<DomainModel> domains;

  /// Reference statistics over the full source training sets, refreshed at
  /// the end of training and at each checkpoint.
  Matrix domain_centroids;           // S × F
  std::vector<Matrix> class_centers;  // per domain, C × F
  bool trained = false;
  int iterations_done = 0;

  std::map<std::string, AdamSlot> optimizer;

  static ModelBundle create(const nets::NetConfig& net, std::span<const int> domain_ids, const TrainConfig& cfg);

  std::size_t num_domains() const { return domains.size(); }
  std::size_t num_classes() const { return net.num_classes; }
  std::size_t feature_dim() const { return net.feature_dim; }
  std::size_t input_dim() const { return trunk.input_dim(); }

  /// Stable names for every trainable tensor, e.g. "trunk.0.weight",
  /// "d1.classifier.0.bias", "d3.energy.2.weight".
  std::vector<std::pair<std::string, ad::Tensor>> named_parameters() const;

  /// FNV-1a over every parameter and spectral-norm vector.
  std::uint64_t checksum() const;

  ModelBundle clone() const;

  void save(const std::filesystem::path& path) const;
  static ModelBundle load(const std::filesystem::path& path);
};

/// Trunk features of raw inputs, value only.
Matrix features_of(const ModelBundle& bundle, const Matrix& raw);

/// Recomputes centroids and per-class centers from the source sets.
void refresh_reference(ModelBundle& bundle, std::span<const DomainDataset> sources);

struct StepRecord {
  int iteration = 0;
  int domain_index = 0;
  objective::LossBreakdown loss;
  std::size_t buffer_size = 0;
};

/// One update of domain `domain_index`. `raw_batches[j]` holds raw inputs of
/// domain j; the other domains' batches become the negatives. Throws
/// NumericError without touching parameters when the loss is not finite.
objective::LossBreakdown train_step(ModelBundle& bundle, std::size_t domain_index,
                                    std::span<const DomainBatch> raw_batches, const TrainConfig& cfg, Rng& rng);

struct TrainHooks {
  /// Called after every iteration whose count is a multiple of
  /// checkpoint_every, and after the final iteration.
  std::function<void(const ModelBundle&, int iteration)> on_checkpoint;
  std::function<void(const StepRecord&)> on_step;
};

/// Runs iterations bundle.iterations_done .. cfg.iterations − 1, visiting each
/// domain once per iteration in index order.
std::vector<StepRecord> train(ModelBundle& bundle, std::span<const DomainDataset> sources, const TrainConfig& cfg,
                              const TrainHooks& hooks = {});

void write_loss_csv(const std::filesystem::path& path, std::span<const StepRecord> history, bool append = false);

}  // namespace ebsa::train
