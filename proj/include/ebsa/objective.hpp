#pragma once

// Training objectives with and without the latent variable.
//
// Gradient routing (with latent):
//   classification   -> trunk features, φ
//   kl (positives)   -> trunk features (also through class centers), φ
//   positive energy  -> trunk features, θ, φ through the posterior sample
//   negative energy  -> θ only; adapted features and their latents are cut
//   adapted bracket  -> adapted features only; θ and φ enter frozen
//
// The adapted bracket is E(x̃|z) − log p(y|z, x̃) − KL(q(z|d) ‖ p(z|x̃)), with
// the KL sign exactly as in the full objective.

#include <optional>
#include <span>
#include <vector>

#include "ebsa/autodiff.hpp"
#include "ebsa/data.hpp"
#include "ebsa/nets.hpp"
#include "ebsa/rng.hpp"

namespace ebsa::objective {

struct LossWeights {
  double classification = 1.0;
  double kl = 1.0;
  double positive_energy = 1.0;
  double negative_energy = 1.0;
  double adapted = 1.0;
};

/// Weighted contributions; total = classification + kl + positive_energy
/// − negative_energy + adapted.
struct LossBreakdown {
  double classification = 0.0;
  double positive_energy = 0.0;
  double negative_energy = 0.0;
  double kl = 0.0;
  double adapted = 0.0;
  double total = 0.0;
  ad::Tensor total_tensor;
};

/// Mean feature of `cls` within the batch, or nullopt if the class is absent.
std::optional<std::vector<double>> class_center(const DomainBatch& batch, int cls);

/// Row i holds the mean of all rows sharing row i's label; differentiable.
ad::Tensor class_center_rows(const ad::Tensor& features, std::span<const int> labels);

struct Positives {
  ad::Tensor features;  // trunk output, gradient flows to ψ
  std::vector<int> labels;
};

struct Negatives {
  ad::Tensor adapted;  // chain end states; must require grad
  std::vector<int> labels;
  Matrix centers;      // d_x per row (used with latent)
  Matrix latent;       // z held fixed during the chain; empty → draw from q_stop(φ)
};

struct LossOptions {
  LossWeights weights;
  /// Dropout masks for the energy net; nullptr disables dropout.
  Rng* dropout_rng = nullptr;
};

LossBreakdown loss_no_latent(const Positives& pos, const Negatives& neg, const nets::PhiNets& phi,
                             const nets::EnergyNet& theta, const LossOptions& opts = {});

LossBreakdown loss_with_latent(const Positives& pos, const Negatives& neg, const nets::PhiNets& phi,
                               const nets::EnergyNet& theta, Rng& rng, const LossOptions& opts = {});

/// Centers for negatives: the positive batch's center of the same class when
/// present, otherwise the center within the negative batch itself.
Matrix negative_centers(const DomainBatch& positives, const DomainBatch& negatives);

}  // namespace ebsa::objective
