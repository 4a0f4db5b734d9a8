#pragma once

#include <cstddef>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "ebsa/autodiff.hpp"
#include "ebsa/data.hpp"
#include "ebsa/nets.hpp"
#include "ebsa/rng.hpp"

namespace ebsa::sgld {

struct SgldConfig {
  double step_size = 50.0;
  int num_steps = 20;
  double noise_std = 0.001;
  double grad_clip = 0.01;
  bool record_trace = false;

  void validate() const;
};

/// Per-row energies (n × 1) of a batch of independent chains.
using EnergyFn = std::function<ad::Tensor(const ad::Tensor& x)>;

/// E_θ(x | z) with θ frozen and z held constant.
EnergyFn conditional_energy(const nets::EnergyNet& theta, const Matrix& z);

/// ∂(Σ rows E)/∂x, plus the per-row energies evaluated at x.
struct EnergyGradient {
  Matrix grad;
  Matrix energy;  // n × 1
};
EnergyGradient energy_gradient(const Matrix& x, const EnergyFn& energy);

/// Anything that returns energies and input gradients for a chain batch.
using GradientFn = std::function<EnergyGradient(const Matrix& x)>;
/// Autodiff through an arbitrary energy expression.
GradientFn autodiff_gradient(EnergyFn energy);
/// Fused pass through a frozen energy net with z held constant.
GradientFn conditional_gradient(const nets::EnergyNet& theta, const Matrix& z);

/// One update x − (step/2)·clip(∇ₓE, ±grad_clip) + noise_std·noise.
/// Throws NumericError on a non-finite gradient.
Matrix langevin_step(const Matrix& x, const EnergyFn& energy, const SgldConfig& cfg, const Matrix& noise);
Matrix langevin_step(const Matrix& x, const Matrix& z, const nets::EnergyNet& theta, const SgldConfig& cfg,
                     const Matrix& noise);

/// Snapshots of a chain batch; entry k is the state after k steps.
struct AdaptationTrace {
  std::vector<Matrix> features;
  std::vector<Matrix> energies;       // n × 1 each
  std::vector<Matrix> probabilities;  // n × C each, empty when no probe

  std::size_t length() const { return features.size(); }
};

/// Maps adapted features to class probabilities for trace recording.
using ProbeFn = std::function<Matrix(const Matrix& x)>;
/// Called after every step k (k = 0 is the initial state).
using StepObserver = std::function<void(int step, const Matrix& x)>;

struct AdaptResult {
  Matrix features;
  std::optional<AdaptationTrace> trace;
};

/// Runs cfg.num_steps Langevin updates. Each row is an independent chain;
/// noise for row r comes from rngs[r] (or rngs[0] for every row if only one
/// stream is given).
AdaptResult adapt(const Matrix& x0, const GradientFn& gradient, const SgldConfig& cfg, std::span<Rng> rngs,
                  const ProbeFn& probe = {}, const StepObserver& observer = {});
AdaptResult adapt(const Matrix& x0, const EnergyFn& energy, const SgldConfig& cfg, std::span<Rng> rngs,
                  const ProbeFn& probe = {}, const StepObserver& observer = {});
AdaptResult adapt(const Matrix& x0, const Matrix& z, const nets::EnergyNet& theta, const SgldConfig& cfg,
                  std::span<Rng> rngs, const ProbeFn& probe = {}, const StepObserver& observer = {});

/// Columns: step,chain,energy,f0..f{k-1},p0..p{C-1}. `max_features` truncates
/// the feature columns (0 keeps all).
void write_trace_csv(const std::filesystem::path& path, const AdaptationTrace& trace, std::size_t max_features = 0,
                     std::span<const int> chain_ids = {});

struct BufferEntry {
  std::vector<double> feature;
  int label = 0;
  int domain = 0;
};

/// Bounded FIFO of previously adapted negatives.
class ReplayBuffer {
 public:
  ReplayBuffer() = default;
  ReplayBuffer(std::size_t capacity, double sample_probability, std::size_t feature_dim);

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t capacity() const { return capacity_; }
  double sample_probability() const { return sample_probability_; }
  std::size_t feature_dim() const { return feature_dim_; }
  const BufferEntry& at(std::size_t i) const { return entries_.at(i); }

  void push(const BufferEntry& entry);

 private:
  std::size_t capacity_ = 500;
  double sample_probability_ = 0.5;
  std::size_t feature_dim_ = 0;
  std::deque<BufferEntry> entries_;
};

struct BufferInitResult {
  DomainBatch batch;
  std::vector<bool> from_buffer;
};

/// Replaces each row by a uniformly chosen buffer entry with the buffer's
/// sample probability (when the buffer is non-empty).
BufferInitResult buffer_init(const DomainBatch& batch, const ReplayBuffer& buffer, Rng& rng);

/// Appends rows, evicting the oldest entries beyond capacity.
void buffer_push(const DomainBatch& adapted, ReplayBuffer& buffer);

}  // namespace ebsa::sgld
