#include "ebsa/sgld.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "ebsa/error.hpp"

namespace ebsa::sgld {

void SgldConfig::validate() const {
  if (!(step_size > 0)) throw UsageError("sgld: step_size must be > 0");
  if (!(grad_clip > 0)) throw UsageError("sgld: grad_clip must be > 0");
  if (num_steps < 0) throw UsageError("sgld: num_steps must be >= 0");
  if (!(noise_std >= 0)) throw UsageError("sgld: noise_std must be >= 0");
}

EnergyFn conditional_energy(const nets::EnergyNet& theta, const Matrix& z) {
  auto zt = ad::Tensor::constant(z, "z");
  return [&theta, zt](const ad::Tensor& x) { return nets::energy(x, zt, theta, nets::ParamView::frozen); };
}

EnergyGradient energy_gradient(const Matrix& x, const EnergyFn& energy) {
  auto xt = ad::Tensor::variable(x, "chain_state");
  auto e = energy(xt);
  ad::backward(ad::sum(e));
  return {xt.grad(), e.value()};
}

GradientFn autodiff_gradient(EnergyFn energy) {
  return [energy = std::move(energy)](const Matrix& x) { return energy_gradient(x, energy); };
}

GradientFn conditional_gradient(const nets::EnergyNet& theta, const Matrix& z) {
  return [&theta, z](const Matrix& x) {
    auto r = nets::energy_input_gradient(x, z, theta);
    return EnergyGradient{std::move(r.grad), std::move(r.energy)};
  };
}

namespace {

Matrix step_from_gradient(const Matrix& x, const Matrix& grad, const SgldConfig& cfg, const Matrix& noise) {
  if (!grad.all_finite()) throw NumericError("langevin_step: non-finite energy gradient");
  if (!noise.same_shape(x)) {
    throw ShapeError("langevin_step: noise " + noise.shape_string() + " vs " + x.shape_string());
  }
  Matrix out = x;
  const double half = 0.5 * cfg.step_size;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = std::clamp(grad[i], -cfg.grad_clip, cfg.grad_clip);
    out[i] = x[i] - half * g + cfg.noise_std * noise[i];
  }
  return out;
}

Matrix draw_noise(std::size_t rows, std::size_t cols, std::span<Rng> rngs) {
  Matrix noise(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    Rng& rng = rngs.size() == 1 ? rngs[0] : rngs[r];
    for (auto& v : noise.row(r)) v = rng.normal();
  }
  return noise;
}

}  // namespace

Matrix langevin_step(const Matrix& x, const EnergyFn& energy, const SgldConfig& cfg, const Matrix& noise) {
  cfg.validate();
  return step_from_gradient(x, energy_gradient(x, energy).grad, cfg, noise);
}

Matrix langevin_step(const Matrix& x, const Matrix& z, const nets::EnergyNet& theta, const SgldConfig& cfg,
                     const Matrix& noise) {
  cfg.validate();
  return step_from_gradient(x, conditional_gradient(theta, z)(x).grad, cfg, noise);
}

AdaptResult adapt(const Matrix& x0, const GradientFn& gradient, const SgldConfig& cfg, std::span<Rng> rngs,
                  const ProbeFn& probe, const StepObserver& observer) {
  cfg.validate();
  if (!x0.all_finite()) throw NumericError("adapt: non-finite initial state");
  if (rngs.empty() || (rngs.size() != 1 && rngs.size() != x0.rows())) {
    throw UsageError("adapt: need one rng or one per chain");
  }
  AdaptResult result{x0, std::nullopt};
  if (cfg.record_trace) result.trace.emplace();

  auto record = [&](const Matrix& x, const Matrix& e) {
    if (!result.trace) return;
    result.trace->features.push_back(x);
    result.trace->energies.push_back(e);
    if (probe) result.trace->probabilities.push_back(probe(x));
  };

  Matrix& x = result.features;
  if (observer) observer(0, x);
  for (int k = 0; k < cfg.num_steps; ++k) {
    auto eg = gradient(x);
    record(x, eg.energy);
    x = step_from_gradient(x, eg.grad, cfg, draw_noise(x.rows(), x.cols(), rngs));
    if (observer) observer(k + 1, x);
  }
  if (result.trace) record(x, gradient(x).energy);
  return result;
}

AdaptResult adapt(const Matrix& x0, const EnergyFn& energy, const SgldConfig& cfg, std::span<Rng> rngs,
                  const ProbeFn& probe, const StepObserver& observer) {
  return adapt(x0, autodiff_gradient(energy), cfg, rngs, probe, observer);
}

AdaptResult adapt(const Matrix& x0, const Matrix& z, const nets::EnergyNet& theta, const SgldConfig& cfg,
                  std::span<Rng> rngs, const ProbeFn& probe, const StepObserver& observer) {
  return adapt(x0, conditional_gradient(theta, z), cfg, rngs, probe, observer);
}

void write_trace_csv(const std::filesystem::path& path, const AdaptationTrace& trace, std::size_t max_features,
                     std::span<const int> chain_ids) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  if (trace.length() == 0) {
    out << "step,chain,energy\n";
    return;
  }
  const std::size_t d = trace.features.front().cols();
  const std::size_t shown = max_features == 0 ? d : std::min(d, max_features);
  const std::size_t classes = trace.probabilities.empty() ? 0 : trace.probabilities.front().cols();
  out << "step,chain,energy";
  for (std::size_t k = 0; k < shown; ++k) out << ",f" << k;
  for (std::size_t c = 0; c < classes; ++c) out << ",p" << c;
  out << '\n';
  auto fmt = [](double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  };
  for (std::size_t s = 0; s < trace.length(); ++s) {
    const Matrix& f = trace.features[s];
    for (std::size_t r = 0; r < f.rows(); ++r) {
      out << s << ',' << (chain_ids.empty() ? static_cast<int>(r) : chain_ids[r]) << ','
          << fmt(trace.energies[s](r, 0));
      for (std::size_t k = 0; k < shown; ++k) out << ',' << fmt(f(r, k));
      for (std::size_t c = 0; c < classes; ++c) out << ',' << fmt(trace.probabilities[s](r, c));
      out << '\n';
    }
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, double sample_probability, std::size_t feature_dim)
    : capacity_(capacity), sample_probability_(sample_probability), feature_dim_(feature_dim) {
  if (capacity == 0) throw UsageError("replay buffer: capacity must be positive");
  if (!(sample_probability >= 0.0 && sample_probability <= 1.0)) {
    throw UsageError("replay buffer: sample probability must lie in [0, 1]");
  }
}

void ReplayBuffer::push(const BufferEntry& entry) {
  if (entry.feature.size() != feature_dim_) {
    throw ShapeError("replay buffer: feature of dim " + std::to_string(entry.feature.size()) + ", expected " +
                     std::to_string(feature_dim_));
  }
  entries_.push_back(entry);
  while (entries_.size() > capacity_) entries_.pop_front();
}

BufferInitResult buffer_init(const DomainBatch& batch, const ReplayBuffer& buffer, Rng& rng) {
  BufferInitResult out{batch, std::vector<bool>(batch.size(), false)};
  if (buffer.empty() || buffer.sample_probability() <= 0.0) return out;
  if (batch.features.cols() != buffer.feature_dim()) {
    throw ShapeError("buffer_init: batch features do not match buffer dim");
  }
  for (std::size_t r = 0; r < batch.size(); ++r) {
    if (!rng.bernoulli(buffer.sample_probability())) continue;
    const auto& e = buffer.at(rng.index(buffer.size()));
    std::copy(e.feature.begin(), e.feature.end(), out.batch.features.row(r).begin());
    out.batch.labels[r] = e.label;
    out.batch.domains[r] = e.domain;
    out.from_buffer[r] = true;
  }
  return out;
}

void buffer_push(const DomainBatch& adapted, ReplayBuffer& buffer) {
  adapted.validate();
  if (adapted.empty()) return;
  if (adapted.features.cols() != buffer.feature_dim()) {
    throw ShapeError("buffer_push: features of dim " + std::to_string(adapted.features.cols()) + ", buffer holds " +
                     std::to_string(buffer.feature_dim()));
  }
  for (std::size_t r = 0; r < adapted.size(); ++r) {
    auto row = adapted.features.row(r);
    buffer.push({std::vector<double>(row.begin(), row.end()), adapted.labels[r], adapted.domains[r]});
  }
}

}  // namespace ebsa::sgld
