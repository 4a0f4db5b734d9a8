#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ebsa/autodiff.hpp"
#include "ebsa/checkpoint.hpp"
#include "ebsa/rng.hpp"

namespace ebsa::nets {

using ad::Tensor;

enum class Activation { identity, relu, swish, tanh };

/// How a network's parameters enter the graph. `frozen` wraps each parameter
/// in stop_grad: values are used, no gradient reaches them, and the parameter
/// nodes are never written during backward.
enum class ParamView { trainable, frozen };

struct Dense {
  Tensor weight;  // in × out
  Tensor bias;    // 1 × out
};

/// Fully connected stack. A stack with zero layers is the identity map.
class Mlp {
 public:
  Mlp() = default;
  /// dims = {in, h1, ..., out}; `hidden` is applied after every layer but the
  /// last, `output` after the last.
  static Mlp create(const std::vector<std::size_t>& dims, Activation hidden, Activation output, Rng& rng);
  static Mlp identity(std::size_t dim);

  Tensor forward(const Tensor& x, ParamView view = ParamView::trainable) const;

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  std::size_t depth() const { return layers_.size(); }

  std::vector<Dense>& layers() { return layers_; }
  const std::vector<Dense>& layers() const { return layers_; }
  Activation activation(std::size_t layer) const { return acts_.at(layer); }
  /// Output becomes g·h, then b·tanh(g·h/b) when b > 0.
  void set_output_transform(double gain, double bound);
  double output_gain() const { return output_gain_; }
  double output_bound() const { return output_bound_; }
  std::vector<Tensor> parameters() const;

  /// Throws InvariantError if dims do not chain or an entry is non-finite.
  void validate() const;

  void export_to(ArrayFile& file, const std::string& prefix) const;
  void import_from(const ArrayFile& file, const std::string& prefix);

  /// Deep copy with fresh parameter leaves.
  Mlp clone() const;

 private:
  std::vector<Dense> layers_;
  std::vector<Activation> acts_;
  std::size_t identity_dim_ = 0;
  double output_gain_ = 1.0;
  double output_bound_ = 0.0;
};

Tensor apply(Activation act, const Tensor& x);

struct GaussianParams {
  Tensor mean;  // n × k
  Tensor std;   // n × k, strictly positive
};

/// Classifier and the two latent heads of one source domain.
struct PhiNets {
  Mlp classifier;      // [x; z] → logits
  Mlp prior_head;      // x → (mean, raw std) of p(z|x)
  Mlp posterior_head;  // d_x → (mean, raw std) of q(z|d_x)

  std::vector<Tensor> parameters() const;
  PhiNets clone() const;
};

/// Three dense layers with swish, dropout after each hidden activation, and a
/// sigmoid on the scalar output. Each weight keeps a persistent power-iteration
/// vector for spectral normalization.
struct EnergyNet {
  Mlp mlp;
  std::vector<Matrix> power_vectors;  // one 1 × in row per weight
  double dropout = 0.1;

  std::vector<Tensor> parameters() const { return mlp.parameters(); }
  EnergyNet clone() const;
};

struct NetConfig {
  std::size_t input_dim = 16;
  std::size_t feature_dim = 16;
  std::size_t num_classes = 4;
  std::vector<std::size_t> trunk_hidden = {64, 64};
  bool identity_trunk = false;
  /// Fixed gain on trunk outputs. Sets the feature scale the energy nets and
  /// Langevin step sizes operate at.
  double feature_scale = 8.0;
  /// b > 0 squashes scaled trunk outputs through b·tanh(h/b); 0 leaves them
  /// linear.
  double feature_bound = 0.0;
  std::size_t classifier_hidden = 0;  // 0 → feature_dim
  std::size_t latent_hidden = 0;      // 0 → feature_dim
  std::size_t energy_hidden = 0;      // 0 → 2 × feature_dim
  double energy_dropout = 0.1;
  int spectral_init_iterations = 20;
};

/// Floor added after softplus on std heads.
inline constexpr double kStdFloor = 1e-4;

Mlp make_trunk(const NetConfig& cfg, Rng& rng);
PhiNets make_phi(const NetConfig& cfg, Rng& rng);
EnergyNet make_energy(const NetConfig& cfg, Rng& rng);

Tensor trunk_forward(const Tensor& input, const Mlp& trunk, ParamView view = ParamView::trainable);

Tensor classify_logits(const Tensor& x, const Tensor& z, const PhiNets& phi,
                       ParamView view = ParamView::trainable);
/// Row-wise class probabilities p(y | z, x).
Tensor classify(const Tensor& x, const Tensor& z, const PhiNets& phi, ParamView view = ParamView::trainable);

GaussianParams infer_prior(const Tensor& x, const PhiNets& phi, ParamView view = ParamView::trainable);
GaussianParams infer_posterior(const Tensor& centers, const PhiNets& phi, ParamView view = ParamView::trainable);

/// mean + std ⊙ noise.
Tensor reparam_sample(const GaussianParams& g, const Matrix& noise);

/// Per-row KL(q ‖ p) between diagonal Gaussians, n × 1.
Tensor kl_diag_gauss(const GaussianParams& q, const GaussianParams& p);

/// Per-row energy E(x | z) in [0, 1], n × 1. Dropout is applied only when a
/// dropout rng is supplied.
Tensor energy(const Tensor& x, const Tensor& z, const EnergyNet& theta, ParamView view = ParamView::trainable,
              Rng* dropout_rng = nullptr);

/// Per-row energies of frozen θ and ∂(Σ rows E)/∂x, computed by a direct
/// forward and backward pass without building a graph. Matches energy() and
/// its autodiff gradient; used by the Langevin sampler.
struct EnergyAndGrad {
  Matrix energy;  // n × 1
  Matrix grad;    // n × F
};
EnergyAndGrad energy_input_gradient(const Matrix& x, const Matrix& z, const EnergyNet& theta);

/// Largest singular value of `w` by power iteration, updating `u` in place.
double power_iteration(const Matrix& w, Matrix& u, int iterations);

/// Divides every weight of θ by its estimated top singular value. Zero
/// weights are left untouched. Returns the estimates used.
std::vector<double> spectral_normalize(EnergyNet& theta, int iterations);

}  // namespace ebsa::nets
