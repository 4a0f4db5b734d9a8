#include "ebsa/nets.hpp"

#include <cmath>

#include "ebsa/error.hpp"

namespace ebsa::nets {

Tensor apply(Activation act, const Tensor& x) {
  switch (act) {
    case Activation::relu:
      return ad::relu(x);
    case Activation::swish:
      return ad::swish(x);
    case Activation::tanh:
      return ad::tanh(x);
    case Activation::identity:
      break;
  }
  return x;
}

Mlp Mlp::create(const std::vector<std::size_t>& dims, Activation hidden, Activation output, Rng& rng) {
  if (dims.size() < 2) throw UsageError("Mlp::create: need at least input and output dims");
  Mlp m;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t in = dims[l], out = dims[l + 1];
    if (in == 0 || out == 0) throw UsageError("Mlp::create: zero-width layer");
    const bool last = l + 2 == dims.size();
    const Activation act = last ? output : hidden;
    // He init for rectifiers, Glorot-style otherwise.
    const double std = act == Activation::relu ? std::sqrt(2.0 / static_cast<double>(in))
                                               : std::sqrt(1.0 / static_cast<double>(in));
    m.layers_.push_back({Tensor::variable(rng.normal_matrix(in, out, std), "weight"),
                         Tensor::variable(Matrix(1, out), "bias")});
    m.acts_.push_back(act);
  }
  m.identity_dim_ = dims.front();
  return m;
}

Mlp Mlp::identity(std::size_t dim) {
  Mlp m;
  m.identity_dim_ = dim;
  return m;
}

Tensor Mlp::forward(const Tensor& x, ParamView view) const {
  if (x.cols() != input_dim()) {
    throw ShapeError("mlp: input has " + std::to_string(x.cols()) + " columns, expected " +
                     std::to_string(input_dim()));
  }
  Tensor h = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Tensor w = layers_[l].weight;
    Tensor b = layers_[l].bias;
    if (view == ParamView::frozen) {
      w = ad::stop_grad(w);
      b = ad::stop_grad(b);
    }
    h = apply(acts_[l], ad::add_bias(ad::matmul(h, w), b));
  }
  if (output_gain_ != 1.0) h = ad::scale(h, output_gain_);
  if (output_bound_ > 0.0) h = ad::scale(ad::tanh(ad::scale(h, 1.0 / output_bound_)), output_bound_);
  return h;
}

void Mlp::set_output_transform(double gain, double bound) {
  if (!(gain > 0.0)) throw UsageError("mlp: output gain must be > 0");
  if (!(bound >= 0.0)) throw UsageError("mlp: output bound must be >= 0");
  output_gain_ = gain;
  output_bound_ = bound;
}

std::size_t Mlp::input_dim() const {
  return layers_.empty() ? identity_dim_ : layers_.front().weight.rows();
}

std::size_t Mlp::output_dim() const {
  return layers_.empty() ? identity_dim_ : layers_.back().weight.cols();
}

std::vector<Tensor> Mlp::parameters() const {
  std::vector<Tensor> out;
  for (const auto& d : layers_) {
    out.push_back(d.weight);
    out.push_back(d.bias);
  }
  return out;
}

void Mlp::validate() const {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto& w = layers_[l].weight.value();
    const auto& b = layers_[l].bias.value();
    if (b.rows() != 1 || b.cols() != w.cols()) {
      throw InvariantError("mlp layer " + std::to_string(l) + ": bias " + b.shape_string() +
                           " does not match weight " + w.shape_string());
    }
    if (l > 0 && layers_[l - 1].weight.cols() != w.rows()) {
      throw InvariantError("mlp layer " + std::to_string(l) + ": input width " + std::to_string(w.rows()) +
                           " does not chain from " + std::to_string(layers_[l - 1].weight.cols()));
    }
    if (!w.all_finite() || !b.all_finite()) {
      throw InvariantError("mlp layer " + std::to_string(l) + ": non-finite parameter");
    }
  }
}

void Mlp::export_to(ArrayFile& file, const std::string& prefix) const {
  file.meta()["nets"][prefix]["identity_dim"] = identity_dim_;
  std::vector<int> acts;
  for (auto a : acts_) acts.push_back(static_cast<int>(a));
  file.meta()["nets"][prefix]["activations"] = acts;
  file.meta()["nets"][prefix]["output_gain"] = output_gain_;
  file.meta()["nets"][prefix]["output_bound"] = output_bound_;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    file.add(prefix + "." + std::to_string(l) + ".weight", layers_[l].weight.value());
    file.add(prefix + "." + std::to_string(l) + ".bias", layers_[l].bias.value());
  }
}

void Mlp::import_from(const ArrayFile& file, const std::string& prefix) {
  const auto& meta = file.meta().at("nets").at(prefix);
  identity_dim_ = meta.at("identity_dim").get<std::size_t>();
  output_gain_ = meta.value("output_gain", 1.0);
  output_bound_ = meta.value("output_bound", 0.0);
  acts_.clear();
  layers_.clear();
  for (int a : meta.at("activations").get<std::vector<int>>()) acts_.push_back(static_cast<Activation>(a));
  for (std::size_t l = 0; l < acts_.size(); ++l) {
    layers_.push_back({Tensor::variable(file.get(prefix + "." + std::to_string(l) + ".weight"), "weight"),
                       Tensor::variable(file.get(prefix + "." + std::to_string(l) + ".bias"), "bias")});
  }
  validate();
}

Mlp Mlp::clone() const {
  Mlp m;
  m.acts_ = acts_;
  m.identity_dim_ = identity_dim_;
  m.output_gain_ = output_gain_;
  m.output_bound_ = output_bound_;
  for (const auto& d : layers_) {
    m.layers_.push_back({Tensor::variable(d.weight.value(), "weight"), Tensor::variable(d.bias.value(), "bias")});
  }
  return m;
}

std::vector<Tensor> PhiNets::parameters() const {
  auto out = classifier.parameters();
  for (auto& t : prior_head.parameters()) out.push_back(t);
  for (auto& t : posterior_head.parameters()) out.push_back(t);
  return out;
}

PhiNets PhiNets::clone() const { return {classifier.clone(), prior_head.clone(), posterior_head.clone()}; }

EnergyNet EnergyNet::clone() const { return {mlp.clone(), power_vectors, dropout}; }

namespace {

std::size_t or_default(std::size_t v, std::size_t fallback) { return v == 0 ? fallback : v; }

}  // namespace

Mlp make_trunk(const NetConfig& cfg, Rng& rng) {
  if (cfg.identity_trunk) {
    if (cfg.input_dim != cfg.feature_dim) {
      throw UsageError("identity trunk requires input_dim == feature_dim");
    }
    return Mlp::identity(cfg.input_dim);
  }
  std::vector<std::size_t> dims{cfg.input_dim};
  for (auto h : cfg.trunk_hidden) dims.push_back(h);
  dims.push_back(cfg.feature_dim);
  Mlp trunk = Mlp::create(dims, Activation::relu, Activation::identity, rng);
  trunk.set_output_transform(cfg.feature_scale, cfg.feature_bound);
  return trunk;
}

PhiNets make_phi(const NetConfig& cfg, Rng& rng) {
  const std::size_t f = cfg.feature_dim;
  const std::size_t ch = or_default(cfg.classifier_hidden, f);
  const std::size_t lh = or_default(cfg.latent_hidden, f);
  PhiNets phi;
  phi.classifier = Mlp::create({2 * f, ch, cfg.num_classes}, Activation::relu, Activation::identity, rng);
  phi.prior_head = Mlp::create({f, lh, lh, lh, 2 * f}, Activation::relu, Activation::identity, rng);
  phi.posterior_head = Mlp::create({f, lh, lh, lh, 2 * f}, Activation::relu, Activation::identity, rng);
  // Heads start near N(0, I) regardless of feature scale, so the first KL
  // terms are O(1).
  const double unit_std_raw = std::log(std::expm1(1.0 - kStdFloor));
  for (Mlp* head : {&phi.prior_head, &phi.posterior_head}) {
    Dense& last = head->layers().back();
    last.weight.mutable_value() *= 1e-2;
    Matrix& bias = last.bias.mutable_value();
    for (std::size_t c = f; c < 2 * f; ++c) bias(0, c) = unit_std_raw;
  }
  return phi;
}

EnergyNet make_energy(const NetConfig& cfg, Rng& rng) {
  const std::size_t f = cfg.feature_dim;
  const std::size_t h = or_default(cfg.energy_hidden, 2 * f);
  EnergyNet net;
  net.mlp = Mlp::create({2 * f, h, h, 1}, Activation::swish, Activation::identity, rng);
  net.dropout = cfg.energy_dropout;
  for (const auto& d : net.mlp.layers()) {
    Matrix u = rng.normal_matrix(1, d.weight.rows());
    u *= 1.0 / l2_norm(u.row(0));
    net.power_vectors.push_back(std::move(u));
  }
  spectral_normalize(net, cfg.spectral_init_iterations);
  return net;
}

Tensor trunk_forward(const Tensor& input, const Mlp& trunk, ParamView view) {
  return trunk.forward(input, view);
}

Tensor classify_logits(const Tensor& x, const Tensor& z, const PhiNets& phi, ParamView view) {
  if (x.cols() != z.cols() || x.rows() != z.rows()) {
    throw ShapeError("classify: feature " + x.value().shape_string() + " and latent " + z.value().shape_string() +
                     " differ");
  }
  return phi.classifier.forward(ad::concat_cols(x, z), view);
}

Tensor classify(const Tensor& x, const Tensor& z, const PhiNets& phi, ParamView view) {
  return ad::softmax(classify_logits(x, z, phi, view));
}

namespace {

GaussianParams gaussian_head(const Tensor& input, const Mlp& head, ParamView view) {
  Tensor out = head.forward(input, view);
  const std::size_t k = out.cols() / 2;
  return {ad::slice_cols(out, 0, k), ad::add_scalar(ad::softplus(ad::slice_cols(out, k, 2 * k)), kStdFloor)};
}

}  // namespace

GaussianParams infer_prior(const Tensor& x, const PhiNets& phi, ParamView view) {
  return gaussian_head(x, phi.prior_head, view);
}

GaussianParams infer_posterior(const Tensor& centers, const PhiNets& phi, ParamView view) {
  return gaussian_head(centers, phi.posterior_head, view);
}

Tensor reparam_sample(const GaussianParams& g, const Matrix& noise) {
  if (!noise.same_shape(g.mean.value())) {
    throw ShapeError("reparam_sample: noise " + noise.shape_string() + " vs mean " + g.mean.value().shape_string());
  }
  return ad::add(g.mean, ad::mul(g.std, Tensor::constant(noise, "noise")));
}

Tensor kl_diag_gauss(const GaussianParams& q, const GaussianParams& p) {
  const auto& qs = q.std.value();
  const auto& ps = p.std.value();
  if (!qs.same_shape(ps) || !q.mean.value().same_shape(p.mean.value()) || !qs.same_shape(q.mean.value())) {
    throw ShapeError("kl_diag_gauss: parameter shapes differ");
  }
  for (std::size_t i = 0; i < qs.size(); ++i) {
    if (!(qs[i] > 0.0) || !(ps[i] > 0.0)) throw InvariantError("kl_diag_gauss: non-positive std");
  }
  // log(σp/σq) + (σq² + (μq − μp)²) / (2σp²) − ½, summed over dims.
  Tensor log_ratio = ad::sub(ad::log(p.std), ad::log(q.std));
  Tensor num = ad::add(ad::square(q.std), ad::square(ad::sub(q.mean, p.mean)));
  Tensor quad = ad::div(num, ad::scale(ad::square(p.std), 2.0));
  return ad::row_sum(ad::add_scalar(ad::add(log_ratio, quad), -0.5));
}

Tensor energy(const Tensor& x, const Tensor& z, const EnergyNet& theta, ParamView view, Rng* dropout_rng) {
  if (x.cols() != z.cols() || x.rows() != z.rows()) {
    throw ShapeError("energy: feature " + x.value().shape_string() + " and latent " + z.value().shape_string() +
                     " differ");
  }
  const auto& layers = theta.mlp.layers();
  if (layers.empty() || layers.front().weight.rows() != 2 * x.cols()) {
    throw ShapeError("energy: network input width does not equal twice the feature dim");
  }
  Tensor h = ad::concat_cols(x, z);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Tensor w = layers[l].weight;
    Tensor b = layers[l].bias;
    if (view == ParamView::frozen) {
      w = ad::stop_grad(w);
      b = ad::stop_grad(b);
    }
    h = apply(theta.mlp.activation(l), ad::add_bias(ad::matmul(h, w), b));
    const bool hidden = l + 1 < layers.size();
    if (hidden && dropout_rng != nullptr && theta.dropout > 0.0) {
      const double keep = 1.0 - theta.dropout;
      Matrix mask(h.rows(), h.cols());
      for (auto& m : mask.data()) m = dropout_rng->bernoulli(keep) ? 1.0 / keep : 0.0;
      h = ad::mul(h, Tensor::constant(std::move(mask), "dropout_mask"));
    }
  }
  return ad::sigmoid(h);
}

namespace {

double sigmoid_of(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

EnergyAndGrad energy_input_gradient(const Matrix& x, const Matrix& z, const EnergyNet& theta) {
  if (!x.same_shape(z)) {
    throw ShapeError("energy: feature " + x.shape_string() + " and latent " + z.shape_string() + " differ");
  }
  const auto& layers = theta.mlp.layers();
  if (layers.empty() || layers.front().weight.rows() != 2 * x.cols()) {
    throw ShapeError("energy: network input width does not equal twice the feature dim");
  }
  const std::size_t n = x.rows(), f = x.cols();
  Matrix h(n, 2 * f);
  for (std::size_t r = 0; r < n; ++r) {
    std::copy(x.row(r).begin(), x.row(r).end(), h.row(r).begin());
    std::copy(z.row(r).begin(), z.row(r).end(), h.row(r).begin() + static_cast<std::ptrdiff_t>(f));
  }
  // Forward, keeping pre-activations and the activation derivative.
  std::vector<Matrix> slope;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix a = matmul(h, layers[l].weight.value());
    const Matrix& b = layers[l].bias.value();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < a.cols(); ++c) a(r, c) += b(0, c);
    Matrix d(a.rows(), a.cols(), 1.0);
    switch (theta.mlp.activation(l)) {
      case Activation::swish:
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double s = sigmoid_of(a[i]);
          const double y = a[i] * s;
          d[i] = s + y * (1.0 - s);
          a[i] = y;
        }
        break;
      case Activation::relu:
        for (std::size_t i = 0; i < a.size(); ++i) {
          d[i] = a[i] > 0 ? 1.0 : 0.0;
          a[i] = a[i] > 0 ? a[i] : 0.0;
        }
        break;
      case Activation::tanh:
        for (std::size_t i = 0; i < a.size(); ++i) {
          a[i] = std::tanh(a[i]);
          d[i] = 1.0 - a[i] * a[i];
        }
        break;
      case Activation::identity:
        break;
    }
    slope.push_back(std::move(d));
    h = std::move(a);
  }
  EnergyAndGrad out{Matrix(n, 1), Matrix(n, f)};
  Matrix g(n, 1);
  for (std::size_t r = 0; r < n; ++r) {
    const double e = sigmoid_of(h(r, 0));
    out.energy(r, 0) = e;
    g(r, 0) = e * (1.0 - e);
  }
  for (std::size_t l = layers.size(); l-- > 0;) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= slope[l][i];
    g = matmul_bt(g, layers[l].weight.value());
  }
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < f; ++c) out.grad(r, c) = g(r, c);
  return out;
}

double power_iteration(const Matrix& w, Matrix& u, int iterations) {
  if (u.cols() != w.rows()) throw ShapeError("power_iteration: vector does not match weight rows");
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Matrix v = matmul(u, w);  // 1 × out
    const double vn = l2_norm(v.row(0));
    if (vn == 0.0) return 0.0;
    v *= 1.0 / vn;
    Matrix wu = matmul_bt(v, w);  // 1 × in
    sigma = l2_norm(wu.row(0));
    if (sigma == 0.0) return 0.0;
    wu *= 1.0 / sigma;
    u = std::move(wu);
  }
  return sigma;
}

std::vector<double> spectral_normalize(EnergyNet& theta, int iterations) {
  if (iterations < 1) throw UsageError("spectral_normalize: iterations must be >= 1");
  auto& layers = theta.mlp.layers();
  if (theta.power_vectors.size() != layers.size()) {
    throw InvariantError("spectral_normalize: one power vector per weight required");
  }
  std::vector<double> estimates;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix& w = layers[l].weight.mutable_value();
    const double sigma = power_iteration(w, theta.power_vectors[l], iterations);
    estimates.push_back(sigma);
    if (sigma > 0.0) w *= 1.0 / sigma;
  }
  return estimates;
}

}  // namespace ebsa::nets
