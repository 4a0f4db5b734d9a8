#include "ebsa/objective.hpp"

#include <map>

#include "ebsa/error.hpp"

namespace ebsa::objective {

using ad::Tensor;
using nets::ParamView;

std::optional<std::vector<double>> class_center(const DomainBatch& batch, int cls) {
  std::vector<double> acc(batch.features.cols(), 0.0);
  std::size_t count = 0;
  for (std::size_t r = 0; r < batch.size(); ++r) {
    if (batch.labels[r] != cls) continue;
    auto row = batch.features.row(r);
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += row[c];
    ++count;
  }
  if (count == 0) return std::nullopt;
  for (auto& v : acc) v /= static_cast<double>(count);
  return acc;
}

Tensor class_center_rows(const Tensor& features, std::span<const int> labels) {
  const std::size_t n = labels.size();
  if (features.rows() != n) throw ShapeError("class_center_rows: label count does not match rows");
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y];
  Matrix avg(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (labels[i] == labels[j]) avg(i, j) = 1.0 / static_cast<double>(counts[labels[i]]);
  return ad::matmul(Tensor::constant(std::move(avg), "center_weights"), features);
}

Matrix negative_centers(const DomainBatch& positives, const DomainBatch& negatives) {
  Matrix out(negatives.size(), negatives.features.cols());
  std::map<int, std::vector<double>> cache;
  for (std::size_t r = 0; r < negatives.size(); ++r) {
    const int y = negatives.labels[r];
    auto it = cache.find(y);
    if (it == cache.end()) {
      auto c = class_center(positives, y);
      if (!c) c = class_center(negatives, y);
      it = cache.emplace(y, *c).first;
    }
    std::copy(it->second.begin(), it->second.end(), out.row(r).begin());
  }
  return out;
}

namespace {

void check_inputs(const Positives& pos, const Negatives& neg) {
  if (pos.features.rows() != pos.labels.size()) throw ShapeError("loss: positive labels do not match rows");
  if (pos.labels.empty()) throw UsageError("loss: empty positive batch");
  if (neg.labels.empty()) return;
  if (!neg.adapted.defined() || !neg.adapted.requires_grad()) {
    throw UsageError("loss: adapted negatives must be a gradient-carrying tensor");
  }
  if (neg.adapted.rows() != neg.labels.size()) throw ShapeError("loss: negative labels do not match rows");
  if (neg.adapted.cols() != pos.features.cols()) throw ShapeError("loss: positive and negative dims differ");
}

LossBreakdown finish(Tensor cls, Tensor kl, Tensor pos_e, Tensor neg_e, Tensor adapted, const LossWeights& w) {
  LossBreakdown out;
  cls = ad::scale(cls, w.classification);
  kl = ad::scale(kl, w.kl);
  pos_e = ad::scale(pos_e, w.positive_energy);
  neg_e = ad::scale(neg_e, w.negative_energy);
  adapted = ad::scale(adapted, w.adapted);
  out.total_tensor = ad::add(ad::add(ad::add(cls, kl), ad::sub(pos_e, neg_e)), adapted);
  out.classification = cls.item();
  out.kl = kl.item();
  out.positive_energy = pos_e.item();
  out.negative_energy = neg_e.item();
  out.adapted = adapted.item();
  out.total = out.total_tensor.item();
  return out;
}

Tensor zero_scalar() { return Tensor::constant(Matrix(1, 1), "zero"); }

}  // namespace

LossBreakdown loss_no_latent(const Positives& pos, const Negatives& neg, const nets::PhiNets& phi,
                             const nets::EnergyNet& theta, const LossOptions& opts) {
  check_inputs(pos, neg);
  const std::size_t f = pos.features.cols();
  Tensor z_pos = Tensor::constant(Matrix(pos.labels.size(), f), "z_none");

  Tensor cls = ad::mean(ad::cross_entropy(nets::classify_logits(pos.features, z_pos, phi), pos.labels));
  Tensor pos_e = ad::mean(nets::energy(pos.features, z_pos, theta, ParamView::trainable, opts.dropout_rng));
  Tensor neg_e = zero_scalar();
  Tensor adapted = zero_scalar();
  if (!neg.labels.empty()) {
    Tensor z_neg = Tensor::constant(Matrix(neg.labels.size(), f), "z_none");
    neg_e = ad::mean(
        nets::energy(ad::stop_grad(neg.adapted), z_neg, theta, ParamView::trainable, opts.dropout_rng));
    Tensor e_frozen = nets::energy(neg.adapted, z_neg, theta, ParamView::frozen, opts.dropout_rng);
    Tensor nll_frozen =
        ad::cross_entropy(nets::classify_logits(neg.adapted, z_neg, phi, ParamView::frozen), neg.labels);
    adapted = ad::mean(ad::add(e_frozen, nll_frozen));
  }
  return finish(cls, zero_scalar(), pos_e, neg_e, adapted, opts.weights);
}

LossBreakdown loss_with_latent(const Positives& pos, const Negatives& neg, const nets::PhiNets& phi,
                               const nets::EnergyNet& theta, Rng& rng, const LossOptions& opts) {
  check_inputs(pos, neg);
  const std::size_t n = pos.labels.size();
  const std::size_t f = pos.features.cols();

  Tensor centers = class_center_rows(pos.features, pos.labels);
  nets::GaussianParams q_pos = nets::infer_posterior(centers, phi);
  nets::GaussianParams p_pos = nets::infer_prior(pos.features, phi);
  Tensor z_pos = nets::reparam_sample(q_pos, rng.normal_matrix(n, f));

  Tensor cls = ad::mean(ad::cross_entropy(nets::classify_logits(pos.features, z_pos, phi), pos.labels));
  Tensor kl = ad::mean(nets::kl_diag_gauss(q_pos, p_pos));
  Tensor pos_e = ad::mean(nets::energy(pos.features, z_pos, theta, ParamView::trainable, opts.dropout_rng));

  Tensor neg_e = zero_scalar();
  Tensor adapted = zero_scalar();
  if (!neg.labels.empty()) {
    const std::size_t m = neg.labels.size();
    if (neg.centers.rows() != m || neg.centers.cols() != f) {
      throw ShapeError("loss_with_latent: negative centers " + neg.centers.shape_string() + " do not match batch");
    }
    Tensor d_neg = Tensor::constant(neg.centers, "negative_centers");
    nets::GaussianParams q_neg = nets::infer_posterior(d_neg, phi, ParamView::frozen);
    Tensor z_neg;
    if (neg.latent.empty()) {
      z_neg = nets::reparam_sample(q_neg, rng.normal_matrix(m, f));
    } else {
      if (neg.latent.rows() != m || neg.latent.cols() != f) {
        throw ShapeError("loss_with_latent: negative latents " + neg.latent.shape_string() + " do not match batch");
      }
      z_neg = Tensor::constant(neg.latent, "negative_latent");
    }

    neg_e = ad::mean(
        nets::energy(ad::stop_grad(neg.adapted), z_neg, theta, ParamView::trainable, opts.dropout_rng));

    Tensor e_frozen = nets::energy(neg.adapted, z_neg, theta, ParamView::frozen, opts.dropout_rng);
    Tensor nll_frozen =
        ad::cross_entropy(nets::classify_logits(neg.adapted, z_neg, phi, ParamView::frozen), neg.labels);
    nets::GaussianParams p_adapted = nets::infer_prior(neg.adapted, phi, ParamView::frozen);
    Tensor kl_adapted = nets::kl_diag_gauss(q_neg, p_adapted);
    adapted = ad::sub(ad::mean(ad::add(e_frozen, nll_frozen)), ad::mean(kl_adapted));
  }
  return finish(cls, kl, pos_e, neg_e, adapted, opts.weights);
}

}  // namespace ebsa::objective
