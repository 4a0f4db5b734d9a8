#include "ebsa/trainer.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include "ebsa/checkpoint.hpp"
#include "ebsa/config.hpp"
#include "ebsa/error.hpp"

namespace ebsa::train {

std::string to_string(Objective o) { return o == Objective::with_latent ? "with_latent" : "no_latent"; }

Objective objective_from_string(const std::string& s) {
  if (s == "with_latent") return Objective::with_latent;
  if (s == "no_latent") return Objective::no_latent;
  throw UsageError("unknown objective '" + s + "' (expected with_latent or no_latent)");
}

void TrainConfig::validate() const {
  if (iterations < 0) throw UsageError("train: iterations must be >= 0");
  if (batch_size == 0) throw UsageError("train: batch_size must be >= 1");
  if (!(lr_trunk >= 0) || !(lr_model >= 0)) throw UsageError("train: learning rates must be >= 0");
  if (buffer_capacity == 0) throw UsageError("train: buffer capacity must be >= 1");
  if (!(buffer_probability >= 0 && buffer_probability <= 1)) {
    throw UsageError("train: buffer probability must lie in [0, 1]");
  }
  if (spectral_iterations < 1) throw UsageError("train: spectral_iterations must be >= 1");
  sgld.validate();
}

ModelBundle ModelBundle::create(const nets::NetConfig& net, std::span<const int> domain_ids, const TrainConfig& cfg) {
  if (domain_ids.empty()) throw UsageError("bundle: need at least one source domain");
  ModelBundle b;
  b.net = net;
  Rng rng(derive_seed(cfg.seed, 0x696e6974));
  b.trunk = nets::make_trunk(net, rng);
  for (int id : domain_ids) {
    DomainModel d;
    d.domain = id;
    d.phi = nets::make_phi(net, rng);
    d.theta = nets::make_energy(net, rng);
    d.buffer = sgld::ReplayBuffer(cfg.buffer_capacity, cfg.buffer_probability, net.feature_dim);
    b.domains.push_back(std::move(d));
  }
  return b;
}

namespace {

void append_mlp(std::vector<std::pair<std::string, ad::Tensor>>& out, const std::string& prefix,
                const nets::Mlp& mlp) {
  const auto& layers = mlp.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    out.emplace_back(prefix + "." + std::to_string(l) + ".weight", layers[l].weight);
    out.emplace_back(prefix + "." + std::to_string(l) + ".bias", layers[l].bias);
  }
}

std::string domain_prefix(std::size_t k) { return "d" + std::to_string(k); }

void fnv_mix(std::uint64_t& h, const Matrix& m) {
  for (double v : m.data()) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof v);
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
}

}  // namespace

std::vector<std::pair<std::string, ad::Tensor>> ModelBundle::named_parameters() const {
  std::vector<std::pair<std::string, ad::Tensor>> out;
  append_mlp(out, "trunk", trunk);
  for (std::size_t k = 0; k < domains.size(); ++k) {
    const auto p = domain_prefix(k);
    append_mlp(out, p + ".classifier", domains[k].phi.classifier);
    append_mlp(out, p + ".prior", domains[k].phi.prior_head);
    append_mlp(out, p + ".posterior", domains[k].phi.posterior_head);
    append_mlp(out, p + ".energy", domains[k].theta.mlp);
  }
  return out;
}

std::uint64_t ModelBundle::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [_, t] : named_parameters()) fnv_mix(h, t.value());
  for (const auto& d : domains)
    for (const auto& u : d.theta.power_vectors) fnv_mix(h, u);
  return h;
}

ModelBundle ModelBundle::clone() const {
  ModelBundle b;
  b.net = net;
  b.trunk = trunk.clone();
  for (const auto& d : domains) b.domains.push_back({d.domain, d.phi.clone(), d.theta.clone(), d.buffer});
  b.domain_centroids = domain_centroids;
  b.class_centers = class_centers;
  b.trained = trained;
  b.iterations_done = iterations_done;
  b.optimizer = optimizer;
  return b;
}

void ModelBundle::save(const std::filesystem::path& path) const {
  ArrayFile file;
  auto& meta = file.meta();
  meta["format"] = "ebsa-bundle";
  meta["version"] = 1;
  meta["net"] = config::to_json(net);
  meta["trained"] = trained;
  meta["iterations_done"] = iterations_done;
  std::vector<int> ids;
  for (const auto& d : domains) ids.push_back(d.domain);
  meta["domains"] = ids;
  meta["buffer_capacity"] = domains.front().buffer.capacity();
  meta["buffer_probability"] = domains.front().buffer.sample_probability();

  for (const auto& [name, t] : named_parameters()) file.add(name, t.value());
  for (std::size_t k = 0; k < domains.size(); ++k) {
    const auto p = domain_prefix(k);
    const auto& d = domains[k];
    for (std::size_t l = 0; l < d.theta.power_vectors.size(); ++l) {
      file.add(p + ".energy.u" + std::to_string(l), d.theta.power_vectors[l]);
    }
    Matrix feats(d.buffer.size(), feature_dim());
    Matrix labels(d.buffer.size(), 1), origins(d.buffer.size(), 1);
    for (std::size_t r = 0; r < d.buffer.size(); ++r) {
      const auto& e = d.buffer.at(r);
      std::copy(e.feature.begin(), e.feature.end(), feats.row(r).begin());
      labels(r, 0) = e.label;
      origins(r, 0) = e.domain;
    }
    file.add(p + ".buffer.features", std::move(feats));
    file.add(p + ".buffer.labels", std::move(labels));
    file.add(p + ".buffer.domains", std::move(origins));
    if (k < class_centers.size()) file.add(p + ".class_centers", class_centers[k]);
  }
  if (!domain_centroids.empty()) file.add("domain_centroids", domain_centroids);
  for (const auto& [name, slot] : optimizer) {
    file.add("adam." + name + ".m", slot.m);
    file.add("adam." + name + ".v", slot.v);
    meta["adam_steps"][name] = slot.steps;
  }
  file.save(path);
}

ModelBundle ModelBundle::load(const std::filesystem::path& path) {
  const ArrayFile file = ArrayFile::load(path);
  const auto& meta = file.meta();
  if (meta.value("format", "") != "ebsa-bundle") throw IoError("'" + path.string() + "' is not a model bundle");

  TrainConfig shape_cfg;
  shape_cfg.buffer_capacity = meta.at("buffer_capacity").get<std::size_t>();
  shape_cfg.buffer_probability = meta.at("buffer_probability").get<double>();
  const auto ids = meta.at("domains").get<std::vector<int>>();
  nets::NetConfig net = config::net_from_json(meta.at("net"));
  net.spectral_init_iterations = 1;
  ModelBundle b = create(net, ids, shape_cfg);
  b.net = config::net_from_json(meta.at("net"));
  b.trained = meta.at("trained").get<bool>();
  b.iterations_done = meta.at("iterations_done").get<int>();

  for (auto& [name, t] : b.named_parameters()) {
    const Matrix& v = file.get(name);
    if (!v.same_shape(t.value())) {
      throw IoError("checkpoint array '" + name + "' has shape " + v.shape_string() + ", expected " +
                    t.value().shape_string());
    }
    t.mutable_value() = v;
  }
  b.class_centers.clear();
  for (std::size_t k = 0; k < b.domains.size(); ++k) {
    const auto p = domain_prefix(k);
    auto& d = b.domains[k];
    for (std::size_t l = 0; l < d.theta.power_vectors.size(); ++l) {
      d.theta.power_vectors[l] = file.get(p + ".energy.u" + std::to_string(l));
    }
    const Matrix& feats = file.get(p + ".buffer.features");
    const Matrix& labels = file.get(p + ".buffer.labels");
    const Matrix& origins = file.get(p + ".buffer.domains");
    for (std::size_t r = 0; r < feats.rows(); ++r) {
      auto row = feats.row(r);
      d.buffer.push({std::vector<double>(row.begin(), row.end()), static_cast<int>(labels(r, 0)),
                     static_cast<int>(origins(r, 0))});
    }
    if (file.has(p + ".class_centers")) b.class_centers.push_back(file.get(p + ".class_centers"));
  }
  if (file.has("domain_centroids")) b.domain_centroids = file.get("domain_centroids");
  if (meta.contains("adam_steps")) {
    for (const auto& [name, steps] : meta.at("adam_steps").items()) {
      b.optimizer[name] = {file.get("adam." + name + ".m"), file.get("adam." + name + ".v"), steps.get<long>()};
    }
  }
  return b;
}

Matrix features_of(const ModelBundle& bundle, const Matrix& raw) {
  if (raw.cols() != bundle.input_dim()) {
    throw ShapeError("input has " + std::to_string(raw.cols()) + " columns but the model expects " +
                     std::to_string(bundle.input_dim()));
  }
  return nets::trunk_forward(ad::Tensor::constant(raw), bundle.trunk, nets::ParamView::frozen).value();
}

void refresh_reference(ModelBundle& bundle, std::span<const DomainDataset> sources) {
  if (sources.size() != bundle.num_domains()) throw UsageError("refresh_reference: one dataset per domain required");
  const std::size_t f = bundle.feature_dim();
  bundle.domain_centroids = Matrix(sources.size(), f);
  bundle.class_centers.clear();
  for (std::size_t k = 0; k < sources.size(); ++k) {
    const Matrix feats = features_of(bundle, sources[k].features);
    Matrix centers(bundle.num_classes(), f);
    std::vector<std::size_t> counts(bundle.num_classes(), 0);
    for (std::size_t r = 0; r < feats.rows(); ++r) {
      const auto y = static_cast<std::size_t>(sources[k].labels[r]);
      for (std::size_t c = 0; c < f; ++c) {
        centers(y, c) += feats(r, c);
        bundle.domain_centroids(k, c) += feats(r, c) / static_cast<double>(feats.rows());
      }
      ++counts[y];
    }
    for (std::size_t y = 0; y < counts.size(); ++y)
      for (std::size_t c = 0; c < f; ++c)
        centers(y, c) = counts[y] > 0 ? centers(y, c) / static_cast<double>(counts[y]) : 0.0;
    bundle.class_centers.push_back(std::move(centers));
  }
}

namespace {

void adam_update(std::map<std::string, AdamSlot>& state, const std::string& name, ad::Tensor& param, double lr,
                 const AdamConfig& cfg) {
  const Matrix& g = param.grad();
  if (g.empty()) return;  // not on any gradient path this step
  Matrix& w = param.mutable_value();
  auto& slot = state[name];
  if (slot.m.empty()) {
    slot.m = Matrix(w.rows(), w.cols());
    slot.v = Matrix(w.rows(), w.cols());
  }
  ++slot.steps;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(slot.steps));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(slot.steps));
  for (std::size_t i = 0; i < w.size(); ++i) {
    slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i];
    slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    w[i] -= lr * (slot.m[i] / c1) / (std::sqrt(slot.v[i] / c2) + cfg.eps);
  }
}

}  // namespace

objective::LossBreakdown train_step(ModelBundle& bundle, std::size_t domain_index,
                                    std::span<const DomainBatch> raw_batches, const TrainConfig& cfg, Rng& rng) {
  const std::size_t S = bundle.num_domains();
  if (domain_index >= S) throw UsageError("train_step: domain index out of range");
  if (raw_batches.size() != S) throw UsageError("train_step: one batch per source domain required");
  auto& dm = bundle.domains[domain_index];
  const DomainBatch& pos_raw = raw_batches[domain_index];
  pos_raw.validate();

  // Positives carry gradient into the trunk.
  ad::Tensor x_pos = nets::trunk_forward(ad::Tensor::constant(pos_raw.features), bundle.trunk);
  DomainBatch pos_values{x_pos.value(), pos_raw.labels, pos_raw.domains};

  std::vector<DomainBatch> others;
  for (std::size_t j = 0; j < S; ++j) {
    if (j == domain_index || raw_batches[j].empty()) continue;
    raw_batches[j].validate();
    others.push_back({features_of(bundle, raw_batches[j].features), raw_batches[j].labels, raw_batches[j].domains});
  }
  DomainBatch negatives = DomainBatch::concat(others);
  if (negatives.empty()) {
    static thread_local bool warned = false;
    if (!warned) {
      std::cerr << "warning: no negatives (single source domain); training the classifier only\n";
      warned = true;
    }
    negatives.features = Matrix(0, bundle.feature_dim());
  } else {
    negatives = sgld::buffer_init(negatives, dm.buffer, rng).batch;
  }

  objective::Negatives neg;
  neg.labels = negatives.labels;
  Matrix adapted;
  if (!negatives.empty()) {
    const std::size_t m = negatives.size();
    const std::size_t f = bundle.feature_dim();
    Matrix z;
    if (cfg.objective == Objective::with_latent) {
      neg.centers = objective::negative_centers(pos_values, negatives);
      auto q = nets::infer_posterior(ad::Tensor::constant(neg.centers), dm.phi, nets::ParamView::frozen);
      z = nets::reparam_sample(q, rng.normal_matrix(m, f)).value();
    } else {
      z = Matrix(m, f);
    }
    sgld::SgldConfig chain_cfg = cfg.sgld;
    chain_cfg.record_trace = false;
    Rng chain_rng(rng.engine()());
    adapted = sgld::adapt(negatives.features, z, dm.theta, chain_cfg, std::span<Rng>(&chain_rng, 1)).features;
    neg.latent = std::move(z);
    neg.adapted = ad::Tensor::variable(adapted, "adapted_negatives");
  }

  objective::LossOptions opts{cfg.weights, &rng};
  objective::Positives pos{x_pos, pos_raw.labels};
  objective::LossBreakdown loss = cfg.objective == Objective::with_latent
                                      ? objective::loss_with_latent(pos, neg, dm.phi, dm.theta, rng, opts)
                                      : objective::loss_no_latent(pos, neg, dm.phi, dm.theta, opts);
  if (!std::isfinite(loss.total)) {
    throw NumericError("train_step: non-finite loss for domain " + std::to_string(dm.domain) +
                       "; parameters left unchanged");
  }
  ad::backward(loss.total_tensor);

  std::vector<std::pair<std::string, ad::Tensor>> updates;
  const auto prefix = domain_prefix(domain_index) + ".";
  for (auto& [name, t] : bundle.named_parameters()) {
    if (name.starts_with("trunk.") || name.starts_with(prefix)) updates.emplace_back(name, t);
  }
  for (auto& [name, t] : updates) {
    if (!t.grad().all_finite()) {
      throw NumericError("train_step: non-finite gradient for '" + name + "'; parameters left unchanged");
    }
  }
  for (auto& [name, t] : updates) {
    const double lr = name.starts_with("trunk.") ? cfg.lr_trunk : cfg.lr_model;
    adam_update(bundle.optimizer, name, t, lr, cfg.adam);
  }
  nets::spectral_normalize(dm.theta, cfg.spectral_iterations);
  if (!negatives.empty()) {
    sgld::buffer_push({adapted, negatives.labels, negatives.domains}, dm.buffer);
  }
  return loss;
}

std::vector<StepRecord> train(ModelBundle& bundle, std::span<const DomainDataset> sources, const TrainConfig& cfg,
                              const TrainHooks& hooks) {
  cfg.validate();
  const std::size_t S = bundle.num_domains();
  if (sources.size() != S) {
    throw UsageError("train: " + std::to_string(sources.size()) + " source sets for a bundle with " +
                     std::to_string(S) + " domains");
  }
  for (const auto& ds : sources) {
    ds.validate(bundle.num_classes());
    if (ds.dim() != bundle.input_dim()) {
      throw ShapeError("train: domain " + std::to_string(ds.domain) + " has " + std::to_string(ds.dim()) +
                       " features, model expects " + std::to_string(bundle.input_dim()));
    }
  }
  const std::size_t negatives = cfg.negatives == 0 ? cfg.batch_size : cfg.negatives;

  std::vector<StepRecord> history;
  for (int iter = bundle.iterations_done; iter < cfg.iterations; ++iter) {
    for (std::size_t i = 0; i < S; ++i) {
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(iter), i, 0x73746570));
      std::vector<DomainBatch> batches(S);
      std::size_t rank = 0;
      for (std::size_t j = 0; j < S; ++j) {
        std::size_t n = cfg.batch_size;
        if (j != i) {
          n = negatives / (S - 1) + (rank < negatives % (S - 1) ? 1 : 0);
          ++rank;
        }
        batches[j] = sample_batch(sources[j], n, rng);
      }
      StepRecord rec;
      rec.iteration = iter;
      rec.domain_index = static_cast<int>(i);
      rec.loss = train_step(bundle, i, batches, cfg, rng);
      rec.loss.total_tensor = {};
      rec.buffer_size = bundle.domains[i].buffer.size();
      if (hooks.on_step) hooks.on_step(rec);
      history.push_back(std::move(rec));
    }
    bundle.iterations_done = iter + 1;
    const bool last = iter + 1 == cfg.iterations;
    if (last || (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0)) {
      refresh_reference(bundle, sources);
      bundle.trained = true;
      if (hooks.on_checkpoint) hooks.on_checkpoint(bundle, iter + 1);
    }
  }
  return history;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const StepRecord> history, bool append) {
  const bool header = !append || !std::filesystem::exists(path);
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  auto fmt = [](double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
  };
  if (header) out << "iteration,domain,classification,kl,positive_energy,negative_energy,adapted,total,buffer_size\n";
  for (const auto& r : history) {
    out << r.iteration << ',' << r.domain_index << ',' << fmt(r.loss.classification) << ',' << fmt(r.loss.kl) << ','
        << fmt(r.loss.positive_energy) << ',' << fmt(r.loss.negative_energy) << ',' << fmt(r.loss.adapted) << ','
        << fmt(r.loss.total) << ',' << r.buffer_size << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace ebsa::train
