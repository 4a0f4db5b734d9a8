#include "ebsa/inference.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include "ebsa/error.hpp"

namespace ebsa::infer {

using nets::ParamView;

std::string to_string(LatentMode m) {
  switch (m) {
    case LatentMode::none:
      return "none";
    case LatentMode::prior:
      return "prior";
    case LatentMode::oracle:
      return "oracle";
  }
  return "?";
}

std::string to_string(Aggregation a) {
  switch (a) {
    case Aggregation::ensemble:
      return "ensemble";
    case Aggregation::closest_cosine:
      return "closest_cosine";
    case Aggregation::weighted_cosine:
      return "weighted_cosine";
    case Aggregation::most_confident:
      return "most_confident";
  }
  return "?";
}

LatentMode latent_mode_from_string(const std::string& s) {
  if (s == "none") return LatentMode::none;
  if (s == "prior") return LatentMode::prior;
  if (s == "oracle") return LatentMode::oracle;
  throw UsageError("unknown latent mode '" + s + "' (expected none, prior or oracle)");
}

Aggregation aggregation_from_string(const std::string& s) {
  if (s == "ensemble") return Aggregation::ensemble;
  if (s == "closest_cosine") return Aggregation::closest_cosine;
  if (s == "weighted_cosine") return Aggregation::weighted_cosine;
  if (s == "most_confident") return Aggregation::most_confident;
  throw UsageError("unknown aggregation '" + s + "'");
}

void InferenceConfig::validate() const {
  sgld.validate();
  if (mc_samples < 1) throw UsageError("inference: mc_samples must be >= 1");
  if (threads < 1) throw UsageError("inference: threads must be >= 1");
}

int argmax(std::span<const double> p) {
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

namespace {

/// Per sample, per source: chain-averaged probabilities and energy at one step count.
struct Snapshot {
  std::vector<std::vector<std::vector<double>>> probs;  // [sample][source][class]
  std::vector<std::vector<double>> energy;              // [sample][source]
};

struct ChainRun {
  Matrix features;                  // n × F
  std::map<int, Snapshot> at_step;  // keyed by step count
  std::vector<std::vector<sgld::AdaptationTrace>> traces;  // [sample][source]
};

ChainRun run_chains(const Matrix& raw, std::span<const int> labels, const train::ModelBundle& bundle,
                    const InferenceConfig& cfg, std::size_t first_index, const std::set<int>& snapshot_steps) {
  const std::size_t n = raw.rows();
  const std::size_t S = bundle.num_domains();
  const std::size_t C = bundle.num_classes();
  const std::size_t F = bundle.feature_dim();
  const auto N = static_cast<std::size_t>(cfg.mc_samples);
  const int max_steps = snapshot_steps.empty() ? 0 : *snapshot_steps.rbegin();

  ChainRun run;
  run.features = train::features_of(bundle, raw);
  for (int k : snapshot_steps) {
    auto& snap = run.at_step[k];
    snap.probs.assign(n, std::vector<std::vector<double>>(S, std::vector<double>(C, 0.0)));
    snap.energy.assign(n, std::vector<double>(S, 0.0));
  }
  if (cfg.sgld.record_trace) run.traces.assign(n, std::vector<sgld::AdaptationTrace>(S));
  if (n == 0) return run;

  // Row s*N + c is chain c of sample s.
  std::vector<std::size_t> expand(n * N);
  for (std::size_t r = 0; r < expand.size(); ++r) expand[r] = r / N;
  const Matrix x0 = run.features.select_rows(expand);

  for (std::size_t i = 0; i < S; ++i) {
    const auto& dm = bundle.domains[i];
    std::vector<Rng> rngs;
    rngs.reserve(n * N);
    for (std::size_t r = 0; r < n * N; ++r) {
      rngs.emplace_back(derive_seed(cfg.seed, first_index + r / N, i, r % N));
    }

    Matrix z(n * N, F);
    if (cfg.mode == LatentMode::prior) {
      auto g = nets::infer_prior(ad::Tensor::constant(x0), dm.phi, ParamView::frozen);
      for (std::size_t r = 0; r < n * N; ++r)
        for (std::size_t c = 0; c < F; ++c) z(r, c) = g.mean.value()(r, c) + g.std.value()(r, c) * rngs[r].normal();
    } else if (cfg.mode == LatentMode::oracle) {
      if (labels.size() != n) throw UsageError("oracle latent mode requires labels");
      Matrix centers(n * N, F);
      for (std::size_t r = 0; r < n * N; ++r) {
        const int y = labels[r / N];
        if (y < 0 || static_cast<std::size_t>(y) >= C) throw UsageError("oracle latent mode: label out of range");
        auto src = bundle.class_centers.at(i).row(static_cast<std::size_t>(y));
        std::copy(src.begin(), src.end(), centers.row(r).begin());
      }
      auto g = nets::infer_posterior(ad::Tensor::constant(centers), dm.phi, ParamView::frozen);
      for (std::size_t r = 0; r < n * N; ++r)
        for (std::size_t c = 0; c < F; ++c) z(r, c) = g.mean.value()(r, c) + g.std.value()(r, c) * rngs[r].normal();
    }

    const ad::Tensor zt = ad::Tensor::constant(z, "z");
    auto observe = [&](int step, const Matrix& x) {
      auto it = run.at_step.find(step);
      if (it == run.at_step.end()) return;
      const ad::Tensor xt = ad::Tensor::constant(x);
      const Matrix p = nets::classify(xt, zt, dm.phi, ParamView::frozen).value();
      const Matrix e = nets::energy(xt, zt, dm.theta, ParamView::frozen).value();
      for (std::size_t r = 0; r < n * N; ++r) {
        const std::size_t s = r / N;
        auto& probs = it->second.probs[s][i];
        for (std::size_t c = 0; c < C; ++c) probs[c] += p(r, c) / static_cast<double>(N);
        it->second.energy[s][i] += e(r, 0) / static_cast<double>(N);
      }
    };

    sgld::SgldConfig chain_cfg = cfg.sgld;
    chain_cfg.num_steps = max_steps;
    sgld::ProbeFn probe;
    if (chain_cfg.record_trace) {
      probe = [&](const Matrix& x) {
        return nets::classify(ad::Tensor::constant(x), zt, dm.phi, ParamView::frozen).value();
      };
    }
    auto result = sgld::adapt(x0, sgld::conditional_gradient(dm.theta, z), chain_cfg, rngs, probe, observe);

    if (result.trace) {
      for (std::size_t s = 0; s < n; ++s) {
        auto& out = run.traces[s][i];
        std::vector<std::size_t> rows;
        for (std::size_t c = 0; c < N; ++c) rows.push_back(s * N + c);
        for (std::size_t k = 0; k < result.trace->length(); ++k) {
          out.features.push_back(result.trace->features[k].select_rows(rows));
          out.energies.push_back(result.trace->energies[k].select_rows(rows));
          if (!result.trace->probabilities.empty()) {
            out.probabilities.push_back(result.trace->probabilities[k].select_rows(rows));
          }
        }
      }
    }
  }
  return run;
}

std::vector<double> mean_of(const std::vector<std::vector<double>>& rows) {
  std::vector<double> out(rows.front().size(), 0.0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += r[c] / static_cast<double>(rows.size());
  return out;
}

std::vector<PredictionRecord> records_from(ChainRun&& run, std::span<const int> labels, int steps,
                                           std::size_t first_index) {
  const auto& pre = run.at_step.at(0);
  const auto& post = run.at_step.at(steps);
  std::vector<PredictionRecord> out(run.features.rows());
  for (std::size_t s = 0; s < out.size(); ++s) {
    auto& rec = out[s];
    rec.sample = first_index + s;
    rec.label = labels.size() == out.size() ? labels[s] : -1;
    rec.pre_per_source = pre.probs[s];
    rec.post_per_source = post.probs[s];
    rec.pre_ensemble = mean_of(rec.pre_per_source);
    rec.ensemble = mean_of(rec.post_per_source);
    rec.predicted = argmax(rec.ensemble);
    rec.predicted_pre = argmax(rec.pre_ensemble);
    rec.pre_energy_per_source = pre.energy[s];
    rec.post_energy_per_source = post.energy[s];
    auto f = run.features.row(s);
    rec.feature.assign(f.begin(), f.end());
    if (!run.traces.empty()) rec.traces = std::move(run.traces[s]);
  }
  return out;
}

void require_trained(const train::ModelBundle& bundle) {
  if (!bundle.trained) throw UsageError("inference requires a trained model bundle");
}

}  // namespace

PredictionRecord predict_sample(std::span<const double> raw, std::optional<int> label,
                                const train::ModelBundle& bundle, const InferenceConfig& cfg,
                                std::size_t sample_index) {
  std::vector<int> labels;
  if (label) labels.push_back(*label);
  InferenceConfig single = cfg;
  single.threads = 1;
  return predict_batch(Matrix::row_vector(raw), labels, bundle, single, sample_index).front();
}

std::vector<PredictionRecord> predict_batch(const Matrix& raw, std::span<const int> labels,
                                            const train::ModelBundle& bundle, const InferenceConfig& cfg,
                                            std::size_t first_index) {
  cfg.validate();
  require_trained(bundle);
  if (!labels.empty() && labels.size() != raw.rows()) throw ShapeError("predict_batch: labels do not match rows");
  const int K = cfg.sgld.num_steps;
  const std::set<int> snaps{0, K};

  const std::size_t n = raw.rows();
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.threads), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    return records_from(run_chains(raw, labels, bundle, cfg, first_index, snaps), labels, K, first_index);
  }

  std::vector<std::vector<PredictionRecord>> parts(workers);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        const std::size_t b = std::min(n, w * chunk), e = std::min(n, b + chunk);
        const Matrix part = raw.slice_rows(b, e);
        std::span<const int> lab = labels.empty() ? labels : labels.subspan(b, e - b);
        parts[w] = records_from(run_chains(part, lab, bundle, cfg, first_index + b, snaps), lab, K, first_index + b);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<PredictionRecord> out;
  for (auto& p : parts)
    for (auto& r : p) out.push_back(std::move(r));
  return out;
}

std::vector<double> aggregate(std::span<const std::vector<double>> per_source, Aggregation mode,
                              std::span<const double> feature, const Matrix* centroids) {
  if (per_source.empty()) throw UsageError("aggregate: no per-source predictions");
  const std::size_t S = per_source.size();
  auto cosines = [&] {
    if (centroids == nullptr || centroids->rows() != S || centroids->cols() != feature.size() || feature.empty()) {
      throw UsageError("aggregate: cosine modes need one centroid per source matching the feature dim");
    }
    std::vector<double> sims(S);
    const double fn = l2_norm(feature);
    for (std::size_t i = 0; i < S; ++i) {
      const double denom = fn * l2_norm(centroids->row(i));
      sims[i] = denom > 0 ? dot(feature, centroids->row(i)) / denom : 0.0;
    }
    return sims;
  };

  switch (mode) {
    case Aggregation::ensemble:
      break;
    case Aggregation::closest_cosine: {
      const auto sims = cosines();
      return per_source[static_cast<std::size_t>(argmax(sims))];
    }
    case Aggregation::weighted_cosine: {
      const auto sims = cosines();
      const double m = *std::max_element(sims.begin(), sims.end());
      std::vector<double> w(S);
      double total = 0.0;
      for (std::size_t i = 0; i < S; ++i) total += (w[i] = std::exp(sims[i] - m));
      std::vector<double> out(per_source.front().size(), 0.0);
      for (std::size_t i = 0; i < S; ++i)
        for (std::size_t c = 0; c < out.size(); ++c) out[c] += w[i] / total * per_source[i][c];
      return out;
    }
    case Aggregation::most_confident: {
      std::size_t best = 0;
      double best_p = -1.0;
      for (std::size_t i = 0; i < S; ++i) {
        const double top = *std::max_element(per_source[i].begin(), per_source[i].end());
        if (top > best_p) {
          best_p = top;
          best = i;
        }
      }
      return per_source[best];
    }
  }
  std::vector<double> out(per_source.front().size(), 0.0);
  for (const auto& p : per_source)
    for (std::size_t c = 0; c < out.size(); ++c) out[c] += p[c] / static_cast<double>(S);
  return out;
}

std::vector<SweepRow> step_sweep(std::span<const DomainDataset> test_sets, const train::ModelBundle& bundle,
                                 std::span<const int> steps, std::span<const LatentMode> modes,
                                 const InferenceConfig& cfg) {
  cfg.validate();
  require_trained(bundle);
  std::set<int> snaps(steps.begin(), steps.end());
  for (int k : snaps)
    if (k < 0) throw UsageError("step_sweep: negative step count");

  std::vector<SweepRow> rows;
  for (LatentMode mode : modes) {
    InferenceConfig mcfg = cfg;
    mcfg.mode = mode;
    mcfg.sgld.record_trace = false;
    std::map<int, double> energy_sum, correct;
    std::size_t total = 0;
    std::size_t offset = 0;
    for (const auto& ds : test_sets) {
      ChainRun run = run_chains(ds.features, ds.labels, bundle, mcfg, offset, snaps);
      for (int k : snaps) {
        const auto& snap = run.at_step.at(k);
        for (std::size_t s = 0; s < ds.size(); ++s) {
          const auto ens = mean_of(snap.probs[s]);
          if (argmax(ens) == ds.labels[s]) correct[k] += 1.0;
          for (double e : snap.energy[s]) energy_sum[k] += e / static_cast<double>(bundle.num_domains());
        }
      }
      total += ds.size();
      offset += ds.size();
    }
    for (int k : steps) {
      SweepRow row;
      row.mode = mode;
      row.steps = k;
      row.mean_energy = total ? energy_sum[k] / static_cast<double>(total) : 0.0;
      row.accuracy = total ? correct[k] / static_cast<double>(total) : 0.0;
      rows.push_back(row);
    }
  }
  return rows;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << "mode,steps,mean_energy,accuracy\n";
  for (const auto& r : rows) {
    out << to_string(r.mode) << ',' << r.steps << ',' << fmt(r.mean_energy) << ',' << fmt(r.accuracy) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void write_predictions_csv(const std::filesystem::path& path, std::span<const PredictionRecord> records,
                           std::span<const int> sample_domains) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::size_t S = records.empty() ? 0 : records.front().post_per_source.size();
  const std::size_t C = records.empty() ? 0 : records.front().ensemble.size();
  out << "sample,domain,label";
  for (std::size_t i = 0; i < S; ++i) out << ",pre_s" << i;
  for (std::size_t i = 0; i < S; ++i) out << ",post_s" << i;
  out << ",pre_ensemble,ensemble";
  for (std::size_t c = 0; c < C; ++c) out << ",p" << c;
  out << '\n';
  for (std::size_t k = 0; k < records.size(); ++k) {
    const auto& r = records[k];
    out << r.sample << ',' << (k < sample_domains.size() ? sample_domains[k] : 0) << ',' << r.label;
    for (const auto& p : r.pre_per_source) out << ',' << argmax(p);
    for (const auto& p : r.post_per_source) out << ',' << argmax(p);
    out << ',' << r.predicted_pre << ',' << r.predicted;
    for (double p : r.ensemble) out << ',' << fmt(p);
    out << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace ebsa::infer
