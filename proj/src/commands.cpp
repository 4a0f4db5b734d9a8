#include "ebsa/commands.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ebsa/config.hpp"
#include "ebsa/data.hpp"
#include "ebsa/error.hpp"
#include "ebsa/inference.hpp"
#include "ebsa/trainer.hpp"

namespace ebsa::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::int64_t seed = -1;
  std::string out = ".";
  int threads = 0;
};

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void fnv_bytes(std::uint64_t& h, std::string_view bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
}

/// Records config, input hash and every artifact a command writes.
class Manifest {
 public:
  Manifest(std::string command, const config::RunConfig& cfg) : command_(std::move(command)), started_(utc_now()) {
    config_ = config::to_json(cfg);
    seed_ = cfg.seed;
    fnv_bytes(hash_, config_.dump());
  }

  void add_input(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    fnv_bytes(hash_, ss.str());
    inputs_.push_back(p.string());
  }
  void add_output(const fs::path& p) { outputs_.push_back(p.string()); }

  void write(const fs::path& dir) {
    const fs::path path = dir / ("manifest_" + command_ + ".json");
    outputs_.push_back(path.string());
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(hash_));
    json j{{"command", command_}, {"config", config_},     {"input_hash", hex},       {"seed", seed_},
           {"inputs", inputs_},   {"outputs", outputs_},   {"started", started_},     {"finished", utc_now()}};
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("cannot write manifest '" + path.string() + "'");
  }

 private:
  std::string command_;
  std::string started_;
  json config_;
  std::uint64_t seed_ = 0;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  std::vector<std::string> inputs_;
  std::vector<std::string> outputs_;
};

config::RunConfig load_config(const Common& c) {
  if (c.config.empty()) throw UsageError("--config is required");
  if (!fs::exists(c.config)) throw UsageError("config file '" + c.config + "' does not exist");
  config::RunConfig cfg = config::load(c.config);
  if (c.seed >= 0) cfg.seed = static_cast<std::uint64_t>(c.seed);
  if (c.threads > 0) cfg.eval.threads = c.threads;
  cfg.finalize();
  return cfg;
}

fs::path prepare_out(const std::string& out) {
  fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory '" + out + "'");
  return dir;
}

struct Datasets {
  std::vector<DomainDataset> sources;
  std::vector<DomainDataset> validation;
  std::vector<DomainDataset> targets;
};

std::vector<DomainDataset> load_many(const std::vector<std::string>& files, Manifest& m) {
  std::vector<DomainDataset> out;
  for (const auto& f : files) {
    m.add_input(f);
    for (auto& d : load_feature_csv_domains(f)) out.push_back(std::move(d));
  }
  return out;
}

/// --data directory (gen output) > config data files > in-memory generation.
Datasets load_data(const config::RunConfig& cfg, const std::string& data_dir, Manifest& m) {
  Datasets d;
  if (!data_dir.empty()) {
    const fs::path dir(data_dir);
    if (!fs::exists(dir / "sources.csv")) throw UsageError("'" + data_dir + "' has no sources.csv (run gen first)");
    d.sources = load_many({(dir / "sources.csv").string()}, m);
    if (fs::exists(dir / "validation.csv")) d.validation = load_many({(dir / "validation.csv").string()}, m);
    if (fs::exists(dir / "targets.csv")) d.targets = load_many({(dir / "targets.csv").string()}, m);
  } else if (!cfg.data.sources.empty()) {
    d.sources = load_many(cfg.data.sources, m);
    d.targets = load_many(cfg.data.targets, m);
  } else {
    auto b = generate_rotated_benchmark(cfg.benchmark, cfg.seed);
    d.sources = std::move(b.sources);
    d.validation = std::move(b.validation);
    d.targets = std::move(b.targets);
  }
  return d;
}

infer::InferenceConfig inference_config(const config::RunConfig& cfg) {
  infer::InferenceConfig ic;
  ic.sgld = cfg.sgld;
  ic.mc_samples = cfg.eval.mc_samples;
  ic.mode = cfg.eval.latent_mode;
  ic.seed = cfg.seed;
  ic.threads = cfg.eval.threads;
  return ic;
}

train::ModelBundle load_bundle(const std::string& path, Manifest& m) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  if (!fs::exists(path)) throw UsageError("checkpoint '" + path + "' does not exist");
  m.add_input(path);
  return train::ModelBundle::load(path);
}

void check_dims(const train::ModelBundle& bundle, const std::vector<DomainDataset>& sets) {
  for (const auto& ds : sets) {
    if (ds.dim() != bundle.input_dim()) {
      throw ShapeError("domain " + std::to_string(ds.domain) + " has " + std::to_string(ds.dim()) +
                       " features but the checkpoint expects " + std::to_string(bundle.input_dim()));
    }
  }
}

int cmd_gen(const Common& c) {
  const auto cfg = load_config(c);
  const auto dir = prepare_out(c.out);
  Manifest m("gen", cfg);
  const auto b = generate_rotated_benchmark(cfg.benchmark, cfg.seed);
  save_feature_csv(dir / "sources.csv", b.sources);
  m.add_output(dir / "sources.csv");
  save_feature_csv(dir / "validation.csv", b.validation);
  m.add_output(dir / "validation.csv");
  save_feature_csv(dir / "targets.csv", b.targets);
  m.add_output(dir / "targets.csv");
  m.write(dir);
  std::cout << "wrote " << b.sources.size() << " source, " << b.targets.size() << " target domains to " << dir.string()
            << '\n';
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& data_dir, const std::string& resume, int iterations) {
  auto cfg = load_config(c);
  if (iterations >= 0) cfg.train.iterations = iterations;
  const auto dir = prepare_out(c.out);
  Manifest m("train", cfg);
  auto data = load_data(cfg, data_dir, m);
  if (data.sources.empty()) throw UsageError("no source domains");
  cfg.net.input_dim = data.sources.front().dim();

  std::vector<int> ids;
  for (const auto& s : data.sources) ids.push_back(s.domain);
  train::ModelBundle bundle =
      resume.empty() ? train::ModelBundle::create(cfg.net, ids, cfg.train) : load_bundle(resume, m);
  if (bundle.num_domains() != data.sources.size()) {
    throw ShapeError("checkpoint has " + std::to_string(bundle.num_domains()) + " domains, data has " +
                     std::to_string(data.sources.size()));
  }
  check_dims(bundle, data.sources);

  const fs::path loss_path = dir / "loss.csv";
  const bool append = !resume.empty();
  if (!append) train::write_loss_csv(loss_path, {});
  std::vector<train::StepRecord> pending;
  auto flush = [&] {
    train::write_loss_csv(loss_path, pending, true);
    pending.clear();
  };

  train::TrainHooks hooks;
  hooks.on_step = [&](const train::StepRecord& r) { pending.push_back(r); };
  hooks.on_checkpoint = [&](const train::ModelBundle& b, int iter) {
    flush();
    const fs::path p = dir / ("checkpoint_iter" + std::to_string(iter) + ".bin");
    b.save(p);
    m.add_output(p);
    std::cerr << "iteration " << iter << ": checkpoint " << p.string() << '\n';
  };

  try {
    train::train(bundle, data.sources, cfg.train, hooks);
  } catch (const NumericError& e) {
    flush();
    m.add_output(loss_path);
    m.write(dir);
    std::cerr << "error: training diverged: " << e.what() << '\n';
    return kExitRuntime;
  }
  flush();
  m.add_output(loss_path);
  const fs::path final_path = dir / "checkpoint.bin";
  if (!bundle.trained) refresh_reference(bundle, data.sources), bundle.trained = cfg.train.iterations > 0;
  bundle.save(final_path);
  m.add_output(final_path);

  if (!data.validation.empty() && bundle.trained) {
    std::size_t correct = 0, total = 0;
    for (std::size_t k = 0; k < data.validation.size() && k < bundle.num_domains(); ++k) {
      const auto& v = data.validation[k];
      const Matrix x = train::features_of(bundle, v.features);
      const Matrix z(x.rows(), x.cols());
      const Matrix p = nets::classify(ad::Tensor::constant(x), ad::Tensor::constant(z), bundle.domains[k].phi,
                                      nets::ParamView::frozen)
                           .value();
      for (std::size_t r = 0; r < v.size(); ++r, ++total) correct += infer::argmax(p.row(r)) == v.labels[r];
    }
    std::cout << "source validation accuracy (zero latent): "
              << static_cast<double>(correct) / static_cast<double>(total)
              << '\n';
  }
  m.write(dir);
  return kExitOk;
}

json accuracy_block(const std::vector<infer::PredictionRecord>& recs, const std::vector<infer::Aggregation>& aggs,
                    const Matrix& centroids) {
  const std::size_t n = recs.size();
  json j;
  j["n"] = n;
  if (n == 0) return j;
  const std::size_t S = recs.front().post_per_source.size();
  double pre = 0, pre_e = 0, post_e = 0;
  std::vector<double> src_pre(S, 0), src_post(S, 0);
  std::map<std::string, double> post;
  for (const auto& r : recs) {
    pre += r.predicted_pre == r.label;
    for (std::size_t i = 0; i < S; ++i) {
      src_pre[i] += infer::argmax(r.pre_per_source[i]) == r.label;
      src_post[i] += infer::argmax(r.post_per_source[i]) == r.label;
      pre_e += r.pre_energy_per_source[i] / static_cast<double>(S);
      post_e += r.post_energy_per_source[i] / static_cast<double>(S);
    }
    for (auto a : aggs) {
      const auto p = infer::aggregate(r.post_per_source, a, r.feature, &centroids);
      post[infer::to_string(a)] += infer::argmax(p) == r.label;
    }
  }
  const double dn = static_cast<double>(n);
  j["pre_accuracy"] = pre / dn;
  for (auto& [k, v] : post) j["post_accuracy"][k] = v / dn;
  for (auto& v : src_pre) v /= dn;
  for (auto& v : src_post) v /= dn;
  j["per_source_pre_accuracy"] = src_pre;
  j["per_source_post_accuracy"] = src_post;
  j["mean_pre_energy"] = pre_e / dn;
  j["mean_post_energy"] = post_e / dn;
  return j;
}

struct EvalFlags {
  std::string checkpoint;
  std::string data_dir;
  int steps = -1;
  int mc = -1;
  std::string latent_mode;
  std::vector<std::string> aggregations;
};

void apply_eval_flags(config::RunConfig& cfg, const EvalFlags& f) {
  if (f.steps >= 0) cfg.sgld.num_steps = f.steps;
  if (f.mc >= 1) cfg.eval.mc_samples = f.mc;
  if (!f.latent_mode.empty()) cfg.eval.latent_mode = infer::latent_mode_from_string(f.latent_mode);
  if (!f.aggregations.empty()) {
    cfg.eval.aggregations.clear();
    for (const auto& a : f.aggregations) cfg.eval.aggregations.push_back(infer::aggregation_from_string(a));
  }
}

int cmd_eval(const Common& c, const EvalFlags& f) {
  auto cfg = load_config(c);
  apply_eval_flags(cfg, f);
  const auto dir = prepare_out(c.out);
  Manifest m("eval", cfg);
  const auto bundle = load_bundle(f.checkpoint, m);
  auto data = load_data(cfg, f.data_dir, m);
  if (data.targets.empty()) throw UsageError("no target domains to evaluate");
  check_dims(bundle, data.targets);
  const auto ic = inference_config(cfg);

  json metrics;
  metrics["steps"] = cfg.sgld.num_steps;
  metrics["step_size"] = cfg.sgld.step_size;
  metrics["mc_samples"] = cfg.eval.mc_samples;
  metrics["latent_mode"] = infer::to_string(cfg.eval.latent_mode);
  metrics["seed"] = cfg.seed;
  std::vector<int> src_ids;
  for (const auto& d : bundle.domains) src_ids.push_back(d.domain);
  metrics["source_domains"] = src_ids;
  metrics["targets"] = json::array();

  std::vector<infer::PredictionRecord> all;
  std::vector<int> all_domains;
  std::size_t offset = 0;
  for (const auto& t : data.targets) {
    auto recs = infer::predict_batch(t.features, t.labels, bundle, ic, offset);
    offset += t.size();
    json block = accuracy_block(recs, cfg.eval.aggregations, bundle.domain_centroids);
    block["domain"] = t.domain;
    metrics["targets"].push_back(block);
    for (auto& r : recs) {
      all.push_back(std::move(r));
      all_domains.push_back(t.domain);
    }
  }
  metrics["overall"] = accuracy_block(all, cfg.eval.aggregations, bundle.domain_centroids);

  const fs::path metrics_path = dir / "metrics.json";
  {
    std::ofstream out(metrics_path, std::ios::trunc);
    out << metrics.dump(2) << '\n';
    if (!out) throw IoError("cannot write '" + metrics_path.string() + "'");
  }
  m.add_output(metrics_path);
  const fs::path pred_path = dir / "predictions.csv";
  infer::write_predictions_csv(pred_path, all, all_domains);
  m.add_output(pred_path);
  m.write(dir);

  std::cout << std::fixed << std::setprecision(4);
  std::cout << "domain      n    pre     post(" << infer::to_string(cfg.eval.aggregations.front()) << ")\n";
  for (const auto& t : metrics["targets"]) {
    std::cout << std::setw(6) << t["domain"].get<int>() << std::setw(7) << t["n"].get<std::size_t>() << "  "
              << t["pre_accuracy"].get<double>() << "  "
              << t["post_accuracy"][infer::to_string(cfg.eval.aggregations.front())].get<double>() << '\n';
  }
  const auto& o = metrics["overall"];
  std::cout << "overall" << std::setw(6) << o["n"].get<std::size_t>() << "  " << o["pre_accuracy"].get<double>()
            << "  " << o["post_accuracy"][infer::to_string(cfg.eval.aggregations.front())].get<double>() << '\n';
  return kExitOk;
}

int cmd_sweep(const Common& c, const EvalFlags& f, const std::vector<int>& steps,
              const std::vector<std::string>& modes) {
  auto cfg = load_config(c);
  apply_eval_flags(cfg, f);
  if (!steps.empty()) cfg.eval.sweep_steps = steps;
  if (!modes.empty()) {
    cfg.eval.sweep_modes.clear();
    for (const auto& s : modes) cfg.eval.sweep_modes.push_back(infer::latent_mode_from_string(s));
  }
  const auto dir = prepare_out(c.out);
  Manifest m("sweep", cfg);
  const auto bundle = load_bundle(f.checkpoint, m);
  auto data = load_data(cfg, f.data_dir, m);
  if (data.targets.empty()) throw UsageError("no target domains to sweep");
  check_dims(bundle, data.targets);
  const auto rows = infer::step_sweep(data.targets, bundle, cfg.eval.sweep_steps, cfg.eval.sweep_modes,
                                      inference_config(cfg));
  const fs::path path = dir / "sweep.csv";
  infer::write_sweep_csv(path, rows);
  m.add_output(path);
  m.write(dir);
  for (const auto& r : rows) {
    std::cout << infer::to_string(r.mode) << " steps=" << r.steps << " energy=" << r.mean_energy
              << " accuracy=" << r.accuracy << '\n';
  }
  return kExitOk;
}

int cmd_trace(const Common& c, const EvalFlags& f, const std::vector<std::size_t>& samples, std::size_t max_features) {
  auto cfg = load_config(c);
  apply_eval_flags(cfg, f);
  cfg.sgld.record_trace = true;
  const auto dir = prepare_out(c.out);
  Manifest m("trace", cfg);
  const auto bundle = load_bundle(f.checkpoint, m);
  auto data = load_data(cfg, f.data_dir, m);
  if (data.targets.empty()) throw UsageError("no target domains to trace");
  check_dims(bundle, data.targets);

  DomainDataset pooled;
  for (const auto& t : data.targets) {
    if (pooled.features.empty()) pooled.features = Matrix(0, t.dim());
    std::vector<Matrix> parts{pooled.features, t.features};
    pooled.features = vstack(parts);
    pooled.labels.insert(pooled.labels.end(), t.labels.begin(), t.labels.end());
  }
  const auto ic = inference_config(cfg);
  for (std::size_t id : samples) {
    if (id >= pooled.size()) throw UsageError("sample id " + std::to_string(id) + " out of range");
    auto rec = infer::predict_sample(pooled.features.row(id), pooled.labels[id], bundle, ic, id);
    for (std::size_t i = 0; i < rec.traces.size(); ++i) {
      const fs::path p =
          dir / ("trace_s" + std::to_string(id) + "_d" + std::to_string(bundle.domains[i].domain) + ".csv");
      sgld::write_trace_csv(p, rec.traces[i], max_features);
      m.add_output(p);
    }
  }
  m.write(dir);
  return kExitOk;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "run configuration (JSON)")->required();
  sub->add_option("--seed", c.seed, "override the config seed");
  sub->add_option("--out", c.out, "output directory");
  sub->add_option("--threads", c.threads, "cap on worker threads for inference");
}

void add_eval_flags(CLI::App* sub, EvalFlags& f, bool need_checkpoint) {
  auto* opt = sub->add_option("--checkpoint", f.checkpoint, "trained model bundle");
  if (need_checkpoint) opt->required();
  sub->add_option("--data", f.data_dir, "directory written by gen");
  sub->add_option("--steps", f.steps, "Langevin steps per chain");
  sub->add_option("--mc", f.mc, "latent draws (chains) per source domain");
  sub->add_option("--latent-mode", f.latent_mode, "none | prior | oracle");
  sub->add_option("--aggregation", f.aggregations, "ensemble | closest_cosine | weighted_cosine | most_confident")
      ->delimiter(',');
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"ebsa: energy-based test sample adaptation"};
  app.require_subcommand(1);
  Common common;
  EvalFlags flags;
  std::string data_dir, resume;
  int iterations = -1;
  std::vector<int> sweep_steps;
  std::vector<std::string> sweep_modes;
  std::vector<std::size_t> trace_samples;
  std::size_t max_features = 0;

  auto* gen = app.add_subcommand("gen", "generate the synthetic rotated-domain benchmark");
  add_common(gen, common);

  auto* trn = app.add_subcommand("train", "train trunk, classifiers and energy functions");
  add_common(trn, common);
  trn->add_option("--data", data_dir, "directory written by gen");
  trn->add_option("--resume", resume, "continue from a checkpoint");
  trn->add_option("--iterations", iterations, "override train.iterations");

  auto* evl = app.add_subcommand("eval", "adapt and classify target samples");
  add_common(evl, common);
  add_eval_flags(evl, flags, true);

  auto* swp = app.add_subcommand("sweep", "energy and accuracy against Langevin step count");
  add_common(swp, common);
  add_eval_flags(swp, flags, true);
  swp->add_option("--steps-list", sweep_steps, "step counts")->delimiter(',');
  swp->add_option("--modes", sweep_modes, "latent modes")->delimiter(',');

  auto* trc = app.add_subcommand("trace", "export adaptation trajectories");
  add_common(trc, common);
  add_eval_flags(trc, flags, true);
  trc->add_option("--samples", trace_samples, "pooled target sample ids")->delimiter(',')->required();
  trc->add_option("--max-features", max_features, "truncate feature columns (0 = all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(common);
    if (*trn) return cmd_train(common, data_dir, resume, iterations);
    if (*evl) return cmd_eval(common, flags);
    if (*swp) return cmd_sweep(common, flags, sweep_steps, sweep_modes);
    if (*trc) return cmd_trace(common, flags, trace_samples, max_features);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace ebsa::cli
