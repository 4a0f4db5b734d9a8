#include "ebsa/config.hpp"

#include <fstream>
#include <set>

#include "ebsa/error.hpp"

namespace ebsa::config {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw UsageError("config: '" + where + "' must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, _] : j.items()) {
    if (!ok.contains(k)) throw UsageError("config: unknown key '" + where + "." + k + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

}  // namespace

void RunConfig::finalize() {
  train.seed = seed;
  train.sgld = sgld;
  net.num_classes = benchmark.num_classes;
  if (data.sources.empty()) net.input_dim = benchmark.dim;
  sgld.validate();
  train.validate();
  if (eval.mc_samples < 1) throw UsageError("config: eval.mc_samples must be >= 1");
  if (eval.threads < 1) throw UsageError("config: eval.threads must be >= 1");
}

json to_json(const nets::NetConfig& net) {
  return {{"input_dim", net.input_dim},
          {"feature_dim", net.feature_dim},
          {"num_classes", net.num_classes},
          {"trunk_hidden", net.trunk_hidden},
          {"identity_trunk", net.identity_trunk},
          {"feature_scale", net.feature_scale},
          {"feature_bound", net.feature_bound},
          {"classifier_hidden", net.classifier_hidden},
          {"latent_hidden", net.latent_hidden},
          {"energy_hidden", net.energy_hidden},
          {"energy_dropout", net.energy_dropout},
          {"spectral_init_iterations", net.spectral_init_iterations}};
}

nets::NetConfig net_from_json(const json& j) {
  check_keys(j, "net",
             {"input_dim", "feature_dim", "num_classes", "trunk_hidden", "identity_trunk", "feature_scale",
              "feature_bound", "classifier_hidden", "latent_hidden", "energy_hidden", "energy_dropout",
              "spectral_init_iterations"});
  nets::NetConfig n;
  read(j, "input_dim", n.input_dim);
  read(j, "feature_dim", n.feature_dim);
  read(j, "num_classes", n.num_classes);
  read(j, "trunk_hidden", n.trunk_hidden);
  read(j, "identity_trunk", n.identity_trunk);
  read(j, "feature_scale", n.feature_scale);
  read(j, "feature_bound", n.feature_bound);
  read(j, "classifier_hidden", n.classifier_hidden);
  read(j, "latent_hidden", n.latent_hidden);
  read(j, "energy_hidden", n.energy_hidden);
  read(j, "energy_dropout", n.energy_dropout);
  read(j, "spectral_init_iterations", n.spectral_init_iterations);
  return n;
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  const auto& b = c.benchmark;
  j["benchmark"] = {{"num_classes", b.num_classes},
                    {"dim", b.dim},
                    {"per_class", b.per_class},
                    {"validation_per_class", b.validation_per_class},
                    {"source_angles", b.source_angles},
                    {"target_angles", b.target_angles},
                    {"geometry_seed", b.geometry_seed},
                    {"radius", b.radius},
                    {"cluster_std", b.cluster_std},
                    {"nuisance_std", b.nuisance_std}};
  j["data"] = {{"sources", c.data.sources}, {"targets", c.data.targets}};
  j["net"] = to_json(c.net);
  const auto& t = c.train;
  j["train"] = {{"iterations", t.iterations},
                {"batch_size", t.batch_size},
                {"negatives", t.negatives},
                {"lr_trunk", t.lr_trunk},
                {"lr_model", t.lr_model},
                {"buffer_capacity", t.buffer_capacity},
                {"buffer_probability", t.buffer_probability},
                {"objective", train::to_string(t.objective)},
                {"spectral_iterations", t.spectral_iterations},
                {"checkpoint_every", t.checkpoint_every},
                {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"eps", t.adam.eps}}},
                {"weights",
                 {{"classification", t.weights.classification},
                  {"kl", t.weights.kl},
                  {"positive_energy", t.weights.positive_energy},
                  {"negative_energy", t.weights.negative_energy},
                  {"adapted", t.weights.adapted}}}};
  j["sgld"] = {{"step_size", c.sgld.step_size},
               {"num_steps", c.sgld.num_steps},
               {"noise_std", c.sgld.noise_std},
               {"grad_clip", c.sgld.grad_clip}};
  std::vector<std::string> aggs, modes;
  for (auto a : c.eval.aggregations) aggs.push_back(infer::to_string(a));
  for (auto m : c.eval.sweep_modes) modes.push_back(infer::to_string(m));
  j["eval"] = {{"mc_samples", c.eval.mc_samples},
               {"latent_mode", infer::to_string(c.eval.latent_mode)},
               {"aggregations", aggs},
               {"sweep_steps", c.eval.sweep_steps},
               {"sweep_modes", modes},
               {"threads", c.eval.threads}};
  return j;
}

RunConfig from_json(const json& j) {
  check_keys(j, "", {"seed", "benchmark", "data", "net", "train", "sgld", "eval"});
  RunConfig c;
  read(j, "seed", c.seed);
  if (j.contains("benchmark")) {
    const auto& b = j.at("benchmark");
    check_keys(b, "benchmark",
               {"num_classes", "dim", "per_class", "validation_per_class", "source_angles", "target_angles",
                "geometry_seed", "radius", "cluster_std", "nuisance_std"});
    read(b, "num_classes", c.benchmark.num_classes);
    read(b, "dim", c.benchmark.dim);
    read(b, "per_class", c.benchmark.per_class);
    read(b, "validation_per_class", c.benchmark.validation_per_class);
    read(b, "source_angles", c.benchmark.source_angles);
    read(b, "target_angles", c.benchmark.target_angles);
    read(b, "geometry_seed", c.benchmark.geometry_seed);
    read(b, "radius", c.benchmark.radius);
    read(b, "cluster_std", c.benchmark.cluster_std);
    read(b, "nuisance_std", c.benchmark.nuisance_std);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, "data", {"sources", "targets"});
    read(d, "sources", c.data.sources);
    read(d, "targets", c.data.targets);
  }
  if (j.contains("net")) c.net = net_from_json(j.at("net"));
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train",
               {"iterations", "batch_size", "negatives", "lr_trunk", "lr_model", "buffer_capacity",
                "buffer_probability", "objective", "spectral_iterations", "checkpoint_every", "adam", "weights"});
    read(t, "iterations", c.train.iterations);
    read(t, "batch_size", c.train.batch_size);
    read(t, "negatives", c.train.negatives);
    read(t, "lr_trunk", c.train.lr_trunk);
    read(t, "lr_model", c.train.lr_model);
    read(t, "buffer_capacity", c.train.buffer_capacity);
    read(t, "buffer_probability", c.train.buffer_probability);
    if (t.contains("objective")) c.train.objective = train::objective_from_string(t.at("objective").get<std::string>());
    read(t, "spectral_iterations", c.train.spectral_iterations);
    read(t, "checkpoint_every", c.train.checkpoint_every);
    if (t.contains("adam")) {
      const auto& a = t.at("adam");
      check_keys(a, "train.adam", {"beta1", "beta2", "eps"});
      read(a, "beta1", c.train.adam.beta1);
      read(a, "beta2", c.train.adam.beta2);
      read(a, "eps", c.train.adam.eps);
    }
    if (t.contains("weights")) {
      const auto& w = t.at("weights");
      check_keys(w, "train.weights", {"classification", "kl", "positive_energy", "negative_energy", "adapted"});
      read(w, "classification", c.train.weights.classification);
      read(w, "kl", c.train.weights.kl);
      read(w, "positive_energy", c.train.weights.positive_energy);
      read(w, "negative_energy", c.train.weights.negative_energy);
      read(w, "adapted", c.train.weights.adapted);
    }
  }
  if (j.contains("sgld")) {
    const auto& s = j.at("sgld");
    check_keys(s, "sgld", {"step_size", "num_steps", "noise_std", "grad_clip"});
    read(s, "step_size", c.sgld.step_size);
    read(s, "num_steps", c.sgld.num_steps);
    read(s, "noise_std", c.sgld.noise_std);
    read(s, "grad_clip", c.sgld.grad_clip);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, "eval", {"mc_samples", "latent_mode", "aggregations", "sweep_steps", "sweep_modes", "threads"});
    read(e, "mc_samples", c.eval.mc_samples);
    if (e.contains("latent_mode")) {
      c.eval.latent_mode = infer::latent_mode_from_string(e.at("latent_mode").get<std::string>());
    }
    if (e.contains("aggregations")) {
      c.eval.aggregations.clear();
      for (const auto& a : e.at("aggregations")) {
        c.eval.aggregations.push_back(infer::aggregation_from_string(a.get<std::string>()));
      }
    }
    read(e, "sweep_steps", c.eval.sweep_steps);
    if (e.contains("sweep_modes")) {
      c.eval.sweep_modes.clear();
      for (const auto& m : e.at("sweep_modes")) {
        c.eval.sweep_modes.push_back(infer::latent_mode_from_string(m.get<std::string>()));
      }
    }
    read(e, "threads", c.eval.threads);
  }
  c.finalize();
  return c;
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config '" + path.string() + "': " + e.what());
  }
  return from_json(j);
}

}  // namespace ebsa::config
