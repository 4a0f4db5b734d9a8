#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ebsa/data.hpp"
#include "ebsa/inference.hpp"
#include "ebsa/nets.hpp"
#include "ebsa/sgld.hpp"
#include "ebsa/trainer.hpp"

namespace ebsa::config {

struct EvalConfig {
  int mc_samples = 5;
  infer::LatentMode latent_mode = infer::LatentMode::prior;
  std::vector<infer::Aggregation> aggregations = {infer::Aggregation::ensemble};
  std::vector<int> sweep_steps = {0, 5, 10, 20, 50, 100};
  std::vector<infer::LatentMode> sweep_modes = {infer::LatentMode::none, infer::LatentMode::prior,
                                                infer::LatentMode::oracle};
  int threads = 1;
};

/// External feature files used instead of the synthetic benchmark.
struct DataFiles {
  std::vector<std::string> sources;
  std::vector<std::string> targets;
};

/// Everything a run needs. The training-time chains and test-time chains
/// share `sgld` (one K and step size per dataset).
struct RunConfig {
  std::uint64_t seed = 0;
  BenchmarkSpec benchmark;
  DataFiles data;
  nets::NetConfig net;
  train::TrainConfig train;
  sgld::SgldConfig sgld;
  EvalConfig eval;

  /// Propagates seed and sgld into the train config and checks ranges.
  void finalize();
};

nlohmann::json to_json(const nets::NetConfig& net);
nets::NetConfig net_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig from_json(const nlohmann::json& j);
RunConfig load(const std::filesystem::path& path);

}  // namespace ebsa::config
