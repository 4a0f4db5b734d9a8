#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "ebsa/commands.hpp"
#include "ebsa/data.hpp"
#include "ebsa/trainer.hpp"

namespace fs = std::filesystem;
using ebsa::cli::run;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

// Silences stdout and stderr for the lifetime of the guard.
struct Quiet {
  std::ostringstream sink;
  std::streambuf* out = std::cout.rdbuf(sink.rdbuf());
  std::streambuf* err = std::cerr.rdbuf(sink.rdbuf());
  ~Quiet() {
    std::cout.rdbuf(out);
    std::cerr.rdbuf(err);
  }
};

struct Workspace {
  fs::path dir;
  fs::path config;

  explicit Workspace(const std::string& name, int iterations = 3) {
    dir = fs::temp_directory_path() / ("ebsa_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    config = dir / "config.json";
    nlohmann::json j = {
        {"seed", 4},
        {"benchmark", {{"dim", 6}, {"per_class", 12}, {"validation_per_class", 5}, {"source_angles", {15, 45, 75}}}},
        {"net", {{"feature_dim", 4}, {"trunk_hidden", {8}}}},
        {"train", {{"iterations", iterations}, {"batch_size", 8}, {"checkpoint_every", 2}}},
        {"sgld", {{"num_steps", 3}}},
        {"eval", {{"mc_samples", 2}}}};
    std::ofstream(config) << j.dump(2);
  }
  ~Workspace() { fs::remove_all(dir); }

  std::string out(const std::string& sub) const { return (dir / sub).string(); }
  std::string cfg() const { return config.string(); }
};

}  // namespace

TEST_CASE("usage errors exit with 2") {
  Quiet q;
  CHECK(run({"ebsa"}) == 2);
  CHECK(run({"ebsa", "bogus"}) == 2);
  CHECK(run({"ebsa", "gen"}) == 2);
  CHECK(run({"ebsa", "gen", "--config", "/nonexistent/config.json"}) == 2);
  CHECK(run({"ebsa", "--help"}) == 0);

  Workspace w("usage");
  std::ofstream(w.dir / "bad.json") << R"({"train": {"iterations": 1, "bogus": 2}})";
  CHECK(run({"ebsa", "gen", "--config", (w.dir / "bad.json").string(), "--out", w.out("g")}) == 2);
  std::ofstream(w.dir / "broken.json") << "{not json";
  CHECK(run({"ebsa", "gen", "--config", (w.dir / "broken.json").string(), "--out", w.out("g")}) == 2);
  CHECK(run({"ebsa", "eval", "--config", w.cfg(), "--out", w.out("e")}) == 2);
  CHECK(run({"ebsa", "eval", "--config", w.cfg(), "--checkpoint", w.out("missing.bin"), "--out", w.out("e")}) != 0);
}

TEST_CASE("gen is deterministic and loadable") {
  Quiet q;
  Workspace w("gen");
  REQUIRE(run({"ebsa", "gen", "--config", w.cfg(), "--out", w.out("a")}) == 0);
  REQUIRE(run({"ebsa", "gen", "--config", w.cfg(), "--out", w.out("b")}) == 0);
  for (auto f : {"sources.csv", "validation.csv", "targets.csv"}) {
    CHECK(slurp(w.dir / "a" / f) == slurp(w.dir / "b" / f));
  }
  auto sources = ebsa::load_feature_csv_domains(w.dir / "a" / "sources.csv");
  CHECK(sources.size() == 3);
  CHECK(sources[0].size() == 48);
  CHECK(fs::exists(w.dir / "a" / "manifest_gen.json"));

  REQUIRE(run({"ebsa", "gen", "--config", w.cfg(), "--seed", "9", "--out", w.out("c")}) == 0);
  CHECK(slurp(w.dir / "a" / "sources.csv") != slurp(w.dir / "c" / "sources.csv"));
}

TEST_CASE("train writes a loadable checkpoint and M x S loss rows") {
  Quiet q;
  Workspace w("train", 1);
  REQUIRE(run({"ebsa", "train", "--config", w.cfg(), "--out", w.out("t")}) == 0);
  auto bundle = ebsa::train::ModelBundle::load(w.dir / "t" / "checkpoint.bin");
  CHECK(bundle.num_domains() == 3);
  CHECK(bundle.trained);
  CHECK(line_count(w.dir / "t" / "loss.csv") == 1 + 1 * 3);

  auto manifest = nlohmann::json::parse(slurp(w.dir / "t" / "manifest_train.json"));
  CHECK(manifest["command"] == "train");
  CHECK(manifest["outputs"].size() >= 2);
  for (const auto& p : manifest["outputs"]) CHECK(fs::exists(p.get<std::string>()));
}

TEST_CASE("train reads data written by gen") {
  Quiet q;
  Workspace w("train_data", 2);
  REQUIRE(run({"ebsa", "gen", "--config", w.cfg(), "--out", w.out("g")}) == 0);
  REQUIRE(run({"ebsa", "train", "--config", w.cfg(), "--data", w.out("g"), "--out", w.out("a")}) == 0);
  REQUIRE(run({"ebsa", "train", "--config", w.cfg(), "--out", w.out("b")}) == 0);
  CHECK(slurp(w.dir / "a" / "loss.csv") == slurp(w.dir / "b" / "loss.csv"));
}

TEST_CASE("resumed training continues the uninterrupted run") {
  Quiet q;
  Workspace w("resume", 4);
  REQUIRE(run({"ebsa", "train", "--config", w.cfg(), "--out", w.out("full")}) == 0);
  REQUIRE(run({"ebsa", "train", "--config", w.cfg(), "--iterations", "2", "--out", w.out("part")}) == 0);
  REQUIRE(run({"ebsa", "train", "--config", w.cfg(), "--resume", w.out("part/checkpoint.bin"), "--out",
               w.out("part")}) == 0);
  CHECK(slurp(w.dir / "full" / "loss.csv") == slurp(w.dir / "part" / "loss.csv"));
  CHECK(slurp(w.dir / "full" / "checkpoint.bin") == slurp(w.dir / "part" / "checkpoint.bin"));
  CHECK(fs::exists(w.dir / "full" / "checkpoint_iter2.bin"));
}

TEST_CASE("eval is reproducible and steps=0 leaves accuracy unchanged") {
  Quiet q;
  Workspace w("eval");
  REQUIRE(run({"ebsa", "train", "--config", w.cfg(), "--out", w.out("t")}) == 0);
  const auto ckpt = w.out("t/checkpoint.bin");
  REQUIRE(run({"ebsa", "eval", "--config", w.cfg(), "--checkpoint", ckpt, "--out", w.out("e1")}) == 0);
  REQUIRE(run({"ebsa", "eval", "--config", w.cfg(), "--checkpoint", ckpt, "--out", w.out("e2")}) == 0);
  CHECK(slurp(w.dir / "e1" / "metrics.json") == slurp(w.dir / "e2" / "metrics.json"));
  CHECK(slurp(w.dir / "e1" / "predictions.csv") == slurp(w.dir / "e2" / "predictions.csv"));

  REQUIRE(run({"ebsa", "eval", "--config", w.cfg(), "--checkpoint", ckpt, "--steps", "0", "--aggregation",
               "ensemble,most_confident", "--out", w.out("e0")}) == 0);
  auto m = nlohmann::json::parse(slurp(w.dir / "e0" / "metrics.json"));
  REQUIRE(m["targets"].size() == 2);
  for (const auto& t : m["targets"]) {
    CHECK(t["pre_accuracy"] == t["post_accuracy"]["ensemble"]);
    CHECK(t["per_source_pre_accuracy"] == t["per_source_post_accuracy"]);
    CHECK(t["per_source_post_accuracy"].size() == 3);
    CHECK(t["post_accuracy"].contains("most_confident"));
  }
  CHECK(m["overall"]["n"] == 96);
}

TEST_CASE("eval rejects data of the wrong dimension") {
  Quiet q;
  Workspace w("eval_dims");
  REQUIRE(run({"ebsa", "train", "--config", w.cfg(), "--out", w.out("t")}) == 0);
  auto j = nlohmann::json::parse(slurp(w.config));
  j["benchmark"]["dim"] = 5;
  std::ofstream(w.dir / "other.json") << j.dump();
  CHECK(run({"ebsa", "eval", "--config", (w.dir / "other.json").string(), "--checkpoint", w.out("t/checkpoint.bin"),
             "--out", w.out("e")}) == 2);
}

TEST_CASE("sweep and trace outputs") {
  Quiet q;
  Workspace w("sweep");
  REQUIRE(run({"ebsa", "train", "--config", w.cfg(), "--out", w.out("t")}) == 0);
  const auto ckpt = w.out("t/checkpoint.bin");
  REQUIRE(run({"ebsa", "sweep", "--config", w.cfg(), "--checkpoint", ckpt, "--steps-list", "0,2,4", "--modes",
               "none,prior", "--out", w.out("s")}) == 0);
  CHECK(line_count(w.dir / "s" / "sweep.csv") == 1 + 3 * 2);

  REQUIRE(run({"ebsa", "sweep", "--config", w.cfg(), "--checkpoint", ckpt, "--steps-list", "0", "--modes", "prior",
               "--out", w.out("s0")}) == 0);
  REQUIRE(run({"ebsa", "eval", "--config", w.cfg(), "--checkpoint", ckpt, "--steps", "0", "--out", w.out("e0")}) ==
          0);
  auto m = nlohmann::json::parse(slurp(w.dir / "e0" / "metrics.json"));
  std::ifstream sweep(w.dir / "s0" / "sweep.csv");
  std::string header, row;
  std::getline(sweep, header);
  std::getline(sweep, row);
  const double acc = std::stod(row.substr(row.rfind(',') + 1));
  CHECK(acc == m["overall"]["pre_accuracy"].get<double>());

  REQUIRE(run({"ebsa", "trace", "--config", w.cfg(), "--checkpoint", ckpt, "--samples", "0,50", "--max-features",
               "2", "--out", w.out("tr")}) == 0);
  CHECK(fs::exists(w.dir / "tr" / "trace_s0_d15.csv"));
  CHECK(fs::exists(w.dir / "tr" / "trace_s50_d75.csv"));
  CHECK(line_count(w.dir / "tr" / "trace_s0_d45.csv") == 1 + 4 * 2);
  CHECK(run({"ebsa", "trace", "--config", w.cfg(), "--checkpoint", ckpt, "--samples", "100000", "--out",
             w.out("tr2")}) == 2);
}
