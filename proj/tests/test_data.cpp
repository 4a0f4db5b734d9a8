#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "ebsa/data.hpp"
#include "ebsa/error.hpp"

using namespace ebsa;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& body = "") {
  auto p = fs::temp_directory_path() / name;
  if (!body.empty()) std::ofstream(p) << body;
  return p;
}

}  // namespace

TEST_CASE("benchmark geometry") {
  BenchmarkSpec spec;
  auto b = generate_rotated_benchmark(spec, 1);
  CHECK(b.sources.size() == 5);
  CHECK(b.targets.size() == 2);
  CHECK(b.validation.size() == 5);
  CHECK(b.sources[0].size() == spec.per_class * spec.num_classes);
  CHECK(b.sources[0].dim() == spec.dim);
  CHECK(b.targets[1].domain == 90);
  for (const auto& m : b.class_means) CHECK(std::hypot(m[0], m[1]) == doctest::Approx(3.0));

  // Class-0 mean of domain 90 is the class-0 mean rotated a quarter turn.
  const auto& t = b.targets[1];
  double sx = 0, sy = 0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < t.size(); ++r)
    if (t.labels[r] == 0) sx += t.features(r, 0), sy += t.features(r, 1), ++n;
  CHECK(sx / n == doctest::Approx(-b.class_means[0][1]).epsilon(0.05).scale(1.0));
  CHECK(sy / n == doctest::Approx(b.class_means[0][0]).epsilon(0.05).scale(1.0));
}

TEST_CASE("benchmark is a pure function of its seed") {
  BenchmarkSpec spec;
  spec.per_class = 20;
  auto a = generate_rotated_benchmark(spec, 5), b = generate_rotated_benchmark(spec, 5);
  auto c = generate_rotated_benchmark(spec, 6);
  CHECK(a.sources[2].features == b.sources[2].features);
  CHECK(a.sources[2].features != c.sources[2].features);
}

TEST_CASE("rotation preserves norms") {
  Rng rng(2);
  Matrix m = rng.normal_matrix(10, 4);
  Matrix r = m;
  rotate_plane(r, 37.0);
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(std::hypot(r(i, 0), r(i, 1)) == doctest::Approx(std::hypot(m(i, 0), m(i, 1))));
    CHECK(r(i, 2) == m(i, 2));
  }
  rotate_plane(r, -37.0);
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(r[i] == doctest::Approx(m[i]));
}

TEST_CASE("csv round trip is exact") {
  BenchmarkSpec spec;
  spec.per_class = 5;
  auto b = generate_rotated_benchmark(spec, 3);
  auto path = temp_file("ebsa_roundtrip.csv");
  save_feature_csv(path, b.sources);
  auto back = load_feature_csv_domains(path);
  REQUIRE(back.size() == b.sources.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].domain == b.sources[i].domain);
    CHECK(back[i].features == b.sources[i].features);
    CHECK(back[i].labels == b.sources[i].labels);
  }
  save_feature_csv(path, b.targets[0]);
  CHECK(load_feature_csv(path).features == b.targets[0].features);
  CHECK_THROWS_AS(load_feature_csv(path, FeatureSchema{3}), ShapeError);
  fs::remove(path);
}

TEST_CASE("csv errors name the offending line") {
  auto bad_header = temp_file("ebsa_bad_header.csv", "label,domain,f0\n0,0,1\n");
  CHECK_THROWS_AS(load_feature_csv(bad_header), IoError);

  auto short_row = temp_file("ebsa_short.csv", "domain,label,f0,f1\n0,1,0.5,0.5\n0,1,0.5\n");
  try {
    load_feature_csv(short_row);
    FAIL("expected an error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  auto bad_value = temp_file("ebsa_bad_value.csv", "domain,label,f0\n0,1,abc\n");
  CHECK_THROWS_AS(load_feature_csv(bad_value), IoError);
  auto nan_value = temp_file("ebsa_nan.csv", "domain,label,f0\n0,1,nan\n");
  CHECK_THROWS_AS(load_feature_csv(nan_value), IoError);
  auto mixed = temp_file("ebsa_mixed.csv", "domain,label,f0\n0,1,1\n5,1,1\n");
  CHECK_THROWS_AS(load_feature_csv(mixed), IoError);
  CHECK_THROWS_AS(load_feature_csv(fs::temp_directory_path() / "ebsa_missing_file.csv"), IoError);
  for (auto p : {bad_header, short_row, bad_value, nan_value, mixed}) fs::remove(p);
}

TEST_CASE("batch stream covers every row once per epoch") {
  BenchmarkSpec spec;
  spec.per_class = 10;
  auto ds = generate_domain(spec, 30.0, 10, 4);
  auto batches = batch_iter(ds, 16, 9);
  CHECK(batches.size() == 3);
  CHECK(batches.back().size() == 8);
  std::multiset<double> seen;
  for (const auto& b : batches)
    for (std::size_t r = 0; r < b.size(); ++r) seen.insert(b.features(r, 0));
  std::multiset<double> all;
  for (std::size_t r = 0; r < ds.size(); ++r) all.insert(ds.features(r, 0));
  CHECK(seen == all);
  CHECK_THROWS_AS(BatchStream(ds, 0, 1), UsageError);
}

TEST_CASE("sample_batch draws without replacement") {
  BenchmarkSpec spec;
  auto ds = generate_domain(spec, 0.0, 5, 1);
  Rng rng(3);
  auto b = sample_batch(ds, 12, rng);
  CHECK(b.size() == 12);
  std::set<double> uniq;
  for (std::size_t r = 0; r < b.size(); ++r) uniq.insert(b.features(r, 0));
  CHECK(uniq.size() == 12);
  CHECK(sample_batch(ds, 100, rng).size() == ds.size());
}

TEST_CASE("batch concat and select keep rows aligned") {
  DomainBatch a{Matrix(2, 2, 1.0), {0, 1}, {3, 3}};
  DomainBatch b{Matrix(1, 2, 2.0), {2}, {4}};
  auto c = DomainBatch::concat(std::vector<DomainBatch>{a, b});
  CHECK(c.size() == 3);
  CHECK(c.features(2, 1) == 2.0);
  CHECK(c.domains[2] == 4);
  std::vector<std::size_t> rows{2, 0};
  auto s = c.select(rows);
  CHECK(s.labels == std::vector<int>{2, 0});
  DomainBatch broken{Matrix(2, 2), {0}, {0, 0}};
  CHECK_THROWS(broken.validate());
}

TEST_CASE("benchmark spec validation") {
  BenchmarkSpec spec;
  spec.num_classes = 1;
  CHECK_THROWS_AS(spec.validate(), UsageError);
  spec = {};
  spec.dim = 1;
  CHECK_THROWS(spec.validate());
}
