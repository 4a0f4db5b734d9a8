#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "ebsa/error.hpp"
#include "ebsa/sgld.hpp"

using namespace ebsa;
using ad::Tensor;

namespace {

// E(x) = ½·a·Σ x² per row; ∇E = a·x.
sgld::EnergyFn quadratic(double a) {
  return [a](const Tensor& x) { return ad::scale(ad::row_sum(ad::square(x)), 0.5 * a); };
}

nets::EnergyNet toy_energy(Rng& rng) {
  nets::NetConfig cfg;
  cfg.feature_dim = 4;
  return nets::make_energy(cfg, rng);
}

}  // namespace

TEST_CASE("langevin step applies the clipped half-step update") {
  sgld::SgldConfig cfg;
  cfg.step_size = 2.0;
  cfg.grad_clip = 0.5;
  cfg.noise_std = 0.1;
  Matrix x(1, 3, std::vector<double>{0.1, -2.0, 3.0});
  Matrix noise(1, 3, std::vector<double>{1.0, 0.0, -1.0});
  Matrix out = sgld::langevin_step(x, quadratic(1.0), cfg, noise);
  CHECK(out[0] == doctest::Approx(0.1 - 0.1 + 0.1));
  CHECK(out[1] == doctest::Approx(-2.0 + 0.5));
  CHECK(out[2] == doctest::Approx(3.0 - 0.5 - 0.1));
}

TEST_CASE("langevin step rejects bad noise and non-finite gradients") {
  sgld::SgldConfig cfg;
  Matrix x(2, 2, 1.0);
  CHECK_THROWS_AS(sgld::langevin_step(x, quadratic(1.0), cfg, Matrix(1, 2)), ShapeError);
  Matrix bad = x;
  bad[0] = std::nan("");
  CHECK_THROWS_AS(sgld::langevin_step(bad, quadratic(1.0), cfg, Matrix(2, 2)), NumericError);
}

TEST_CASE("config validation") {
  sgld::SgldConfig cfg;
  cfg.step_size = 0;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
  cfg = {};
  cfg.num_steps = -1;
  CHECK_THROWS_AS(cfg.validate(), UsageError);
}

TEST_CASE("noise-free chains descend a quadratic energy") {
  sgld::SgldConfig cfg;
  cfg.step_size = 0.5;
  cfg.grad_clip = 100.0;
  cfg.noise_std = 0.0;
  cfg.num_steps = 10;
  cfg.record_trace = true;
  Rng rng(1);
  Matrix x0 = rng.normal_matrix(5, 3, 2.0);
  auto res = sgld::adapt(x0, quadratic(1.0), cfg, std::span<Rng>(&rng, 1));
  REQUIRE(res.trace);
  CHECK(res.trace->length() == 11);
  for (std::size_t k = 1; k < res.trace->length(); ++k)
    for (std::size_t r = 0; r < 5; ++r) CHECK(res.trace->energies[k](r, 0) <= res.trace->energies[k - 1](r, 0));
  // x_k = (1 − step/2)^k · x0.
  CHECK(res.features[0] == doctest::Approx(std::pow(0.75, 10) * x0[0]));
}

TEST_CASE("zero steps return the input unchanged") {
  Rng rng(2);
  auto theta = toy_energy(rng);
  sgld::SgldConfig cfg;
  cfg.num_steps = 0;
  Matrix x0 = rng.normal_matrix(3, 4), z(3, 4);
  CHECK(sgld::adapt(x0, z, theta, cfg, std::span<Rng>(&rng, 1)).features == x0);
}

TEST_CASE("fused and graph samplers give the same chains") {
  Rng rng(3);
  auto theta = toy_energy(rng);
  sgld::SgldConfig cfg;
  cfg.step_size = 5.0;
  Matrix x0 = rng.normal_matrix(4, 4), z = rng.normal_matrix(4, 4);
  Rng a(9), b(9);
  Matrix fused = sgld::adapt(x0, z, theta, cfg, std::span<Rng>(&a, 1)).features;
  Matrix graph = sgld::adapt(x0, sgld::conditional_energy(theta, z), cfg, std::span<Rng>(&b, 1)).features;
  for (std::size_t i = 0; i < fused.size(); ++i) CHECK(fused[i] == doctest::Approx(graph[i]).epsilon(1e-12));
}

TEST_CASE("per-row streams make chains independent of batch composition") {
  Rng rng(4);
  auto theta = toy_energy(rng);
  sgld::SgldConfig cfg;
  Matrix x0 = rng.normal_matrix(3, 4), z = rng.normal_matrix(3, 4);
  std::vector<Rng> streams{Rng(1), Rng(2), Rng(3)};
  Matrix all = sgld::adapt(x0, z, theta, cfg, streams).features;
  Rng solo(2);
  Matrix one = sgld::adapt(x0.slice_rows(1, 2), z.slice_rows(1, 2), theta, cfg, std::span<Rng>(&solo, 1)).features;
  for (std::size_t c = 0; c < 4; ++c) CHECK(one(0, c) == all(1, c));
}

TEST_CASE("sampler leaves the energy net untouched") {
  Rng rng(5);
  auto theta = toy_energy(rng);
  std::vector<Matrix> before;
  for (const auto& p : theta.parameters()) before.push_back(p.value());
  sgld::SgldConfig cfg;
  Matrix x0 = rng.normal_matrix(6, 4), z(6, 4);
  sgld::adapt(x0, z, theta, cfg, std::span<Rng>(&rng, 1));
  auto params = theta.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(params[i].value() == before[i]);
    CHECK(params[i].grad().empty());
  }
}

TEST_CASE("trace csv layout") {
  sgld::SgldConfig cfg;
  cfg.num_steps = 2;
  cfg.record_trace = true;
  Rng rng(6);
  auto res = sgld::adapt(rng.normal_matrix(2, 3), quadratic(1.0), cfg, std::span<Rng>(&rng, 1),
                         [](const Matrix& x) { return Matrix(x.rows(), 2, 0.5); });
  auto path = std::filesystem::temp_directory_path() / "ebsa_trace_test.csv";
  sgld::write_trace_csv(path, *res.trace, 2);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "step,chain,energy,f0,f1,p0,p1");
  int rows = 0;
  for (std::string line; std::getline(in, line);) ++rows;
  CHECK(rows == 3 * 2);
  std::filesystem::remove(path);
}

TEST_CASE("replay buffer is FIFO and bounded") {
  sgld::ReplayBuffer buf(500, 0.5, 2);
  for (int i = 0; i < 1200; ++i) {
    buf.push({{double(i), 0.0}, i % 3, 7});
    CHECK(buf.size() <= 500);
  }
  CHECK(buf.size() == 500);
  CHECK(buf.at(0).feature[0] == 700.0);
  CHECK(buf.at(499).feature[0] == 1199.0);
  CHECK_THROWS_AS(buf.push({{1.0}, 0, 0}), ShapeError);
  CHECK_THROWS_AS(sgld::ReplayBuffer(0, 0.5, 2), UsageError);
  CHECK_THROWS_AS(sgld::ReplayBuffer(5, 1.5, 2), UsageError);
}

TEST_CASE("buffer draws follow the sample probability") {
  sgld::ReplayBuffer buf(500, 0.5, 1);
  for (int i = 0; i < 500; ++i) buf.push({{double(i)}, 0, 1});
  Rng rng(7);
  DomainBatch fresh{Matrix(100, 1, -1.0), std::vector<int>(100, 2), std::vector<int>(100, 3)};
  std::size_t from_buffer = 0, total = 0;
  for (int draw = 0; draw < 100; ++draw) {
    auto res = sgld::buffer_init(fresh, buf, rng);
    for (std::size_t r = 0; r < fresh.size(); ++r, ++total) {
      if (res.from_buffer[r]) {
        ++from_buffer;
        CHECK(res.batch.features(r, 0) >= 0.0);
        CHECK(res.batch.domains[r] == 1);
      } else {
        CHECK(res.batch.features(r, 0) == -1.0);
      }
    }
  }
  const double frac = double(from_buffer) / double(total);
  CHECK(frac >= 0.47);
  CHECK(frac <= 0.53);
}

TEST_CASE("empty buffer passes the batch through") {
  sgld::ReplayBuffer buf(10, 1.0, 2);
  Rng rng(8);
  DomainBatch b{Matrix(3, 2, 1.0), {0, 1, 2}, {0, 0, 0}};
  auto res = sgld::buffer_init(b, buf, rng);
  CHECK(res.batch.features == b.features);
  sgld::buffer_push(b, buf);
  CHECK(buf.size() == 3);
}
