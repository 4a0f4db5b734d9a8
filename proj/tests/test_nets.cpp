#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>

#include "ebsa/error.hpp"
#include "ebsa/nets.hpp"
#include "gradcheck.hpp"

using namespace ebsa;
using ad::Tensor;
using nets::ParamView;

namespace {

nets::NetConfig toy_config() {
  nets::NetConfig cfg;
  cfg.input_dim = 6;
  cfg.feature_dim = 5;
  cfg.num_classes = 3;
  cfg.trunk_hidden = {7, 7};
  cfg.feature_scale = 2.0;
  return cfg;
}

// Non-zero biases so every parameter is exercised.
void jitter(const std::vector<Tensor>& params, Rng& rng) {
  for (auto t : params)
    for (auto& v : t.mutable_value().data()) v += 0.1 * rng.normal();
}

Tensor input(Rng& rng, std::size_t n, std::size_t d) { return Tensor::variable(rng.normal_matrix(n, d)); }

}  // namespace

TEST_CASE("trunk gradients w.r.t. weights and inputs") {
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(100 + trial);
    auto cfg = toy_config();
    cfg.feature_bound = trial % 2 ? 3.0 : 0.0;
    nets::Mlp trunk = nets::make_trunk(cfg, rng);
    jitter(trunk.parameters(), rng);
    Tensor x = input(rng, 4, cfg.input_dim);
    auto build = [&] { return ad::sum(ad::square(nets::trunk_forward(x, trunk))); };
    auto leaves = trunk.parameters();
    leaves.push_back(x);
    CHECK(testing::max_gradient_error(build, leaves) < 1e-4);
  }
}

TEST_CASE("classifier gradients w.r.t. weights, features and latent") {
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(200 + trial);
    auto cfg = toy_config();
    auto phi = nets::make_phi(cfg, rng);
    jitter(phi.classifier.parameters(), rng);
    Tensor x = input(rng, 4, cfg.feature_dim), z = input(rng, 4, cfg.feature_dim);
    std::vector<int> y = {0, 1, 2, 1};
    auto build = [&] { return ad::mean(ad::cross_entropy(nets::classify_logits(x, z, phi), y)); };
    auto leaves = phi.classifier.parameters();
    leaves.push_back(x);
    leaves.push_back(z);
    CHECK(testing::max_gradient_error(build, leaves) < 1e-4);
  }
}

TEST_CASE("latent head and KL gradients") {
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(300 + trial);
    auto cfg = toy_config();
    auto phi = nets::make_phi(cfg, rng);
    jitter(phi.prior_head.parameters(), rng);
    jitter(phi.posterior_head.parameters(), rng);
    Tensor x = input(rng, 3, cfg.feature_dim), d = input(rng, 3, cfg.feature_dim);
    Matrix noise = rng.normal_matrix(3, cfg.feature_dim);
    auto build = [&] {
      auto q = nets::infer_posterior(d, phi);
      auto p = nets::infer_prior(x, phi);
      Tensor z = nets::reparam_sample(q, noise);
      return ad::add(ad::mean(nets::kl_diag_gauss(q, p)), ad::mean(ad::square(z)));
    };
    auto leaves = phi.prior_head.parameters();
    for (auto& t : phi.posterior_head.parameters()) leaves.push_back(t);
    leaves.push_back(x);
    leaves.push_back(d);
    CHECK(testing::max_gradient_error(build, leaves) < 1e-4);
  }
}

TEST_CASE("energy gradients w.r.t. weights, features and latent") {
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(400 + trial);
    auto cfg = toy_config();
    auto theta = nets::make_energy(cfg, rng);
    jitter(theta.parameters(), rng);
    Tensor x = input(rng, 4, cfg.feature_dim), z = input(rng, 4, cfg.feature_dim);
    auto build = [&] { return ad::mean(nets::energy(x, z, theta)); };
    auto leaves = theta.parameters();
    leaves.push_back(x);
    leaves.push_back(z);
    CHECK(testing::max_gradient_error(build, leaves) < 1e-4);
  }
}

TEST_CASE("energies lie in [0, 1] and dropout only applies with an rng") {
  Rng rng(5);
  auto cfg = toy_config();
  auto theta = nets::make_energy(cfg, rng);
  Tensor x = Tensor::constant(rng.normal_matrix(20, cfg.feature_dim, 5.0));
  Tensor z = Tensor::constant(Matrix(20, cfg.feature_dim));
  Matrix e1 = nets::energy(x, z, theta).value();
  Matrix e2 = nets::energy(x, z, theta).value();
  CHECK(e1 == e2);
  for (double v : e1.data()) CHECK((v >= 0.0 && v <= 1.0));
  Rng drop(9);
  CHECK(nets::energy(x, z, theta, ParamView::trainable, &drop).value() != e1);
}

TEST_CASE("fused input gradient matches the graph gradient") {
  for (int trial = 0; trial < 5; ++trial) {
    Rng rng(500 + trial);
    auto cfg = toy_config();
    cfg.energy_hidden = 9;
    auto theta = nets::make_energy(cfg, rng);
    jitter(theta.parameters(), rng);
    Matrix xv = rng.normal_matrix(6, cfg.feature_dim, 2.0), zv = rng.normal_matrix(6, cfg.feature_dim);
    Tensor x = Tensor::variable(xv);
    Tensor e = nets::energy(x, Tensor::constant(zv), theta, ParamView::frozen);
    ad::backward(ad::sum(e));
    auto fused = nets::energy_input_gradient(xv, zv, theta);
    for (std::size_t i = 0; i < e.value().size(); ++i)
      CHECK(fused.energy[i] == doctest::Approx(e.value()[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < xv.size(); ++i)
      CHECK(fused.grad[i] == doctest::Approx(x.grad()[i]).epsilon(1e-10).scale(1e-12));
  }
}

TEST_CASE("frozen view leaves parameter nodes untouched") {
  Rng rng(6);
  auto cfg = toy_config();
  auto theta = nets::make_energy(cfg, rng);
  Tensor x = input(rng, 3, cfg.feature_dim);
  Tensor e = ad::sum(nets::energy(x, Tensor::constant(Matrix(3, cfg.feature_dim)), theta, ParamView::frozen));
  ad::backward(e);
  for (const auto& p : theta.parameters()) CHECK(p.grad().empty());
  double norm = 0;
  for (double g : x.grad().data()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("KL of N(1,1) against N(0,1) is one half") {
  nets::GaussianParams q{Tensor::constant(Matrix(1, 1, 1.0)), Tensor::constant(Matrix(1, 1, 1.0))};
  nets::GaussianParams p{Tensor::constant(Matrix(1, 1, 0.0)), Tensor::constant(Matrix(1, 1, 1.0))};
  CHECK(std::abs(nets::kl_diag_gauss(q, p).item() - 0.5) < 1e-12);
  CHECK(nets::kl_diag_gauss(q, q).item() == 0.0);
}

TEST_CASE("KL agrees with a Monte-Carlo estimate") {
  Rng rng(77);
  const std::size_t k = 3;
  const int n = 50000;
  for (int pair = 0; pair < 10; ++pair) {
    Matrix mq = rng.normal_matrix(1, k), mp = rng.normal_matrix(1, k);
    Matrix sq(1, k), sp(1, k);
    for (std::size_t j = 0; j < k; ++j) {
      sq[j] = 0.5 + rng.uniform();
      sp[j] = 0.5 + rng.uniform();
    }
    const double closed = nets::kl_diag_gauss({Tensor::constant(mq), Tensor::constant(sq)},
                                              {Tensor::constant(mp), Tensor::constant(sp)})
                              .item();
    double sum = 0.0, sum2 = 0.0;
    for (int s = 0; s < n; ++s) {
      double lr = 0.0;
      for (std::size_t j = 0; j < k; ++j) {
        const double z = mq[j] + sq[j] * rng.normal();
        const double a = (z - mq[j]) / sq[j], b = (z - mp[j]) / sp[j];
        lr += std::log(sp[j] / sq[j]) - 0.5 * a * a + 0.5 * b * b;
      }
      sum += lr;
      sum2 += lr * lr;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sum2 / n - mean * mean) / n);
    CHECK(std::abs(mean - closed) < 3.0 * se);
  }
}

TEST_CASE("KL rejects non-positive std") {
  nets::GaussianParams q{Tensor::constant(Matrix(1, 1)), Tensor::constant(Matrix(1, 1, 0.0))};
  nets::GaussianParams p{Tensor::constant(Matrix(1, 1)), Tensor::constant(Matrix(1, 1, 1.0))};
  CHECK_THROWS_AS(nets::kl_diag_gauss(q, p), InvariantError);
}

TEST_CASE("latent std stays above the floor") {
  Rng rng(8);
  auto phi = nets::make_phi(toy_config(), rng);
  for (auto t : phi.prior_head.parameters()) t.mutable_value() *= 50.0;
  auto p = nets::infer_prior(Tensor::constant(rng.normal_matrix(10, 5, 10.0)), phi);
  for (double s : p.std.value().data()) CHECK(s >= nets::kStdFloor);
}

TEST_CASE("power iteration matches the SVD") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t in = 4 + trial, out = 7 - trial;
    Matrix w = rng.normal_matrix(in, out);
    Eigen::MatrixXd e(in, out);
    for (std::size_t r = 0; r < in; ++r)
      for (std::size_t c = 0; c < out; ++c) e(r, c) = w(r, c);
    const double top = Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues()(0);
    Matrix u = rng.normal_matrix(1, in);
    CHECK(nets::power_iteration(w, u, 500) == doctest::Approx(top).epsilon(1e-8));
  }
}

TEST_CASE("spectral normalization brings every top singular value to one") {
  Rng rng(22);
  auto theta = nets::make_energy(toy_config(), rng);
  for (auto t : theta.parameters()) t.mutable_value() *= 3.0;
  nets::spectral_normalize(theta, 300);
  for (const auto& layer : theta.mlp.layers()) {
    const Matrix& w = layer.weight.value();
    Eigen::MatrixXd e(w.rows(), w.cols());
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c) e(r, c) = w(r, c);
    CHECK(Eigen::JacobiSVD<Eigen::MatrixXd>(e).singularValues()(0) == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("mlp export and import round trip") {
  Rng rng(23);
  auto cfg = toy_config();
  cfg.feature_bound = 4.0;
  auto trunk = nets::make_trunk(cfg, rng);
  ArrayFile file;
  trunk.export_to(file, "trunk");
  nets::Mlp back;
  back.import_from(file, "trunk");
  Tensor x = Tensor::constant(rng.normal_matrix(3, cfg.input_dim));
  CHECK(nets::trunk_forward(x, back).value() == nets::trunk_forward(x, trunk).value());
  CHECK(back.output_gain() == cfg.feature_scale);
  CHECK(back.output_bound() == 4.0);
}

TEST_CASE("identity trunk passes features through") {
  Rng rng(24);
  auto cfg = toy_config();
  cfg.identity_trunk = true;
  cfg.input_dim = cfg.feature_dim;
  auto trunk = nets::make_trunk(cfg, rng);
  Matrix x = rng.normal_matrix(3, cfg.feature_dim);
  CHECK(nets::trunk_forward(Tensor::constant(x), trunk).value() == x);
  CHECK(trunk.parameters().empty());
}

TEST_CASE("clone is deep") {
  Rng rng(25);
  auto theta = nets::make_energy(toy_config(), rng);
  auto copy = theta.clone();
  copy.mlp.layers()[0].weight.mutable_value()[0] += 1.0;
  CHECK(copy.mlp.layers()[0].weight.value() != theta.mlp.layers()[0].weight.value());
}
