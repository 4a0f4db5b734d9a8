#include <doctest.h>

#include "ebsa/error.hpp"
#include "ebsa/objective.hpp"
#include "gradcheck.hpp"

using namespace ebsa;
using ad::Tensor;

namespace {

struct Toy {
  nets::NetConfig cfg;
  nets::PhiNets phi;
  nets::EnergyNet theta;
  Tensor pos;
  std::vector<int> pos_labels = {0, 1, 2, 0, 1};
  Tensor adapted;
  std::vector<int> neg_labels = {2, 0, 1, 1};
  Matrix centers;
  Matrix latent;

  explicit Toy(std::uint64_t seed) {
    Rng rng(seed);
    cfg.input_dim = 6;
    cfg.feature_dim = 4;
    cfg.num_classes = 3;
    phi = nets::make_phi(cfg, rng);
    theta = nets::make_energy(cfg, rng);
    for (auto t : parameters())
      for (auto& v : t.mutable_value().data()) v += 0.1 * rng.normal();
    pos = Tensor::variable(rng.normal_matrix(5, 4));
    adapted = Tensor::variable(rng.normal_matrix(4, 4));
    centers = rng.normal_matrix(4, 4);
    latent = rng.normal_matrix(4, 4);
  }

  std::vector<Tensor> parameters() const {
    auto out = phi.parameters();
    for (auto& t : theta.parameters()) out.push_back(t);
    return out;
  }

  objective::LossBreakdown loss(bool latent_model, const objective::LossWeights& w = {}) const {
    objective::Positives p{pos, pos_labels};
    objective::Negatives n{adapted, neg_labels, centers, latent};
    objective::LossOptions opts{w, nullptr};
    if (!latent_model) return objective::loss_no_latent(p, n, phi, theta, opts);
    Rng rng(1234);
    return objective::loss_with_latent(p, n, phi, theta, rng, opts);
  }
};

bool all_zero(const Tensor& t) {
  for (double g : t.grad().data())
    if (g != 0.0) return false;
  return true;
}

}  // namespace

TEST_CASE("loss without latent matches finite differences") {
  for (int trial = 0; trial < 5; ++trial) {
    Toy toy(10 + trial);
    auto params = toy.phi.classifier.parameters();
    for (auto& t : toy.theta.parameters()) params.push_back(t);
    params.push_back(toy.pos);
    auto full = [&] { return toy.loss(false).total_tensor; };
    // The bracket enters parameters frozen, so their derivative is that of the
    // remaining terms; the adapted features see the bracket alone.
    auto routed = [&] { return toy.loss(false, {1, 1, 1, 1, 0}).total_tensor; };
    auto bracket = [&] { return toy.loss(false, {0, 0, 0, 0, 1}).total_tensor; };
    CHECK(testing::max_gradient_error(full, routed, params) < 1e-4);
    CHECK(testing::gradient_error(full, bracket, toy.adapted) < 1e-4);
  }
}

TEST_CASE("loss with latent matches finite differences") {
  for (int trial = 0; trial < 5; ++trial) {
    Toy toy(20 + trial);
    auto params = toy.parameters();
    params.push_back(toy.pos);
    auto full = [&] { return toy.loss(true).total_tensor; };
    auto routed = [&] { return toy.loss(true, {1, 1, 1, 1, 0}).total_tensor; };
    auto bracket = [&] { return toy.loss(true, {0, 0, 0, 0, 1}).total_tensor; };
    CHECK(testing::max_gradient_error(full, routed, params) < 1e-4);
    CHECK(testing::gradient_error(full, bracket, toy.adapted) < 1e-4);
  }
}

TEST_CASE("adapted bracket gradient w.r.t. the adapted features") {
  for (int trial = 0; trial < 5; ++trial) {
    Toy toy(30 + trial);
    objective::LossWeights only_adapted{0, 0, 0, 0, 1};
    for (bool latent : {false, true}) {
      auto build = [&] { return toy.loss(latent, only_adapted).total_tensor; };
      CHECK(testing::gradient_error(build, toy.adapted) < 1e-4);
    }
  }
}

TEST_CASE("adapted bracket reaches only the adapted features") {
  Toy toy(40);
  for (bool latent : {false, true}) {
    auto loss = toy.loss(latent, {0, 0, 0, 0, 1});
    ad::backward(loss.total_tensor);
    for (const auto& p : toy.parameters()) CHECK((p.grad().empty() || all_zero(p)));
    CHECK(!all_zero(toy.adapted));
  }
}

TEST_CASE("negative energy term does not reach the chain states") {
  Toy toy(41);
  for (bool latent : {false, true}) {
    auto loss = toy.loss(latent, {0, 0, 0, 1, 0});
    ad::backward(loss.total_tensor);
    CHECK((toy.adapted.grad().empty() || all_zero(toy.adapted)));
    bool theta_moved = false;
    for (const auto& p : toy.theta.parameters()) theta_moved |= !p.grad().empty() && !all_zero(p);
    CHECK(theta_moved);
    for (const auto& p : toy.phi.parameters()) CHECK((p.grad().empty() || all_zero(p)));
  }
}

TEST_CASE("loss breakdown sums to the total") {
  Toy toy(42);
  auto l = toy.loss(true);
  CHECK(l.total == doctest::Approx(l.classification + l.kl + l.positive_energy - l.negative_energy + l.adapted));
  auto l0 = toy.loss(false);
  CHECK(l0.kl == 0.0);
}

TEST_CASE("class centers") {
  Matrix f(4, 2, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  DomainBatch b{f, {0, 1, 0, 1}, {0, 0, 0, 0}};
  auto c0 = objective::class_center(b, 0);
  REQUIRE(c0);
  CHECK((*c0)[0] == 3.0);
  CHECK((*c0)[1] == 4.0);
  CHECK(!objective::class_center(b, 2));

  Tensor rows = objective::class_center_rows(Tensor::constant(f), b.labels);
  CHECK(rows.value()(2, 0) == doctest::Approx(3.0));
  CHECK(rows.value()(3, 1) == doctest::Approx(6.0));

  DomainBatch neg{Matrix(2, 2, std::vector<double>{9, 9, 1, 1}), {1, 3}, {5, 5}};
  Matrix nc = objective::negative_centers(b, neg);
  CHECK(nc(0, 0) == 5.0);
  CHECK(nc(1, 0) == 1.0);
}

TEST_CASE("loss rejects inconsistent inputs") {
  Toy toy(43);
  objective::Positives p{toy.pos, {0, 1}};
  objective::Negatives n{toy.adapted, toy.neg_labels, toy.centers, toy.latent};
  CHECK_THROWS_AS(objective::loss_no_latent(p, n, toy.phi, toy.theta), ShapeError);
  objective::Negatives frozen{Tensor::constant(toy.adapted.value()), toy.neg_labels, toy.centers, toy.latent};
  objective::Positives ok{toy.pos, toy.pos_labels};
  CHECK_THROWS_AS(objective::loss_no_latent(ok, frozen, toy.phi, toy.theta), UsageError);
}
