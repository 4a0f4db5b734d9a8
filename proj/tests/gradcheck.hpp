#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "ebsa/autodiff.hpp"

namespace testing {

using ebsa::Matrix;
using ebsa::ad::Tensor;

/// ‖a − n‖ / max(‖a‖ + ‖n‖, 1e-10) between the analytic gradient of
/// `analytic` with respect to `leaf` and central differences of `numeric`.
/// Both must read the leaf's current value every time they are called. They
/// differ when stop_grad makes the routed gradient differ from the derivative
/// of the loss value.
inline double gradient_error(const std::function<Tensor()>& analytic, const std::function<Tensor()>& numeric,
                             Tensor leaf, double h = 1e-5) {
  Tensor root = analytic();
  leaf.zero_grad();
  ebsa::ad::backward(root);
  Matrix grad = leaf.grad().empty() ? Matrix(leaf.rows(), leaf.cols()) : leaf.grad();

  Matrix& v = leaf.mutable_value();
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = numeric().item();
    v[i] = keep - h;
    const double down = numeric().item();
    v[i] = keep;
    const double slope = (up - down) / (2.0 * h);
    diff += (grad[i] - slope) * (grad[i] - slope);
    na += grad[i] * grad[i];
    nn += slope * slope;
  }
  return std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-10);
}

inline double gradient_error(const std::function<Tensor()>& build, Tensor leaf, double h = 1e-5) {
  return gradient_error(build, build, std::move(leaf), h);
}

inline double max_gradient_error(const std::function<Tensor()>& analytic, const std::function<Tensor()>& numeric,
                                 const std::vector<Tensor>& leaves, double h = 1e-5) {
  double worst = 0.0;
  for (const auto& t : leaves) worst = std::max(worst, gradient_error(analytic, numeric, t, h));
  return worst;
}

inline double max_gradient_error(const std::function<Tensor()>& build, const std::vector<Tensor>& leaves,
                                 double h = 1e-5) {
  return max_gradient_error(build, build, leaves, h);
}

}  // namespace testing
