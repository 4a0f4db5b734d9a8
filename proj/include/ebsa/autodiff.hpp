#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// Nodes are built eagerly (values are available as soon as an op returns) and
// also keep their forward rule, so a Graph can re-evaluate the whole
// expression after leaf values change. stop_grad nodes forward their input
// unchanged and cut every gradient path through them.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ebsa/matrix.hpp"

namespace ebsa::ad {

struct Node {
  std::string kind;
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  bool stop_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  /// Recomputes value from parents; empty for leaves.
  std::function<Matrix(const Node&)> forward_fn;
  /// Adds this node's grad contribution into parents that require grad.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return parents.empty(); }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  /// Leaf that never receives gradient.
  static Tensor constant(Matrix value, std::string name = "constant");
  /// Leaf whose gradient is populated by backward.
  static Tensor variable(Matrix value, std::string name = "variable");

  bool defined() const { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  /// Leaves only; used by optimizers and by Graph::forward re-evaluation.
  Matrix& mutable_value();
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty() || node_->value.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_stop_grad() const { return node_->stop_grad; }
  const std::string& kind() const { return node_->kind; }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  /// Scalar value of a 1×1 tensor.
  double item() const;

  void zero_grad();
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Topologically ordered view of the expression rooted at one tensor.
class Graph {
 public:
  explicit Graph(Tensor root);

  /// Re-evaluates every interior node from current leaf values.
  const Tensor& forward();
  /// Populates grad on every gradient-reachable node; root must be 1×1.
  void backward();

  const Tensor& root() const { return root_; }
  std::size_t size() const { return order_.size(); }

 private:
  Tensor root_;
  std::vector<Node*> order_;           // all nodes, parents first
  std::vector<Node*> backward_order_;  // nodes gradient can reach, parents first
};

/// Convenience: Graph(root).backward().
void backward(const Tensor& root);

// Primitive set. All ops are row-major; "row" ops act per sample.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
/// a (n×m) + bias (1×m) broadcast over rows.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor swish(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
/// Sum of all entries, 1×1.
Tensor sum(const Tensor& a);
/// Mean of all entries, 1×1.
Tensor mean(const Tensor& a);
/// Per-row sum, n×1.
Tensor row_sum(const Tensor& a);
/// Row-wise softmax with max-shift.
Tensor softmax(const Tensor& logits);
/// Per-row -log softmax(logits)[label], n×1, computed via log-sum-exp.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);
Tensor concat_cols(const Tensor& a, const Tensor& b);
/// Columns [begin, end).
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor stop_grad(const Tensor& a);

}  // namespace ebsa::ad
