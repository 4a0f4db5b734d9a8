#include "ebsa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "ebsa/error.hpp"

namespace ebsa::ad {

namespace {

using NodePtr = std::shared_ptr<Node>;
using ForwardFn = std::function<Matrix(const Node&)>;
using BackwardFn = std::function<void(Node&)>;

Tensor make_op(std::string kind, std::vector<NodePtr> parents, ForwardFn fwd, BackwardFn bwd) {
  auto n = std::make_shared<Node>();
  n->kind = std::move(kind);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->forward_fn = std::move(fwd);
  n->backward_fn = std::move(bwd);
  n->value = n->forward_fn(*n);
  return Tensor(std::move(n));
}

void accumulate(Node& parent, const Matrix& g) {
  if (parent.requires_grad) parent.grad += g;
}

[[noreturn]] void shape_fail(const std::string& kind, const Matrix& a, const Matrix& b) {
  throw ShapeError(kind + ": incompatible operands " + a.shape_string() + " and " + b.shape_string());
}

void require_same(const std::string& kind, const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) shape_fail(kind, a, b);
}

template <class F, class D>
Tensor unary(std::string kind, const Tensor& a, F f, D df) {
  return make_op(
      std::move(kind), {a.shared()},
      [f](const Node& n) {
        Matrix out = n.parents[0]->value;
        for (auto& v : out.data()) v = f(v);
        return out;
      },
      [df](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        const auto& x = p.value.data();
        const auto& y = n.value.data();
        const auto& g = n.grad.data();
        auto& pg = p.grad.data();
        for (std::size_t i = 0; i < x.size(); ++i) pg[i] += g[i] * df(x[i], y[i]);
      });
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor Tensor::constant(Matrix value, std::string name) {
  auto n = std::make_shared<Node>();
  n->kind = std::move(name);
  n->value = std::move(value);
  return Tensor(std::move(n));
}

Tensor Tensor::variable(Matrix value, std::string name) {
  auto n = std::make_shared<Node>();
  n->kind = std::move(name);
  n->value = std::move(value);
  n->requires_grad = true;
  return Tensor(std::move(n));
}

Matrix& Tensor::mutable_value() {
  if (!node_->is_leaf()) throw UsageError("mutable_value: '" + node_->kind + "' is not a leaf");
  return node_->value;
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) {
    throw UsageError("item: '" + kind() + "' is not scalar " + value().shape_string());
  }
  return value()(0, 0);
}

void Tensor::zero_grad() { node_->grad = Matrix(rows(), cols()); }

Graph::Graph(Tensor root) : root_(std::move(root)) {
  if (!root_.defined()) throw UsageError("Graph: undefined root");
  std::unordered_set<Node*> seen;
  std::function<void(Node*)> visit = [&](Node* n) {
    if (!seen.insert(n).second) return;
    for (const auto& p : n->parents) visit(p.get());
    order_.push_back(n);
  };
  visit(root_.node());

  std::unordered_set<Node*> seen_grad;
  std::function<void(Node*)> visit_grad = [&](Node* n) {
    if (!n->requires_grad || !seen_grad.insert(n).second) return;
    for (const auto& p : n->parents) visit_grad(p.get());
    backward_order_.push_back(n);
  };
  visit_grad(root_.node());
}

const Tensor& Graph::forward() {
  for (Node* n : order_) {
    if (!n->is_leaf()) n->value = n->forward_fn(*n);
  }
  return root_;
}

void Graph::backward() {
  const Matrix& rv = root_.value();
  if (rv.rows() != 1 || rv.cols() != 1) {
    throw UsageError("backward: root '" + root_.kind() + "' must be scalar, got " + rv.shape_string());
  }
  for (Node* n : backward_order_) n->grad = Matrix(n->value.rows(), n->value.cols());
  if (!root_.requires_grad()) return;
  root_.node()->grad(0, 0) = 1.0;
  for (auto it = backward_order_.rbegin(); it != backward_order_.rend(); ++it) {
    Node* n = *it;
    if (!n->is_leaf() && n->backward_fn) n->backward_fn(*n);
  }
}

void backward(const Tensor& root) { Graph(root).backward(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  return make_op(
      "matmul", {a.shared(), b.shared()},
      [](const Node& n) {
        const Matrix& x = n.parents[0]->value;
        const Matrix& w = n.parents[1]->value;
        if (x.cols() != w.rows()) shape_fail("matmul", x, w);
        return ebsa::matmul(x, w);
      },
      [](Node& n) {
        Node& x = *n.parents[0];
        Node& w = *n.parents[1];
        if (x.requires_grad) x.grad += matmul_bt(n.grad, w.value);
        if (w.requires_grad) w.grad += matmul_at(x.value, n.grad);
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return make_op(
      "add", {a.shared(), b.shared()},
      [](const Node& n) {
        require_same("add", n.parents[0]->value, n.parents[1]->value);
        Matrix out = n.parents[0]->value;
        out += n.parents[1]->value;
        return out;
      },
      [](Node& n) {
        accumulate(*n.parents[0], n.grad);
        accumulate(*n.parents[1], n.grad);
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return make_op(
      "sub", {a.shared(), b.shared()},
      [](const Node& n) {
        require_same("sub", n.parents[0]->value, n.parents[1]->value);
        Matrix out = n.parents[0]->value;
        out -= n.parents[1]->value;
        return out;
      },
      [](Node& n) {
        accumulate(*n.parents[0], n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->grad -= n.grad;
      });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  return make_op(
      "add_bias", {a.shared(), bias.shared()},
      [](const Node& n) {
        const Matrix& x = n.parents[0]->value;
        const Matrix& b = n.parents[1]->value;
        if (b.rows() != 1 || b.cols() != x.cols()) shape_fail("add_bias", x, b);
        Matrix out = x;
        for (std::size_t r = 0; r < out.rows(); ++r) {
          auto row = out.row(r);
          for (std::size_t c = 0; c < row.size(); ++c) row[c] += b(0, c);
        }
        return out;
      },
      [](Node& n) {
        accumulate(*n.parents[0], n.grad);
        Node& b = *n.parents[1];
        if (!b.requires_grad) return;
        for (std::size_t r = 0; r < n.grad.rows(); ++r)
          for (std::size_t c = 0; c < n.grad.cols(); ++c) b.grad(0, c) += n.grad(r, c);
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return make_op(
      "mul", {a.shared(), b.shared()},
      [](const Node& n) {
        require_same("mul", n.parents[0]->value, n.parents[1]->value);
        Matrix out = n.parents[0]->value;
        const auto& y = n.parents[1]->value.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
        return out;
      },
      [](Node& n) {
        Node& a = *n.parents[0];
        Node& b = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          if (a.requires_grad) a.grad[i] += n.grad[i] * b.value[i];
          if (b.requires_grad) b.grad[i] += n.grad[i] * a.value[i];
        }
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return make_op(
      "div", {a.shared(), b.shared()},
      [](const Node& n) {
        require_same("div", n.parents[0]->value, n.parents[1]->value);
        Matrix out = n.parents[0]->value;
        const auto& y = n.parents[1]->value.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] /= y[i];
        return out;
      },
      [](Node& n) {
        Node& a = *n.parents[0];
        Node& b = *n.parents[1];
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
          const double inv = 1.0 / b.value[i];
          if (a.requires_grad) a.grad[i] += n.grad[i] * inv;
          if (b.requires_grad) b.grad[i] -= n.grad[i] * n.value[i] * inv;
        }
      });
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor swish(const Tensor& a) {
  return unary("swish", a, [](double x) { return x * sigmoid_scalar(x); },
               [](double x, double y) {
                 const double s = sigmoid_scalar(x);
                 return s + y * (1.0 - s);
               });
}

Tensor softplus(const Tensor& a) {
  return unary("softplus", a,
               [](double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
               [](double x, double) { return sigmoid_scalar(x); });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sum(const Tensor& a) {
  return make_op(
      "sum", {a.shared()},
      [](const Node& n) {
        double s = 0.0;
        for (double v : n.parents[0]->value.data()) s += v;
        return Matrix(1, 1, s);
      },
      [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        const double g = n.grad(0, 0);
        for (auto& v : p.grad.data()) v += g;
      });
}

Tensor mean(const Tensor& a) {
  return make_op(
      "mean", {a.shared()},
      [](const Node& n) {
        const Matrix& x = n.parents[0]->value;
        if (x.empty()) throw ShapeError("mean: empty operand " + x.shape_string());
        double s = 0.0;
        for (double v : x.data()) s += v;
        return Matrix(1, 1, s / static_cast<double>(x.size()));
      },
      [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        const double g = n.grad(0, 0) / static_cast<double>(p.value.size());
        for (auto& v : p.grad.data()) v += g;
      });
}

Tensor row_sum(const Tensor& a) {
  return make_op(
      "row_sum", {a.shared()},
      [](const Node& n) {
        const Matrix& x = n.parents[0]->value;
        Matrix out(x.rows(), 1);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          double s = 0.0;
          for (double v : x.row(r)) s += v;
          out(r, 0) = s;
        }
        return out;
      },
      [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t r = 0; r < p.grad.rows(); ++r)
          for (auto& v : p.grad.row(r)) v += n.grad(r, 0);
      });
}

Tensor softmax(const Tensor& logits) {
  return make_op(
      "softmax", {logits.shared()},
      [](const Node& n) {
        Matrix out = n.parents[0]->value;
        for (std::size_t r = 0; r < out.rows(); ++r) {
          auto row = out.row(r);
          const double m = *std::max_element(row.begin(), row.end());
          double s = 0.0;
          for (auto& v : row) {
            v = std::exp(v - m);
            s += v;
          }
          for (auto& v : row) v /= s;
        }
        return out;
      },
      [](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t r = 0; r < n.value.rows(); ++r) {
          auto y = n.value.row(r);
          auto g = n.grad.row(r);
          const double gy = dot(g, y);
          auto pg = p.grad.row(r);
          for (std::size_t c = 0; c < y.size(); ++c) pg[c] += y[c] * (g[c] - gy);
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  std::vector<int> owned(labels.begin(), labels.end());
  return make_op(
      "cross_entropy", {logits.shared()},
      [owned](const Node& n) {
        const Matrix& x = n.parents[0]->value;
        if (owned.size() != x.rows()) {
          throw ShapeError("cross_entropy: " + std::to_string(owned.size()) + " labels for logits " +
                           x.shape_string());
        }
        Matrix out(x.rows(), 1);
        for (std::size_t r = 0; r < x.rows(); ++r) {
          const int y = owned[r];
          if (y < 0 || static_cast<std::size_t>(y) >= x.cols()) {
            throw ShapeError("cross_entropy: label " + std::to_string(y) + " outside " +
                             std::to_string(x.cols()) + " classes");
          }
          auto row = x.row(r);
          const double m = *std::max_element(row.begin(), row.end());
          double s = 0.0;
          for (double v : row) s += std::exp(v - m);
          out(r, 0) = m + std::log(s) - row[static_cast<std::size_t>(y)];
        }
        return out;
      },
      [owned](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t r = 0; r < p.value.rows(); ++r) {
          auto row = p.value.row(r);
          const double m = *std::max_element(row.begin(), row.end());
          double s = 0.0;
          for (double v : row) s += std::exp(v - m);
          const double g = n.grad(r, 0);
          auto pg = p.grad.row(r);
          for (std::size_t c = 0; c < row.size(); ++c) {
            const double prob = std::exp(row[c] - m) / s;
            pg[c] += g * (prob - (static_cast<int>(c) == owned[r] ? 1.0 : 0.0));
          }
        }
      });
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  return make_op(
      "concat_cols", {a.shared(), b.shared()},
      [](const Node& n) {
        const Matrix& x = n.parents[0]->value;
        const Matrix& y = n.parents[1]->value;
        if (x.rows() != y.rows()) shape_fail("concat_cols", x, y);
        Matrix out(x.rows(), x.cols() + y.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
          auto o = out.row(r);
          std::copy(x.row(r).begin(), x.row(r).end(), o.begin());
          std::copy(y.row(r).begin(), y.row(r).end(), o.begin() + static_cast<std::ptrdiff_t>(x.cols()));
        }
        return out;
      },
      [](Node& n) {
        Node& a = *n.parents[0];
        Node& b = *n.parents[1];
        const std::size_t ca = a.value.cols();
        for (std::size_t r = 0; r < n.grad.rows(); ++r) {
          auto g = n.grad.row(r);
          if (a.requires_grad)
            for (std::size_t c = 0; c < ca; ++c) a.grad(r, c) += g[c];
          if (b.requires_grad)
            for (std::size_t c = 0; c < b.value.cols(); ++c) b.grad(r, c) += g[ca + c];
        }
      });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  return make_op(
      "slice_cols", {a.shared()},
      [begin, end](const Node& n) {
        const Matrix& x = n.parents[0]->value;
        if (begin > end || end > x.cols()) {
          throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                           ") outside " + x.shape_string());
        }
        Matrix out(x.rows(), end - begin);
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = x(r, c);
        return out;
      },
      [begin](Node& n) {
        Node& p = *n.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t r = 0; r < n.grad.rows(); ++r)
          for (std::size_t c = 0; c < n.grad.cols(); ++c) p.grad(r, c + begin) += n.grad(r, c);
      });
}

Tensor stop_grad(const Tensor& a) {
  auto n = std::make_shared<Node>();
  n->kind = "stop_grad";
  n->parents = {a.shared()};
  n->stop_grad = true;
  n->requires_grad = false;
  n->forward_fn = [](const Node& self) { return self.parents[0]->value; };
  n->value = a.value();
  return Tensor(std::move(n));
}

}  // namespace ebsa::ad
