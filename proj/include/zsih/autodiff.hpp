#pragma once

// Define-by-run reverse-mode differentiation over dense Eigen matrices.
//
// Every value is a 2-D matrix; vectors are 1 x n rows and scalars are 1 x 1.
// A Var is a cheap handle to a shared graph node. Ops build new nodes and
// record a backward rule; backward() walks the graph once in reverse
// topological order. Leaves (parameters) accumulate gradients across calls
// until zero_grad(); interior nodes are reset at the start of every pass.
//
// Broadcasting is limited to scalar-with-matrix and row-with-matrix.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "zsih/errors.hpp"

namespace zsih::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Index = Eigen::Index;

/// Reduction over every element.
inline constexpr int kAllAxes = -1;

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents. Empty for leaves.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Matrix<Scalar>::Zero(value.rows(), value.cols());
    }
  }
};

template <typename Scalar>
class Var {
 public:
  using MatrixType = Matrix<Scalar>;
  using NodeType = Node<Scalar>;

  Var() = default;
  explicit Var(std::shared_ptr<NodeType> node) : node_(std::move(node)) {}

  static Var constant(MatrixType value) {
    auto node = std::make_shared<NodeType>();
    node->value = std::move(value);
    return Var(std::move(node));
  }

  /// Trainable leaf. Gradient storage is allocated up front.
  static Var parameter(MatrixType value) {
    auto node = std::make_shared<NodeType>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->ensure_grad();
    return Var(std::move(node));
  }

  static Var scalar(Scalar s) {
    MatrixType m(1, 1);
    m(0, 0) = s;
    return constant(std::move(m));
  }

  bool valid() const { return static_cast<bool>(node_); }
  const MatrixType& value() const { return node_->value; }
  /// Mutable access for leaves: optimizer updates and finite-difference probes.
  MatrixType& value_mut() {
    if (node_->backward) throw ContractError("value_mut() on a non-leaf node");
    return node_->value;
  }
  const MatrixType& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }
  Scalar item() const {
    if (size() != 1) throw ContractError("item() on a non-scalar node");
    return node_->value(0, 0);
  }
  void zero_grad() {
    node_->ensure_grad();
    node_->grad.setZero();
  }

  const std::shared_ptr<NodeType>& node() const { return node_; }

 private:
  std::shared_ptr<NodeType> node_;
};

namespace detail {

inline std::string shape_str(Index r, Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

template <typename Scalar>
std::string shape_str(const Var<Scalar>& v) {
  return shape_str(v.rows(), v.cols());
}

/// Result shape of a broadcasting binary op, or DimensionError.
inline std::pair<Index, Index> broadcast_shape(Index ar, Index ac, Index br, Index bc,
                                               const char* op) {
  if (ar == br && ac == bc) return {ar, ac};
  if (ar == 1 && ac == 1) return {br, bc};
  if (br == 1 && bc == 1) return {ar, ac};
  if (ar == 1 && ac == bc) return {br, bc};
  if (br == 1 && ac == bc) return {ar, ac};
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(ar, ac) +
                       " with " + shape_str(br, bc));
}

template <typename Scalar>
Matrix<Scalar> expand(const Matrix<Scalar>& x, Index rows, Index cols) {
  if (x.rows() == rows && x.cols() == cols) return x;
  if (x.size() == 1) return Matrix<Scalar>::Constant(rows, cols, x(0, 0));
  return x.replicate(rows, 1);
}

/// Sum a broadcast gradient back down to the operand's shape.
template <typename Scalar>
Matrix<Scalar> reduce_to(const Matrix<Scalar>& g, Index rows, Index cols) {
  if (g.rows() == rows && g.cols() == cols) return g;
  if (rows == 1 && cols == 1) {
    Matrix<Scalar> s(1, 1);
    s(0, 0) = g.sum();
    return s;
  }
  return g.colwise().sum();
}

}  // namespace detail

/// Creates an interior node. The backward rule is dropped when no parent
/// needs gradients, so constant subgraphs cost nothing in the reverse pass.
template <typename Scalar>
Var<Scalar> make_op(Matrix<Scalar> value, std::vector<Var<Scalar>> parents,
                    std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var<Scalar>(std::move(node));
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + detail::shape_str(a) + " * " + detail::shape_str(b));
  }
  return make_op<Scalar>(a.value() * b.value(), {a, b}, [](Node<Scalar>& n) {
    auto& lhs = *n.parents[0];
    auto& rhs = *n.parents[1];
    if (lhs.requires_grad) lhs.grad.noalias() += n.grad * rhs.value.transpose();
    if (rhs.requires_grad) rhs.grad.noalias() += lhs.value.transpose() * n.grad;
  });
}

/// Row-wise Kronecker product: out(i, j*q + k) = a(i, j) * b(i, k).
template <typename Scalar>
Var<Scalar> kron_rows(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("kron_rows: row count " + detail::shape_str(a) + " vs " +
                         detail::shape_str(b));
  }
  const Index n = a.rows(), p = a.cols(), q = b.cols();
  Matrix<Scalar> out(n, p * q);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < p; ++j) {
      out.row(i).segment(j * q, q) = a.value()(i, j) * b.value().row(i);
    }
  }
  return make_op<Scalar>(std::move(out), {a, b}, [p, q](Node<Scalar>& node) {
    auto& lhs = *node.parents[0];
    auto& rhs = *node.parents[1];
    const Index rows = node.grad.rows();
    for (Index i = 0; i < rows; ++i) {
      for (Index j = 0; j < p; ++j) {
        auto g = node.grad.row(i).segment(j * q, q);
        if (lhs.requires_grad) lhs.grad(i, j) += g.dot(rhs.value.row(i));
        if (rhs.requires_grad) rhs.grad.row(i) += lhs.value(i, j) * g;
      }
    }
  });
}

/// Kronecker product of two vectors (either orientation); result is a 1 x p*q row.
template <typename Scalar>
Var<Scalar> kron_vec(const Var<Scalar>& a, const Var<Scalar>& b);

/// Reinterprets the element sequence in row-major order with a new shape.
template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Index rows, Index cols) {
  if (rows * cols != a.size()) {
    throw DimensionError("reshape: " + detail::shape_str(a) + " to " +
                         detail::shape_str(rows, cols));
  }
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Index in_rows = a.rows(), in_cols = a.cols();
  RowMajor src = a.value();
  Matrix<Scalar> out = Eigen::Map<const RowMajor>(src.data(), rows, cols);
  return make_op<Scalar>(std::move(out), {a}, [in_rows, in_cols](Node<Scalar>& n) {
    RowMajor g = n.grad;
    n.parents[0]->grad += Eigen::Map<const RowMajor>(g.data(), in_rows, in_cols);
  });
}

template <typename Scalar>
Var<Scalar> kron_vec(const Var<Scalar>& a, const Var<Scalar>& b) {
  if ((a.rows() != 1 && a.cols() != 1) || (b.rows() != 1 && b.cols() != 1)) {
    throw DimensionError("kron_vec: operands must be vectors, got " + detail::shape_str(a) +
                         " and " + detail::shape_str(b));
  }
  auto as_row = [](const Var<Scalar>& v) { return v.rows() == 1 ? v : reshape(v, 1, v.size()); };
  return kron_rows(as_row(a), as_row(b));
}

/// Horizontal concatenation [a b].
template <typename Scalar>
Var<Scalar> concat_cols(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("concat_cols: " + detail::shape_str(a) + " | " + detail::shape_str(b));
  }
  Matrix<Scalar> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Index split = a.cols();
  return make_op<Scalar>(std::move(out), {a, b}, [split](Node<Scalar>& n) {
    auto& lhs = *n.parents[0];
    auto& rhs = *n.parents[1];
    if (lhs.requires_grad) lhs.grad += n.grad.leftCols(split);
    if (rhs.requires_grad) rhs.grad += n.grad.rightCols(n.grad.cols() - split);
  });
}

/// Softmax across each row.
template <typename Scalar>
Var<Scalar> softmax_rows(const Var<Scalar>& a) {
  Matrix<Scalar> out = a.value();
  for (Index i = 0; i < out.rows(); ++i) {
    const Scalar mx = out.row(i).maxCoeff();
    out.row(i) = (out.row(i).array() - mx).exp();
    out.row(i) /= out.row(i).sum();
  }
  return make_op<Scalar>(out, {a}, [](Node<Scalar>& n) {
    const auto& y = n.value;
    Matrix<Scalar> dot = (n.grad.array() * y.array()).rowwise().sum();
    n.parents[0]->grad.array() += y.array() * (n.grad.colwise() - dot.col(0)).array();
  });
}

/// Segment pooling: out(i, :) = sum_l weights(i, l) * x(i*L + l, :), with L = weights.cols().
template <typename Scalar>
Var<Scalar> pool_segments(const Var<Scalar>& weights, const Var<Scalar>& x) {
  const Index n = weights.rows(), len = weights.cols(), c = x.cols();
  if (x.rows() != n * len) {
    throw DimensionError("pool_segments: weights " + detail::shape_str(weights) +
                         " do not tile rows of " + detail::shape_str(x));
  }
  Matrix<Scalar> out(n, c);
  for (Index i = 0; i < n; ++i) {
    out.row(i) = weights.value().row(i) * x.value().middleRows(i * len, len);
  }
  return make_op<Scalar>(std::move(out), {weights, x}, [len](Node<Scalar>& node) {
    auto& w = *node.parents[0];
    auto& feats = *node.parents[1];
    for (Index i = 0; i < node.grad.rows(); ++i) {
      auto block = feats.value.middleRows(i * len, len);
      if (w.requires_grad) w.grad.row(i).noalias() += node.grad.row(i) * block.transpose();
      if (feats.requires_grad) {
        feats.grad.middleRows(i * len, len).noalias() +=
            w.value.row(i).transpose() * node.grad.row(i);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  const auto [r, c] = detail::broadcast_shape(a.rows(), a.cols(), b.rows(), b.cols(), "add");
  Matrix<Scalar> out = detail::expand(a.value(), r, c) + detail::expand(b.value(), r, c);
  return make_op<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& n) {
    for (auto& p : n.parents) {
      if (p->requires_grad) p->grad += detail::reduce_to(n.grad, p->value.rows(), p->value.cols());
    }
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  const auto [r, c] = detail::broadcast_shape(a.rows(), a.cols(), b.rows(), b.cols(), "sub");
  Matrix<Scalar> out = detail::expand(a.value(), r, c) - detail::expand(b.value(), r, c);
  return make_op<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& n) {
    auto& lhs = *n.parents[0];
    auto& rhs = *n.parents[1];
    if (lhs.requires_grad) lhs.grad += detail::reduce_to(n.grad, lhs.value.rows(), lhs.value.cols());
    if (rhs.requires_grad) rhs.grad -= detail::reduce_to(n.grad, rhs.value.rows(), rhs.value.cols());
  });
}

/// Hadamard product.
template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  const auto [r, c] = detail::broadcast_shape(a.rows(), a.cols(), b.rows(), b.cols(), "mul");
  Matrix<Scalar> out =
      detail::expand(a.value(), r, c).cwiseProduct(detail::expand(b.value(), r, c));
  return make_op<Scalar>(std::move(out), {a, b}, [r = r, c = c](Node<Scalar>& n) {
    auto& lhs = *n.parents[0];
    auto& rhs = *n.parents[1];
    if (lhs.requires_grad) {
      Matrix<Scalar> g = n.grad.cwiseProduct(detail::expand(rhs.value, r, c));
      lhs.grad += detail::reduce_to(g, lhs.value.rows(), lhs.value.cols());
    }
    if (rhs.requires_grad) {
      Matrix<Scalar> g = n.grad.cwiseProduct(detail::expand(lhs.value, r, c));
      rhs.grad += detail::reduce_to(g, rhs.value.rows(), rhs.value.cols());
    }
  });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) { return sub(a, b); }

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  return make_op<Scalar>(a.value() * s, {a}, [s](Node<Scalar>& n) {
    n.parents[0]->grad += s * n.grad;
  });
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a) { return scale(a, Scalar(-1)); }

/// a + s for a constant scalar s.
template <typename Scalar>
Var<Scalar> shift(const Var<Scalar>& a, Scalar s) {
  return make_op<Scalar>((a.value().array() + s).matrix(), {a}, [](Node<Scalar>& n) {
    n.parents[0]->grad += n.grad;
  });
}

namespace detail {

// Builds a unary elementwise op from a forward map and a derivative expressed
// in terms of (input, output).
template <typename Scalar, typename Fwd, typename Deriv>
Var<Scalar> unary(const Var<Scalar>& a, Fwd fwd, Deriv deriv) {
  Matrix<Scalar> out = a.value().unaryExpr(fwd);
  return make_op<Scalar>(std::move(out), {a}, [deriv](Node<Scalar>& n) {
    auto& in = *n.parents[0];
    in.grad.array() += n.grad.array() * in.value.binaryExpr(n.value, deriv).array();
  });
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return x > 0 ? x : Scalar(0); },
      [](Scalar x, Scalar) { return x > 0 ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return detail::stable_sigmoid(x); },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Var<Scalar> log(const Var<Scalar>& a) {
  if (!(a.value().array() > Scalar(0)).all()) {
    throw DomainError("log: non-positive input (min " + std::to_string(a.value().minCoeff()) + ")");
  }
  return detail::unary(
      a, [](Scalar x) { return std::log(x); }, [](Scalar x, Scalar) { return Scalar(1) / x; });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return x * x; }, [](Scalar x, Scalar) { return Scalar(2) * x; });
}

/// Clamp into [lo, hi]; gradient is zero wherever the clamp is active.
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& a, Scalar lo, Scalar hi) {
  return detail::unary(
      a, [lo, hi](Scalar x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](Scalar x, Scalar) { return (x >= lo && x <= hi) ? Scalar(1) : Scalar(0); });
}

// ---------------------------------------------------------------------------
// Reductions. axis 0 collapses rows (-> 1 x cols), axis 1 collapses columns
// (-> rows x 1), kAllAxes collapses everything (-> 1 x 1).

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a, int axis = kAllAxes) {
  const Index r = a.rows(), c = a.cols();
  Matrix<Scalar> out;
  switch (axis) {
    case kAllAxes:
      out = Matrix<Scalar>::Constant(1, 1, a.value().sum());
      break;
    case 0:
      out = a.value().colwise().sum();
      break;
    case 1:
      out = a.value().rowwise().sum();
      break;
    default:
      throw DimensionError("sum: invalid axis " + std::to_string(axis));
  }
  return make_op<Scalar>(std::move(out), {a}, [r, c](Node<Scalar>& n) {
    auto& in = *n.parents[0];
    if (n.grad.size() == 1) {
      in.grad.array() += n.grad(0, 0);
    } else if (n.grad.rows() == 1) {
      in.grad += n.grad.replicate(r, 1);
    } else {
      in.grad += n.grad.replicate(1, c);
    }
  });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a, int axis = kAllAxes) {
  Index count = 0;
  switch (axis) {
    case kAllAxes: count = a.size(); break;
    case 0: count = a.rows(); break;
    case 1: count = a.cols(); break;
    default: throw DimensionError("mean: invalid axis " + std::to_string(axis));
  }
  return scale(sum(a, axis), Scalar(1) / static_cast<Scalar>(count));
}

// ---------------------------------------------------------------------------
// Reverse pass

namespace detail {

template <typename Scalar>
std::vector<Node<Scalar>*> topological_order(Node<Scalar>* root) {
  std::vector<Node<Scalar>*> order;
  std::unordered_set<Node<Scalar>*> visited;
  // (node, next parent index) frames for an iterative post-order DFS.
  std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<Scalar>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

/// Populates grad for every requires_grad node reachable from a scalar loss.
template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) {
    throw ContractError("backward: loss must be scalar, got " + detail::shape_str(loss));
  }
  if (!loss.requires_grad()) return;
  const auto order = detail::topological_order(loss.node().get());
  for (Node<Scalar>* n : order) {
    if (n->backward) {
      n->grad = Matrix<Scalar>::Zero(n->value.rows(), n->value.cols());
    } else {
      n->ensure_grad();
    }
  }
  loss.node()->grad(0, 0) += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

}  // namespace zsih::ad
