#include "kdlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace kdlab {

using detail::Node;

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index e : shape) n *= e;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : Tensor(Shape{}, Array::Zero(1)) {}

Tensor::Tensor(Shape shape, Array values, bool requires_grad) : node_(std::make_shared<Node>()) {
  for (Index e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
  }
  if (kdlab::numel(shape) != values.size()) {
    throw ShapeError("shape " + to_string(shape) + " holds " + std::to_string(kdlab::numel(shape)) +
                     " values, got " + std::to_string(values.size()));
  }
  if (!values.allFinite()) throw DomainError("tensor values must be finite");
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const Index n = kdlab::numel(shape);
  return Tensor(std::move(shape), Array::Zero(n), requires_grad);
}

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
  const Index n = kdlab::numel(shape);
  return Tensor(std::move(shape), Array::Constant(n, value), requires_grad);
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) {
  return Tensor(Shape{}, Array::Constant(1, value), requires_grad);
}

Tensor Tensor::of(Shape shape, std::initializer_list<Scalar> values, bool requires_grad) {
  Array a(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), a.data());
  return Tensor(std::move(shape), std::move(a), requires_grad);
}

Tensor Tensor::from_matrix(const RowMatrix& m, bool requires_grad) {
  Array a(m.size());
  MatrixMap(a.data(), m.rows(), m.cols()) = m;
  return Tensor(Shape{m.rows(), m.cols()}, std::move(a), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

Index Tensor::dim(Index axis) const {
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(axis)];
}

Index Tensor::numel() const { return node_->value.size(); }

const Array& Tensor::values() const { return node_->value; }

Array& Tensor::mutable_values() {
  if (!node_->is_leaf()) throw std::logic_error("only leaf tensors may be modified in place");
  return node_->value;
}

ConstMatrixMap Tensor::matrix() const {
  const Index rows = rank() == 0 ? 1 : shape()[0];
  const Index cols = rows == 0 ? 0 : numel() / rows;
  return ConstMatrixMap(node_->value.data(), rows, cols);
}

Scalar Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + to_string(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) throw std::logic_error("requires_grad can only be changed on leaves");
  node_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return node_->is_leaf(); }
bool Tensor::has_grad() const { return node_->grad.has_value(); }

const Array& Tensor::grad() const {
  if (!node_->grad) throw std::logic_error("tensor has no gradient");
  return *node_->grad;
}

void Tensor::zero_grad() { node_->grad.reset(); }

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value, false); }

// ---------------------------------------------------------------------------
// Tape and backward

Tape Tape::record(const Tensor& root) {
  Tape tape;
  if (!root.requires_grad()) return tape;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::vector<std::pair<const Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

std::vector<std::string> Tape::ops() const {
  std::vector<std::string> out;
  out.reserve(nodes_.size());
  for (const Node* n : nodes_) out.push_back(n->op);
  return out;
}

void backward(const Tensor& root) {
  if (root.numel() != 1) {
    throw ShapeError("backward needs a scalar root, got shape " + to_string(root.shape()));
  }
  if (!root.requires_grad()) throw std::logic_error("backward root was not produced on the tape");

  const Tape tape = Tape::record(root);
  std::unordered_map<const Node*, Array> pending;
  pending.emplace(root.node().get(), Array::Ones(1));

  const auto nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    // Tape holds const pointers; grads on leaves are the sanctioned mutation.
    Node* node = const_cast<Node*>(*it);
    auto found = pending.find(node);
    if (found == pending.end()) continue;
    Array g = std::move(found->second);
    pending.erase(found);

    if (node->is_leaf()) {
      if (node->grad) {
        *node->grad += g;
      } else {
        node->grad = std::move(g);
      }
      continue;
    }
    std::vector<Array> grads = node->backward(g);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const Node* in = node->inputs[i].get();
      if (!in->requires_grad || grads[i].size() == 0) continue;
      auto slot = pending.find(in);
      if (slot == pending.end()) {
        pending.emplace(in, std::move(grads[i]));
      } else {
        slot->second += grads[i];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

Tensor make_result(const char* op, Shape shape, Array value, std::initializer_list<Tensor> inputs,
                   detail::BackwardFn fn) {
  if (!value.allFinite()) throw DomainError(std::string(op) + " produced a non-finite value");
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (any) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

/// Sum an [outer * tail] array over its leading blocks, giving [tail].
Array reduce_leading(const Array& g, Index tail) {
  if (tail == 0) return Array(0);
  const Index outer = g.size() / tail;
  return ConstMatrixMap(g.data(), outer, tail).colwise().sum().transpose().array();
}

enum class BinaryKind { add, sub, mul, div };

Tensor binary(const char* op, BinaryKind kind, const Tensor& a, const Tensor& b) {
  const bool a_big = is_suffix(b.shape(), a.shape());
  const bool b_big = is_suffix(a.shape(), b.shape());
  if (!a_big && !b_big) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
  }
  const Shape out_shape = a_big ? a.shape() : b.shape();
  const Index n = numel(out_shape);
  const Index tail = a_big ? b.numel() : a.numel();
  const Index outer = tail == 0 ? 0 : n / tail;

  // Expand both operands to the output extent.
  auto expand = [&](const Tensor& t) -> Array {
    if (t.numel() == n) return t.values();
    return t.values().replicate(outer, 1);
  };
  const Array av = expand(a);
  const Array bv = expand(b);
  if (kind == BinaryKind::div && (bv == 0.0).any()) throw DomainError("div: division by zero");

  Array out;
  switch (kind) {
    case BinaryKind::add: out = av + bv; break;
    case BinaryKind::sub: out = av - bv; break;
    case BinaryKind::mul: out = av * bv; break;
    case BinaryKind::div: out = av / bv; break;
  }

  const Index an = a.numel();
  const Index bn = b.numel();
  auto fit = [tail](Array g, Index target) -> Array {
    return g.size() == target ? g : reduce_leading(g, tail);
  };
  return make_result(op, out_shape, std::move(out), {a, b},
                     [kind, av, bv, an, bn, fit](const Array& g) -> std::vector<Array> {
                       switch (kind) {
                         case BinaryKind::add: return {fit(g, an), fit(g, bn)};
                         case BinaryKind::sub: return {fit(g, an), fit(-g, bn)};
                         case BinaryKind::mul: return {fit(g * bv, an), fit(g * av, bn)};
                         case BinaryKind::div:
                           return {fit(g / bv, an), fit(-g * av / (bv * bv), bn)};
                       }
                       return {};
                     });
}

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  Array out = fwd(x.values());
  Array xv = x.values();
  Array yv = out;
  return make_result(op, x.shape(), std::move(out), {x},
                     [xv = std::move(xv), yv = std::move(yv), deriv](const Array& g) -> std::vector<Array> {
                       return {g * deriv(xv, yv)};
                     });
}

void require_rank(const char* op, const Tensor& x, Index rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(x.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Primitives

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Array out(m * n);
  MatrixMap(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  Array av = a.values(), bv = b.values();
  return make_result("matmul", Shape{m, n}, std::move(out), {a, b},
                     [av = std::move(av), bv = std::move(bv), m, k, n](const Array& g) -> std::vector<Array> {
                       ConstMatrixMap gm(g.data(), m, n);
                       ConstMatrixMap am(av.data(), m, k);
                       ConstMatrixMap bm(bv.data(), k, n);
                       Array ga(m * k), gb(k * n);
                       MatrixMap(ga.data(), m, k).noalias() = gm * bm.transpose();
                       MatrixMap(gb.data(), k, n).noalias() = am.transpose() * gm;
                       return {std::move(ga), std::move(gb)};
                     });
}

Tensor transpose(const Tensor& x) {
  require_rank("transpose", x, 2);
  const Index r = x.dim(0), c = x.dim(1);
  Array out(r * c);
  MatrixMap(out.data(), c, r) = x.matrix().transpose();
  return make_result("transpose", Shape{c, r}, std::move(out), {x}, [r, c](const Array& g) -> std::vector<Array> {
    Array gx(r * c);
    MatrixMap(gx.data(), r, c) = ConstMatrixMap(g.data(), c, r).transpose();
    return {std::move(gx)};
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinaryKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinaryKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinaryKind::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinaryKind::div, a, b); }

Tensor scale(const Tensor& x, Scalar factor) {
  return make_result("scale", x.shape(), x.values() * factor, {x},
                     [factor](const Array& g) -> std::vector<Array> { return {g * factor}; });
}

Tensor shift(const Tensor& x, Scalar offset) {
  return make_result("shift", x.shape(), x.values() + offset, {x},
                     [](const Array& g) -> std::vector<Array> { return {g}; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](const Array& v) -> Array { return v.exp(); },
      [](const Array&, const Array& y) -> Array { return y; });
}

Tensor log(const Tensor& x) {
  if ((x.values() <= 0.0).any()) throw DomainError("log: operand must be strictly positive");
  return unary(
      "log", x, [](const Array& v) -> Array { return v.log(); },
      [](const Array& v, const Array&) -> Array { return v.inverse(); });
}

Tensor sqrt(const Tensor& x) {
  if ((x.values() <= 0.0).any()) throw DomainError("sqrt: operand must be strictly positive");
  return unary(
      "sqrt", x, [](const Array& v) -> Array { return v.sqrt(); },
      [](const Array&, const Array& y) -> Array { return 0.5 / y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](const Array& v) -> Array { return v.max(0.0); },
      [](const Array& v, const Array&) -> Array { return (v > 0.0).cast<Scalar>(); });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](const Array& v) -> Array { return v.square(); },
      [](const Array& v, const Array&) -> Array { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, Scalar lo, Scalar hi) {
  if (!(lo <= hi)) throw DomainError("clamp: lower bound exceeds upper bound");
  return unary(
      "clamp", x, [lo, hi](const Array& v) -> Array { return v.max(lo).min(hi); },
      [lo, hi](const Array& v, const Array&) -> Array { return ((v >= lo) && (v <= hi)).cast<Scalar>(); });
}

namespace {

Index last_extent(const char* op, const Tensor& x) {
  if (x.rank() == 0) throw ShapeError(std::string(op) + ": needs rank >= 1");
  return x.shape().back();
}

}  // namespace

Tensor softmax(const Tensor& x) {
  const Index cols = last_extent("softmax", x);
  const Index rows = cols == 0 ? 0 : x.numel() / cols;
  Array out(x.numel());
  ConstMatrixMap in(x.values().data(), rows, cols);
  MatrixMap y(out.data(), rows, cols);
  y = (in.colwise() - in.rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  Array yv = out;
  return make_result("softmax", x.shape(), std::move(out), {x},
                     [yv = std::move(yv), rows, cols](const Array& g) -> std::vector<Array> {
                       ConstMatrixMap ym(yv.data(), rows, cols);
                       ConstMatrixMap gm(g.data(), rows, cols);
                       const Eigen::VectorXd dot = (ym.array() * gm.array()).rowwise().sum();
                       Array gx(rows * cols);
                       MatrixMap(gx.data(), rows, cols) = (ym.array() * (gm.colwise() - dot).array()).matrix();
                       return {std::move(gx)};
                     });
}

Tensor log_softmax(const Tensor& x) {
  const Index cols = last_extent("log_softmax", x);
  const Index rows = cols == 0 ? 0 : x.numel() / cols;
  Array out(x.numel());
  ConstMatrixMap in(x.values().data(), rows, cols);
  MatrixMap y(out.data(), rows, cols);
  const Eigen::VectorXd mx = in.rowwise().maxCoeff();
  y = in.colwise() - mx;
  const Eigen::VectorXd lse = y.array().exp().rowwise().sum().log().matrix();
  y.colwise() -= lse;
  Array yv = out;
  return make_result("log_softmax", x.shape(), std::move(out), {x},
                     [yv = std::move(yv), rows, cols](const Array& g) -> std::vector<Array> {
                       ConstMatrixMap ym(yv.data(), rows, cols);
                       ConstMatrixMap gm(g.data(), rows, cols);
                       const Eigen::VectorXd gs = gm.rowwise().sum();
                       Array gx(rows * cols);
                       MatrixMap(gx.data(), rows, cols) =
                           gm - (ym.array().exp().colwise() * gs.array()).matrix();
                       return {std::move(gx)};
                     });
}

Tensor sum(const Tensor& x) {
  const Index n = x.numel();
  return make_result("sum", Shape{}, Array::Constant(1, x.values().sum()), {x},
                     [n](const Array& g) -> std::vector<Array> { return {Array::Constant(n, g[0])}; });
}

Tensor mean(const Tensor& x) {
  const Index n = x.numel();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return make_result("mean", Shape{}, Array::Constant(1, x.values().mean()), {x},
                     [n](const Array& g) -> std::vector<Array> {
                       return {Array::Constant(n, g[0] / static_cast<Scalar>(n))};
                     });
}

namespace {

Tensor reduce_axis(const char* op, const Tensor& x, Index axis, Scalar factor) {
  if (axis < 0 || axis >= x.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                     to_string(x.shape()));
  }
  const auto& s = x.shape();
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i) outer *= s[i];
  for (Index i = axis + 1; i < x.rank(); ++i) inner *= s[i];
  const Index len = s[axis];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + axis);

  Array out = Array::Zero(outer * inner);
  const Array& v = x.values();
  for (Index o = 0; o < outer; ++o) {
    for (Index a = 0; a < len; ++a) {
      out.segment(o * inner, inner) += v.segment((o * len + a) * inner, inner);
    }
  }
  out *= factor;
  return make_result(op, std::move(out_shape), std::move(out), {x},
                     [outer, inner, len, factor](const Array& g) -> std::vector<Array> {
                       Array gx(outer * len * inner);
                       for (Index o = 0; o < outer; ++o) {
                         for (Index a = 0; a < len; ++a) {
                           gx.segment((o * len + a) * inner, inner) = g.segment(o * inner, inner) * factor;
                         }
                       }
                       return {std::move(gx)};
                     });
}

}  // namespace

Tensor sum_axis(const Tensor& x, Index axis) { return reduce_axis("sum_axis", x, axis, 1.0); }

Tensor mean_axis(const Tensor& x, Index axis) {
  const Index len = x.dim(axis);
  if (len == 0) throw ShapeError("mean_axis over an empty axis");
  return reduce_axis("mean_axis", x, axis, 1.0 / static_cast<Scalar>(len));
}

Tensor row_sum(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("row_sum needs rank >= 1");
  const Index n = x.dim(0);
  return sum_axis(reshape(x, Shape{n, n == 0 ? 0 : x.numel() / n}), 1);
}

Tensor row_mean(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("row_mean needs rank >= 1");
  const Index n = x.dim(0);
  return mean_axis(reshape(x, Shape{n, n == 0 ? 0 : x.numel() / n}), 1);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return make_result("reshape", std::move(shape), x.values(), {x},
                     [](const Array& g) -> std::vector<Array> { return {g}; });
}

Tensor broadcast(const Tensor& x, Shape shape) {
  if (!is_suffix(x.shape(), shape)) {
    throw ShapeError("broadcast: " + to_string(x.shape()) + " is not a trailing suffix of " + to_string(shape));
  }
  const Index tail = x.numel();
  const Index total = numel(shape);
  const Index outer = tail == 0 ? 0 : total / tail;
  return make_result("broadcast", std::move(shape), x.values().replicate(outer, 1), {x},
                     [tail](const Array& g) -> std::vector<Array> { return {reduce_leading(g, tail)}; });
}

Tensor row_scale(const Tensor& x, const Tensor& s) {
  if (x.rank() == 0 || s.rank() != 1 || s.dim(0) != x.dim(0)) {
    throw ShapeError("row_scale: scale " + to_string(s.shape()) + " does not match rows of " + to_string(x.shape()));
  }
  const Index rows = x.dim(0);
  const Index cols = rows == 0 ? 0 : x.numel() / rows;
  Array out(x.numel());
  MatrixMap(out.data(), rows, cols) = x.matrix().array().colwise() * s.values();
  Array xv = x.values(), sv = s.values();
  return make_result("row_scale", x.shape(), std::move(out), {x, s},
                     [xv = std::move(xv), sv = std::move(sv), rows, cols](const Array& g) -> std::vector<Array> {
                       ConstMatrixMap gm(g.data(), rows, cols);
                       ConstMatrixMap xm(xv.data(), rows, cols);
                       Array gx(rows * cols);
                       MatrixMap(gx.data(), rows, cols) = gm.array().colwise() * sv;
                       Array gs = (gm.array() * xm.array()).rowwise().sum();
                       return {std::move(gx), std::move(gs)};
                     });
}

Tensor normalize_rows(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("normalize_rows needs rank >= 1");
  const Index rows = x.dim(0);
  const Index cols = rows == 0 ? 0 : x.numel() / rows;
  const Array norms = x.matrix().rowwise().norm().array();
  Array out = Array::Zero(x.numel());
  MatrixMap ym(out.data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    if (norms[r] > 0.0) ym.row(r) = x.matrix().row(r) / norms[r];
  }
  Array yv = out;
  return make_result("normalize_rows", x.shape(), std::move(out), {x},
                     [yv = std::move(yv), norms, rows, cols](const Array& g) -> std::vector<Array> {
                       ConstMatrixMap gm(g.data(), rows, cols);
                       ConstMatrixMap y(yv.data(), rows, cols);
                       Array gx = Array::Zero(rows * cols);
                       MatrixMap gxm(gx.data(), rows, cols);
                       for (Index r = 0; r < rows; ++r) {
                         if (norms[r] <= 0.0) continue;
                         const Scalar proj = y.row(r).dot(gm.row(r));
                         gxm.row(r) = (gm.row(r) - proj * y.row(r)) / norms[r];
                       }
                       return {std::move(gx)};
                     });
}

Tensor gather_rows(const Tensor& x, std::span<const Index> rows) {
  if (x.rank() == 0) throw ShapeError("gather_rows needs rank >= 1");
  const Index n = x.dim(0);
  const Index cols = n == 0 ? 0 : x.numel() / n;
  const Index m = static_cast<Index>(rows.size());
  std::vector<Index> idx(rows.begin(), rows.end());
  Array out(m * cols);
  MatrixMap om(out.data(), m, cols);
  for (Index i = 0; i < m; ++i) {
    if (idx[i] < 0 || idx[i] >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range for " + to_string(x.shape()));
    }
    om.row(i) = x.matrix().row(idx[i]);
  }
  Shape shape = x.shape();
  shape[0] = m;
  return make_result("gather_rows", std::move(shape), std::move(out), {x},
                     [idx = std::move(idx), n, cols](const Array& g) -> std::vector<Array> {
                       Array gx = Array::Zero(n * cols);
                       MatrixMap gxm(gx.data(), n, cols);
                       ConstMatrixMap gm(g.data(), static_cast<Index>(idx.size()), cols);
                       for (std::size_t i = 0; i < idx.size(); ++i) gxm.row(idx[i]) += gm.row(static_cast<Index>(i));
                       return {std::move(gx)};
                     });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                 bool use_batch_stats) {
  if (x.rank() != 2 && x.rank() != 4) {
    throw ShapeError("batchnorm: expected [N, C] or [N, C, H, W], got " + to_string(x.shape()));
  }
  const Index n = x.dim(0), c = x.dim(1);
  const Index spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (gamma.numel() != c || beta.numel() != c || state.running_mean.size() != c) {
    throw ShapeError("batchnorm: parameters do not match " + std::to_string(c) + " channels");
  }
  const Index count = n * spatial;
  if (count == 0) throw ShapeError("batchnorm over an empty batch");

  // Gather per-channel views: element (s, ch, p) at (s * c + ch) * spatial + p.
  const Array& v = x.values();
  auto for_channel = [&](auto&& fn) {
    for (Index s = 0; s < n; ++s)
      for (Index ch = 0; ch < c; ++ch) fn(s, ch, (s * c + ch) * spatial);
  };

  Array mu(c), var(c);
  if (use_batch_stats) {
    mu.setZero();
    var.setZero();
    for_channel([&](Index, Index ch, Index off) { mu[ch] += v.segment(off, spatial).sum(); });
    mu /= static_cast<Scalar>(count);
    for_channel([&](Index, Index ch, Index off) { var[ch] += (v.segment(off, spatial) - mu[ch]).square().sum(); });
    var /= static_cast<Scalar>(count);
    const Scalar unbias = count > 1 ? static_cast<Scalar>(count) / static_cast<Scalar>(count - 1) : 1.0;
    state.running_mean = (1.0 - state.momentum) * state.running_mean + state.momentum * mu;
    state.running_var = (1.0 - state.momentum) * state.running_var + state.momentum * var * unbias;
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }
  const Array inv_std = (var + state.eps).rsqrt();

  Array xhat(x.numel()), out(x.numel());
  const Array& gv = gamma.values();
  const Array& bv = beta.values();
  for_channel([&](Index, Index ch, Index off) {
    xhat.segment(off, spatial) = (v.segment(off, spatial) - mu[ch]) * inv_std[ch];
    out.segment(off, spatial) = xhat.segment(off, spatial) * gv[ch] + bv[ch];
  });

  Array gamma_v = gv;
  return make_result(
      "batchnorm", x.shape(), std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std, gamma_v = std::move(gamma_v), n, c, spatial, count,
       use_batch_stats](const Array& g) -> std::vector<Array> {
        Array dgamma = Array::Zero(c), dbeta = Array::Zero(c);
        for (Index s = 0; s < n; ++s) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (s * c + ch) * spatial;
            dbeta[ch] += g.segment(off, spatial).sum();
            dgamma[ch] += (g.segment(off, spatial) * xhat.segment(off, spatial)).sum();
          }
        }
        Array dx(g.size());
        const Scalar m = static_cast<Scalar>(count);
        for (Index s = 0; s < n; ++s) {
          for (Index ch = 0; ch < c; ++ch) {
            const Index off = (s * c + ch) * spatial;
            const Scalar k = gamma_v[ch] * inv_std[ch];
            if (use_batch_stats) {
              dx.segment(off, spatial) =
                  k * (g.segment(off, spatial) - dbeta[ch] / m - xhat.segment(off, spatial) * dgamma[ch] / m);
            } else {
              dx.segment(off, spatial) = k * g.segment(off, spatial);
            }
          }
        }
        return {std::move(dx), std::move(dgamma), std::move(dbeta)};
      });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index padding) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", weight, 4);
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index o = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c || weight.dim(3) != k || bias.numel() != o) {
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " / bias " + to_string(bias.shape()) +
                     " incompatible with input " + to_string(x.shape()));
  }
  if (padding < 0) throw ShapeError("conv2d: negative padding");
  const Index ho = h + 2 * padding - k + 1, wo = w + 2 * padding - k + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: kernel larger than padded input " + to_string(x.shape()));
  const Index ckk = c * k * k, hw = ho * wo;

  // im2col per sample: cols[(ch, ky, kx), (oy, ox)].
  auto im2col = [=](const Scalar* img, RowMatrix& cols) {
    cols.setZero(ckk, hw);
    for (Index ch = 0; ch < c; ++ch)
      for (Index ky = 0; ky < k; ++ky)
        for (Index kx = 0; kx < k; ++kx) {
          const Index row = (ch * k + ky) * k + kx;
          for (Index oy = 0; oy < ho; ++oy) {
            const Index iy = oy + ky - padding;
            if (iy < 0 || iy >= h) continue;
            for (Index ox = 0; ox < wo; ++ox) {
              const Index ix = ox + kx - padding;
              if (ix < 0 || ix >= w) continue;
              cols(row, oy * wo + ox) = img[(ch * h + iy) * w + ix];
            }
          }
        }
  };

  ConstMatrixMap wm(weight.values().data(), o, ckk);
  Array out(n * o * hw);
  RowMatrix cols;
  for (Index s = 0; s < n; ++s) {
    im2col(x.values().data() + s * c * h * w, cols);
    MatrixMap om(out.data() + s * o * hw, o, hw);
    om.noalias() = wm * cols;
    om.colwise() += bias.values().matrix();
  }

  Array xv = x.values(), wv = weight.values();
  return make_result(
      "conv2d", Shape{n, o, ho, wo}, std::move(out), {x, weight, bias},
      [=, xv = std::move(xv), wv = std::move(wv)](const Array& g) -> std::vector<Array> {
        Array gx = Array::Zero(n * c * h * w), gw = Array::Zero(o * ckk), gb = Array::Zero(o);
        ConstMatrixMap wmat(wv.data(), o, ckk);
        MatrixMap gwm(gw.data(), o, ckk);
        RowMatrix cols, dcols;
        for (Index s = 0; s < n; ++s) {
          ConstMatrixMap gm(g.data() + s * o * hw, o, hw);
          im2col(xv.data() + s * c * h * w, cols);
          gwm.noalias() += gm * cols.transpose();
          gb += gm.rowwise().sum().array();
          dcols.noalias() = wmat.transpose() * gm;
          Scalar* gimg = gx.data() + s * c * h * w;
          for (Index ch = 0; ch < c; ++ch)
            for (Index ky = 0; ky < k; ++ky)
              for (Index kx = 0; kx < k; ++kx) {
                const Index row = (ch * k + ky) * k + kx;
                for (Index oy = 0; oy < ho; ++oy) {
                  const Index iy = oy + ky - padding;
                  if (iy < 0 || iy >= h) continue;
                  for (Index ox = 0; ox < wo; ++ox) {
                    const Index ix = ox + kx - padding;
                    if (ix < 0 || ix >= w) continue;
                    gimg[(ch * h + iy) * w + ix] += dcols(row, oy * wo + ox);
                  }
                }
              }
        }
        return {std::move(gx), std::move(gw), std::move(gb)};
      });
}

Tensor avg_pool2d(const Tensor& x, Index k) {
  require_rank("avg_pool2d", x, 4);
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k <= 0 || h % k != 0 || w % k != 0) {
    throw ShapeError("avg_pool2d: window " + std::to_string(k) + " does not tile " + to_string(x.shape()));
  }
  const Index ho = h / k, wo = w / k;
  const Scalar inv = 1.0 / static_cast<Scalar>(k * k);
  Array out = Array::Zero(n * c * ho * wo);
  const Array& v = x.values();
  for (Index p = 0; p < n * c; ++p)
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < w; ++xx) out[(p * ho + y / k) * wo + xx / k] += v[(p * h + y) * w + xx] * inv;
  return make_result("avg_pool2d", Shape{n, c, ho, wo}, std::move(out), {x},
                     [=](const Array& g) -> std::vector<Array> {
                       Array gx(n * c * h * w);
                       for (Index p = 0; p < n * c; ++p)
                         for (Index y = 0; y < h; ++y)
                           for (Index xx = 0; xx < w; ++xx)
                             gx[(p * h + y) * w + xx] = g[(p * ho + y / k) * wo + xx / k] * inv;
                       return {std::move(gx)};
                     });
}

// ---------------------------------------------------------------------------
// Optimiser

void sgd_step(std::span<const Tensor> params, Scalar lr, Scalar momentum, Scalar weight_decay) {
  if (!(lr > 0.0)) throw std::invalid_argument("sgd_step: learning rate must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("sgd_step: momentum must lie in [0, 1)");
  for (const Tensor& p : params) {
    if (!p.has_grad()) throw std::logic_error("sgd_step: parameter " + to_string(p.shape()) + " has no gradient");
  }
  for (const Tensor& p : params) {
    Node& node = *p.node();
    Array step = *node.grad;
    if (weight_decay != 0.0) step += weight_decay * node.value;
    if (node.velocity) {
      *node.velocity = momentum * *node.velocity + step;
    } else {
      node.velocity = step;
    }
    node.value -= lr * *node.velocity;
  }
}

void zero_grads(std::span<const Tensor> params) {
  for (const Tensor& p : params) p.node()->grad.reset();
}

}  // namespace kdlab
