#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdlab/error.hpp"

namespace kdlab {

using Scalar = double;
using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);

namespace detail {

/// Gradient of the output with respect to every recorded input, in order.
/// An empty array means "no contribution".
using BackwardFn = std::function<std::vector<Array>(const Array& output_grad)>;

struct Node {
  std::string op = "leaf";
  Shape shape;
  Array value;
  bool requires_grad = false;
  std::optional<Array> grad;
  std::optional<Array> velocity;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return !backward; }
};

}  // namespace detail

/// Dense row-major tensor of doubles participating in reverse-mode
/// differentiation. Copies share the underlying node.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, Array values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor scalar(Scalar value, bool requires_grad = false);
  static Tensor of(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false);
  static Tensor from_matrix(const RowMatrix& m, bool requires_grad = false);

  const Shape& shape() const;
  Index rank() const { return static_cast<Index>(shape().size()); }
  Index dim(Index axis) const;
  Index numel() const;
  bool defined() const { return node_ != nullptr; }

  const Array& values() const;
  /// Leaves only; parameters are the one place values change in place.
  Array& mutable_values();
  /// [shape[0], numel / shape[0]] view (1x1 for rank 0).
  ConstMatrixMap matrix() const;
  Scalar item() const;
  Scalar operator[](Index flat) const { return values()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  const Array& grad() const;
  void zero_grad();

  /// Same values, cut from the tape.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered record of the operations reachable from a root.
class Tape {
 public:
  static Tape record(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  std::span<const detail::Node* const> nodes() const { return nodes_; }
  std::vector<std::string> ops() const;

 private:
  std::vector<const detail::Node*> nodes_;
};

/// Accumulates d(root)/d(leaf) into every requires_grad leaf. Root must be
/// a single-element tensor produced on the tape.
void backward(const Tensor& root);

// Primitives. Binary elementwise ops accept equal shapes or one operand whose
// shape is a trailing suffix of the other's (leading-dimension broadcast).

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Scalar factor);
Tensor shift(const Tensor& x, Scalar offset);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp(const Tensor& x, Scalar lo, Scalar hi);
/// Row-wise over the last axis.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, Index axis);
Tensor mean_axis(const Tensor& x, Index axis);
/// Reduce everything but the leading axis: [N, ...] -> [N].
Tensor row_sum(const Tensor& x);
Tensor row_mean(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor broadcast(const Tensor& x, Shape shape);
/// out[i, ...] = x[i, ...] * s[i]
Tensor row_scale(const Tensor& x, const Tensor& s);
/// Per-sample L2 normalisation of [N, ...]; an all-zero row maps to zeros.
Tensor normalize_rows(const Tensor& x);
Tensor gather_rows(const Tensor& x, std::span<const Index> rows);

/// Running statistics of one batch-normalisation layer.
struct BatchNormState {
  Array running_mean;
  Array running_var;
  Scalar momentum = 0.1;
  Scalar eps = 1e-5;

  explicit BatchNormState(Index channels = 0)
      : running_mean(Array::Zero(channels)), running_var(Array::Ones(channels)) {}
};

/// Normalises [N, C] or [N, C, H, W] per channel. With batch statistics the
/// running estimates in `state` are updated; otherwise they are used as is.
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                 bool use_batch_stats);

/// Stride-1 convolution, x [N, C, H, W], weight [O, C, K, K], bias [O].
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Index padding);
/// Non-overlapping k x k average pooling.
Tensor avg_pool2d(const Tensor& x, Index k);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, Scalar c) { return scale(a, c); }
inline Tensor operator*(Scalar c, const Tensor& a) { return scale(a, c); }
inline Tensor operator+(const Tensor& a, Scalar c) { return shift(a, c); }
inline Tensor operator-(const Tensor& a, Scalar c) { return shift(a, -c); }
inline Tensor operator-(const Tensor& a) { return scale(a, -1.0); }

/// Classical momentum SGD: v <- momentum * v + (g + weight_decay * p),
/// p <- p - lr * v. Velocity lives on the parameter and persists.
void sgd_step(std::span<const Tensor> params, Scalar lr, Scalar momentum, Scalar weight_decay = 0.0);
void zero_grads(std::span<const Tensor> params);

}  // namespace kdlab
