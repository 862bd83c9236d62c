#pragma once

#include <map>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdlab {

enum class Mode { train, eval };

namespace layer {

/// y = x W + b, W stored [in, out].
struct Dense {
  Tensor weight;
  Tensor bias;
};
struct Relu {};
struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  BatchNormState state;
};
struct Conv2d {
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  Index padding = 0;
};
struct AvgPool {
  Index k = 2;
};
struct Flatten {};

}  // namespace layer

using Layer = std::variant<layer::Dense, layer::Relu, layer::BatchNorm, layer::Conv2d, layer::AvgPool, layer::Flatten>;

struct ForwardResult {
  Tensor logits;
  Tensor embedding;
  std::map<std::string, Tensor> taps;
};

/// Named state entry for checkpoints (parameters and running statistics).
struct NamedArray {
  std::string name;
  Shape shape;
  Array values;
};

/// Sequential network. The embedding is the output of `embedding_layer`; the
/// final layer must be the Dense classifier producing logits.
class Network {
 public:
  Network(Shape sample_shape, std::vector<Layer> layers, std::size_t embedding_layer,
          std::map<std::string, std::size_t> tap_layers);

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// Deep copy with independent parameters and running statistics.
  Network clone() const;

  ForwardResult forward(const Tensor& batch, Mode mode);

  std::vector<Tensor> parameters() const;
  Index parameter_count() const;
  const Shape& sample_shape() const { return sample_shape_; }
  Index embedding_dim() const { return embedding_dim_; }
  Index num_classes() const { return num_classes_; }
  /// Per-sample shape of every declared tap.
  const std::map<std::string, Shape>& tap_shapes() const { return tap_shapes_; }
  const std::vector<Layer>& layers() const { return layers_; }

  std::vector<NamedArray> state() const;
  void load_state(const std::vector<NamedArray>& state);

 private:
  Shape sample_shape_;
  std::vector<Layer> layers_;
  std::size_t embedding_layer_;
  std::map<std::string, std::size_t> tap_layers_;
  std::map<std::string, Shape> tap_shapes_;
  Index embedding_dim_ = 0;
  Index num_classes_ = 0;
};

struct MlpSpec {
  Index input_dim = 2;
  Index width = 64;
  /// Dense layers in the trunk, the embedding layer included.
  Index depth = 4;
  Index embedding_dim = 32;
  Index num_classes = 2;
};

/// dense-relu blocks ("block1".."block{depth-1}" taps), a linear embedding
/// layer ("embedding" tap) and a dense classifier.
Network make_mlp(const MlpSpec& spec, std::mt19937_64& rng);

struct ConvNetSpec {
  Index channels = 1;
  Index height = 28;
  Index width = 28;
  /// Channels of the first conv block; the second block doubles it.
  Index base_channels = 8;
  Index embedding_dim = 32;
  Index num_classes = 10;
};

/// Two conv-relu-pool blocks ("block1", "block2" taps), flatten, linear
/// embedding, dense classifier.
Network make_convnet(const ConvNetSpec& spec, std::mt19937_64& rng);

layer::Dense make_dense(Index in, Index out, std::mt19937_64& rng, Scalar stddev);

/// Train-only branch: dense projection followed by batch normalisation,
/// producing s = log sigma^2 per sample and dimension.
class VarianceHead {
 public:
  VarianceHead(Index embedding_dim, Index variance_dim, std::mt19937_64& rng, Scalar weight_std = 0.01,
               Scalar gamma_init = 1.0);

  VarianceHead(VarianceHead&&) noexcept = default;
  VarianceHead& operator=(VarianceHead&&) noexcept = default;

  Index embedding_dim() const { return embedding_dim_; }
  Index variance_dim() const { return variance_dim_; }
  bool training() const { return training_; }
  /// Marks the head as detached from training; later predictions are rejected.
  void set_training(bool flag) { training_ = flag; }

  layer::Dense& projection() { return projection_; }
  layer::BatchNorm& normalizer() { return normalizer_; }
  std::vector<Tensor> parameters() const;
  std::vector<NamedArray> state() const;
  void load_state(const std::vector<NamedArray>& state);
  /// True while every parameter still holds its initial value.
  bool at_initialization() const;

  friend Tensor predict_log_variance(VarianceHead& head, const Tensor& embedding, Mode bn_mode);

 private:
  Index embedding_dim_;
  Index variance_dim_;
  layer::Dense projection_;
  layer::BatchNorm normalizer_;
  std::vector<Array> initial_;
  bool training_ = true;
};

/// s of shape [N, variance_dim]. `bn_mode` selects batch or running BN
/// statistics; a head no longer in training rejects the call.
Tensor predict_log_variance(VarianceHead& head, const Tensor& embedding, Mode bn_mode = Mode::train);

/// sigma^2 = exp(clamp(s, -10, 10)).
inline constexpr Scalar kLogVarBound = 10.0;
Tensor clamped_log_variance(const Tensor& log_var);
Tensor sigma_squared(const Tensor& log_var);

/// Maps student features onto the teacher's extent: dense for [N, D],
/// 1x1 convolution for [N, C, H, W].
class Projector {
 public:
  Projector(Shape student_shape, Shape teacher_shape, std::mt19937_64& rng);

  Tensor operator()(const Tensor& student) const;
  std::vector<Tensor> parameters() const;
  const Shape& output_shape() const { return teacher_shape_; }

 private:
  Shape student_shape_;
  Shape teacher_shape_;
  Tensor weight_;
  Tensor bias_;
};

}  // namespace kdlab
