#include "kdlab/model.hpp"

#include <cmath>
#include <set>

namespace kdlab {

namespace {

Tensor randn(Shape shape, std::mt19937_64& rng, Scalar stddev) {
  std::normal_distribution<Scalar> dist(0.0, stddev);
  Array values(numel(shape));
  for (Index i = 0; i < values.size(); ++i) values[i] = dist(rng);
  return Tensor(std::move(shape), std::move(values), true);
}

Tensor copy_param(const Tensor& t) { return Tensor(t.shape(), t.values(), t.requires_grad()); }

// Per-sample output shape of a layer, or ShapeError.
struct ShapeInfer {
  const Shape& in;

  Shape operator()(const layer::Dense& d) const {
    if (in.size() != 1 || in[0] != d.weight.dim(0)) {
      throw ShapeError("dense layer expects [" + std::to_string(d.weight.dim(0)) + "], got " + to_string(in));
    }
    return {d.weight.dim(1)};
  }
  Shape operator()(const layer::Relu&) const { return in; }
  Shape operator()(const layer::BatchNorm& b) const {
    if (in.empty() || in[0] != b.gamma.numel()) throw ShapeError("batchnorm channels mismatch for " + to_string(in));
    return in;
  }
  Shape operator()(const layer::Conv2d& c) const {
    if (in.size() != 3 || in[0] != c.weight.dim(1)) {
      throw ShapeError("conv2d expects " + std::to_string(c.weight.dim(1)) + " channels, got " + to_string(in));
    }
    const Index k = c.weight.dim(2);
    return {c.weight.dim(0), in[1] + 2 * c.padding - k + 1, in[2] + 2 * c.padding - k + 1};
  }
  Shape operator()(const layer::AvgPool& p) const {
    if (in.size() != 3 || in[1] % p.k != 0 || in[2] % p.k != 0) {
      throw ShapeError("avg pool window " + std::to_string(p.k) + " does not tile " + to_string(in));
    }
    return {in[0], in[1] / p.k, in[2] / p.k};
  }
  Shape operator()(const layer::Flatten&) const { return {numel(in)}; }
};

struct Apply {
  const Tensor& x;
  Mode mode;

  Tensor operator()(layer::Dense& d) const { return add(matmul(x, d.weight), d.bias); }
  Tensor operator()(layer::Relu&) const { return relu(x); }
  Tensor operator()(layer::BatchNorm& b) const {
    return batchnorm(x, b.gamma, b.beta, b.state, mode == Mode::train);
  }
  Tensor operator()(layer::Conv2d& c) const { return conv2d(x, c.weight, c.bias, c.padding); }
  Tensor operator()(layer::AvgPool& p) const { return avg_pool2d(x, p.k); }
  Tensor operator()(layer::Flatten&) const { return reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)}); }
};

struct CloneLayer {
  Layer operator()(const layer::Dense& d) const { return layer::Dense{copy_param(d.weight), copy_param(d.bias)}; }
  Layer operator()(const layer::Relu& r) const { return r; }
  Layer operator()(const layer::BatchNorm& b) const {
    return layer::BatchNorm{copy_param(b.gamma), copy_param(b.beta), b.state};
  }
  Layer operator()(const layer::Conv2d& c) const {
    return layer::Conv2d{copy_param(c.weight), copy_param(c.bias), c.padding};
  }
  Layer operator()(const layer::AvgPool& p) const { return p; }
  Layer operator()(const layer::Flatten& f) const { return f; }
};

void append_state(std::vector<NamedArray>& out, const std::string& prefix, const Layer& l) {
  if (const auto* d = std::get_if<layer::Dense>(&l)) {
    out.push_back({prefix + ".weight", d->weight.shape(), d->weight.values()});
    out.push_back({prefix + ".bias", d->bias.shape(), d->bias.values()});
  } else if (const auto* b = std::get_if<layer::BatchNorm>(&l)) {
    const Index c = b->gamma.numel();
    out.push_back({prefix + ".gamma", b->gamma.shape(), b->gamma.values()});
    out.push_back({prefix + ".beta", b->beta.shape(), b->beta.values()});
    out.push_back({prefix + ".running_mean", Shape{c}, b->state.running_mean});
    out.push_back({prefix + ".running_var", Shape{c}, b->state.running_var});
  } else if (const auto* c = std::get_if<layer::Conv2d>(&l)) {
    out.push_back({prefix + ".weight", c->weight.shape(), c->weight.values()});
    out.push_back({prefix + ".bias", c->bias.shape(), c->bias.values()});
  }
}

void assign(Array& dst, const Shape& dst_shape, const NamedArray& src) {
  if (src.shape != dst_shape) {
    throw ShapeError("state entry " + src.name + " has shape " + to_string(src.shape) + ", expected " +
                     to_string(dst_shape));
  }
  dst = src.values;
}

/// Copies a state list onto layers in the same order `append_state` produced.
void load_layer_state(std::vector<Layer>& layers, const std::vector<NamedArray>& state, const std::string& what) {
  std::vector<NamedArray> expected;
  for (std::size_t i = 0; i < layers.size(); ++i) append_state(expected, "layer" + std::to_string(i), layers[i]);
  if (expected.size() != state.size()) {
    throw ShapeError(what + " state has " + std::to_string(state.size()) + " entries, expected " +
                     std::to_string(expected.size()));
  }
  std::size_t k = 0;
  for (auto& l : layers) {
    auto next = [&](Array& dst, const Shape& shape) {
      if (state[k].name != expected[k].name) {
        throw ShapeError(what + " state entry " + state[k].name + " where " + expected[k].name + " was expected");
      }
      assign(dst, shape, state[k]);
      ++k;
    };
    if (auto* d = std::get_if<layer::Dense>(&l)) {
      next(d->weight.mutable_values(), d->weight.shape());
      next(d->bias.mutable_values(), d->bias.shape());
    } else if (auto* b = std::get_if<layer::BatchNorm>(&l)) {
      const Shape c{b->gamma.numel()};
      next(b->gamma.mutable_values(), b->gamma.shape());
      next(b->beta.mutable_values(), b->beta.shape());
      next(b->state.running_mean, c);
      next(b->state.running_var, c);
    } else if (auto* c = std::get_if<layer::Conv2d>(&l)) {
      next(c->weight.mutable_values(), c->weight.shape());
      next(c->bias.mutable_values(), c->bias.shape());
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

Network::Network(Shape sample_shape, std::vector<Layer> layers, std::size_t embedding_layer,
                 std::map<std::string, std::size_t> tap_layers)
    : sample_shape_(std::move(sample_shape)),
      layers_(std::move(layers)),
      embedding_layer_(embedding_layer),
      tap_layers_(std::move(tap_layers)) {
  if (layers_.empty() || !std::holds_alternative<layer::Dense>(layers_.back())) {
    throw ShapeError("network must end with a dense classifier");
  }
  if (embedding_layer_ + 1 >= layers_.size()) {
    throw ShapeError("embedding layer must precede the classifier");
  }
  for (const auto& [name, idx] : tap_layers_) {
    if (idx >= layers_.size()) throw ShapeError("tap " + name + " refers to a missing layer");
  }
  std::vector<Shape> shapes;
  Shape cur = sample_shape_;
  for (const Layer& l : layers_) {
    cur = std::visit(ShapeInfer{cur}, l);
    shapes.push_back(cur);
  }
  const Shape& emb = shapes[embedding_layer_];
  if (emb.size() != 1) throw ShapeError("embedding must be a vector, got " + to_string(emb));
  embedding_dim_ = emb[0];
  num_classes_ = shapes.back()[0];
  for (const auto& [name, idx] : tap_layers_) tap_shapes_[name] = shapes[idx];
}

Network Network::clone() const {
  std::vector<Layer> copy;
  copy.reserve(layers_.size());
  for (const Layer& l : layers_) copy.push_back(std::visit(CloneLayer{}, l));
  return Network(sample_shape_, std::move(copy), embedding_layer_, tap_layers_);
}

ForwardResult Network::forward(const Tensor& batch, Mode mode) {
  if (batch.rank() != static_cast<Index>(sample_shape_.size()) + 1 ||
      !std::equal(sample_shape_.begin(), sample_shape_.end(), batch.shape().begin() + 1) || batch.dim(0) < 1) {
    throw ShapeError("network input must be [N] + " + to_string(sample_shape_) + " with N >= 1, got " +
                     to_string(batch.shape()));
  }
  ForwardResult result;
  Tensor x = batch;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = std::visit(Apply{x, mode}, layers_[i]);
    if (i == embedding_layer_) result.embedding = x;
    for (const auto& [name, idx] : tap_layers_) {
      if (idx == i) result.taps[name] = x;
    }
  }
  result.logits = x;
  return result;
}

std::vector<Tensor> Network::parameters() const {
  std::vector<Tensor> out;
  for (const Layer& l : layers_) {
    if (const auto* d = std::get_if<layer::Dense>(&l)) {
      out.push_back(d->weight);
      out.push_back(d->bias);
    } else if (const auto* b = std::get_if<layer::BatchNorm>(&l)) {
      out.push_back(b->gamma);
      out.push_back(b->beta);
    } else if (const auto* c = std::get_if<layer::Conv2d>(&l)) {
      out.push_back(c->weight);
      out.push_back(c->bias);
    }
  }
  return out;
}

Index Network::parameter_count() const {
  Index n = 0;
  for (const Tensor& p : parameters()) n += p.numel();
  return n;
}

std::vector<NamedArray> Network::state() const {
  std::vector<NamedArray> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) append_state(out, "layer" + std::to_string(i), layers_[i]);
  return out;
}

void Network::load_state(const std::vector<NamedArray>& state) { load_layer_state(layers_, state, "network"); }

// ---------------------------------------------------------------------------

layer::Dense make_dense(Index in, Index out, std::mt19937_64& rng, Scalar stddev) {
  return layer::Dense{randn(Shape{in, out}, rng, stddev), Tensor::zeros(Shape{out}, true)};
}

Network make_mlp(const MlpSpec& spec, std::mt19937_64& rng) {
  if (spec.depth < 1 || spec.width < 1 || spec.embedding_dim < 1 || spec.num_classes < 1 || spec.input_dim < 1) {
    throw ShapeError("mlp extents must be positive");
  }
  std::vector<Layer> layers;
  std::map<std::string, std::size_t> taps;
  Index in = spec.input_dim;
  for (Index b = 1; b < spec.depth; ++b) {
    layers.emplace_back(make_dense(in, spec.width, rng, std::sqrt(2.0 / static_cast<Scalar>(in))));
    layers.emplace_back(layer::Relu{});
    taps["block" + std::to_string(b)] = layers.size() - 1;
    in = spec.width;
  }
  layers.emplace_back(make_dense(in, spec.embedding_dim, rng, std::sqrt(1.0 / static_cast<Scalar>(in))));
  const std::size_t embedding = layers.size() - 1;
  taps["embedding"] = embedding;
  layers.emplace_back(make_dense(spec.embedding_dim, spec.num_classes, rng,
                                 std::sqrt(1.0 / static_cast<Scalar>(spec.embedding_dim))));
  return Network(Shape{spec.input_dim}, std::move(layers), embedding, std::move(taps));
}

Network make_convnet(const ConvNetSpec& spec, std::mt19937_64& rng) {
  if (spec.height % 4 != 0 || spec.width % 4 != 0) throw ShapeError("convnet input extents must be divisible by 4");
  auto conv = [&](Index in, Index out) {
    const Scalar std = std::sqrt(2.0 / static_cast<Scalar>(in * 9));
    return layer::Conv2d{randn(Shape{out, in, 3, 3}, rng, std), Tensor::zeros(Shape{out}, true), 1};
  };
  const Index c1 = spec.base_channels, c2 = 2 * spec.base_channels;
  std::vector<Layer> layers;
  std::map<std::string, std::size_t> taps;
  layers.emplace_back(conv(spec.channels, c1));
  layers.emplace_back(layer::Relu{});
  layers.emplace_back(layer::AvgPool{2});
  taps["block1"] = layers.size() - 1;
  layers.emplace_back(conv(c1, c2));
  layers.emplace_back(layer::Relu{});
  layers.emplace_back(layer::AvgPool{2});
  taps["block2"] = layers.size() - 1;
  layers.emplace_back(layer::Flatten{});
  const Index flat = c2 * (spec.height / 4) * (spec.width / 4);
  layers.emplace_back(make_dense(flat, spec.embedding_dim, rng, std::sqrt(1.0 / static_cast<Scalar>(flat))));
  const std::size_t embedding = layers.size() - 1;
  taps["embedding"] = embedding;
  layers.emplace_back(make_dense(spec.embedding_dim, spec.num_classes, rng,
                                 std::sqrt(1.0 / static_cast<Scalar>(spec.embedding_dim))));
  return Network(Shape{spec.channels, spec.height, spec.width}, std::move(layers), embedding, std::move(taps));
}

// ---------------------------------------------------------------------------

VarianceHead::VarianceHead(Index embedding_dim, Index variance_dim, std::mt19937_64& rng, Scalar weight_std,
                           Scalar gamma_init)
    : embedding_dim_(embedding_dim),
      variance_dim_(variance_dim),
      projection_(weight_std > 0.0 ? make_dense(embedding_dim, variance_dim, rng, weight_std)
                                   : layer::Dense{Tensor::zeros(Shape{embedding_dim, variance_dim}, true),
                                                  Tensor::zeros(Shape{variance_dim}, true)}),
      normalizer_{Tensor::full(Shape{variance_dim}, gamma_init, true), Tensor::zeros(Shape{variance_dim}, true),
                  BatchNormState(variance_dim)} {
  if (embedding_dim < 1 || variance_dim < 1) throw ShapeError("variance head extents must be positive");
  for (const Tensor& p : parameters()) initial_.push_back(p.values());
}

bool VarianceHead::at_initialization() const {
  const auto params = parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(params[i].values() == initial_[i]).all()) return false;
  }
  return true;
}

std::vector<Tensor> VarianceHead::parameters() const {
  return {projection_.weight, projection_.bias, normalizer_.gamma, normalizer_.beta};
}

std::vector<NamedArray> VarianceHead::state() const {
  std::vector<NamedArray> out;
  append_state(out, "layer0", Layer{projection_});
  append_state(out, "layer1", Layer{normalizer_});
  return out;
}

void VarianceHead::load_state(const std::vector<NamedArray>& state) {
  std::vector<Layer> layers{projection_, normalizer_};
  load_layer_state(layers, state, "variance head");
  // Layers share parameter nodes with the head; only the BN state was copied.
  normalizer_.state = std::get<layer::BatchNorm>(layers[1]).state;
}

Tensor predict_log_variance(VarianceHead& head, const Tensor& embedding, Mode bn_mode) {
  if (!head.training_) throw std::logic_error("variance head exists only during training");
  if (embedding.rank() != 2 || embedding.dim(1) != head.embedding_dim_) {
    throw ShapeError("variance head expects [N, " + std::to_string(head.embedding_dim_) + "], got " +
                     to_string(embedding.shape()));
  }
  Tensor h = add(matmul(embedding, head.projection_.weight), head.projection_.bias);
  return batchnorm(h, head.normalizer_.gamma, head.normalizer_.beta, head.normalizer_.state, bn_mode == Mode::train);
}

Tensor clamped_log_variance(const Tensor& log_var) { return clamp(log_var, -kLogVarBound, kLogVarBound); }

Tensor sigma_squared(const Tensor& log_var) { return exp(clamped_log_variance(log_var)); }

// ---------------------------------------------------------------------------

Projector::Projector(Shape student_shape, Shape teacher_shape, std::mt19937_64& rng)
    : student_shape_(std::move(student_shape)), teacher_shape_(std::move(teacher_shape)) {
  if (student_shape_.size() == 1 && teacher_shape_.size() == 1) {
    auto d = make_dense(student_shape_[0], teacher_shape_[0], rng,
                        std::sqrt(1.0 / static_cast<Scalar>(student_shape_[0])));
    weight_ = d.weight;
    bias_ = d.bias;
  } else if (student_shape_.size() == 3 && teacher_shape_.size() == 3 && student_shape_[1] == teacher_shape_[1] &&
             student_shape_[2] == teacher_shape_[2]) {
    weight_ = randn(Shape{teacher_shape_[0], student_shape_[0], 1, 1}, rng,
                    std::sqrt(1.0 / static_cast<Scalar>(student_shape_[0])));
    bias_ = Tensor::zeros(Shape{teacher_shape_[0]}, true);
  } else {
    throw ShapeError("projector cannot map " + to_string(student_shape_) + " onto " + to_string(teacher_shape_));
  }
}

Tensor Projector::operator()(const Tensor& student) const {
  if (student_shape_.size() == 1) return add(matmul(student, weight_), bias_);
  return conv2d(student, weight_, bias_, 0);
}

std::vector<Tensor> Projector::parameters() const { return {weight_, bias_}; }

}  // namespace kdlab
