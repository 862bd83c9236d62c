#include "kdlab/losses.hpp"

#include <limits>
#include <string>

namespace kdlab {

std::string_view to_string(TargetKind kind) {
  switch (kind) {
    case TargetKind::embedding: return "embedding";
    case TargetKind::logits: return "logits";
    case TargetKind::feature_map: return "feature_map";
    case TargetKind::attention_map: return "attention_map";
  }
  return "?";
}

TargetKind parse_target_kind(std::string_view name) {
  if (name == "embedding") return TargetKind::embedding;
  if (name == "logits") return TargetKind::logits;
  if (name == "feature_map") return TargetKind::feature_map;
  if (name == "attention_map") return TargetKind::attention_map;
  throw ConfigError("unknown distillation target kind '" + std::string(name) + "'");
}

DistillTarget::DistillTarget(TargetKind k, const Tensor& t, Tensor s)
    : kind(k), teacher(t.detach()), student(std::move(s)) {
  if (teacher.shape() != student.shape()) {
    throw ShapeError("distill target: student " + to_string(student.shape()) + " vs teacher " +
                     to_string(teacher.shape()));
  }
  if (student.rank() < 2) throw ShapeError("distill target needs a leading batch axis");
}

Tensor gap(const DistillTarget& target) { return row_mean(square(sub(target.student, target.teacher))); }

Tensor weighted_distill_loss(const Tensor& d, const Array& w) {
  if (d.rank() != 1 || w.size() != d.numel()) {
    throw ShapeError("weighted_distill_loss: " + std::to_string(w.size()) + " weights for gaps " +
                     to_string(d.shape()));
  }
  if ((w < 0.0).any()) throw DomainError("weighted_distill_loss: negative weight");
  return mean(mul(d, Tensor(Shape{w.size()}, w)));
}

Tensor total_loss(const Tensor& task, const Tensor& distill, Scalar lambda) {
  if (lambda < 0.0) throw DomainError("total_loss: lambda must be non-negative");
  return add(task, scale(distill, lambda));
}

Tensor hkd_loss(const Tensor& student_logits, const Tensor& teacher_logits, Scalar temperature) {
  if (!(temperature > 0.0)) throw DomainError("hkd_loss: temperature must be positive");
  if (student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 2) {
    throw ShapeError("hkd_loss: logits " + to_string(student_logits.shape()) + " vs " +
                     to_string(teacher_logits.shape()));
  }
  const Scalar inv_t = 1.0 / temperature;
  const Tensor log_pt = log_softmax(scale(teacher_logits.detach(), inv_t));
  const Tensor pt = exp(log_pt);
  const Tensor log_ps = log_softmax(scale(student_logits, inv_t));
  const Tensor kl = row_sum(mul(pt, sub(log_pt, log_ps)));
  return scale(mean(kl), temperature * temperature);
}

Tensor attention_map(const Tensor& feature_map) {
  if (feature_map.rank() != 4) throw ShapeError("attention_map expects [N, C, H, W], got " + to_string(feature_map.shape()));
  const Index n = feature_map.dim(0);
  const Tensor energy = sum_axis(square(feature_map), 1);
  return normalize_rows(reshape(energy, Shape{n, feature_map.dim(2) * feature_map.dim(3)}));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || static_cast<Index>(labels.size()) != logits.dim(0)) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(logits.shape()));
  }
  const Index n = logits.dim(0), c = logits.dim(1);
  Array onehot = Array::Zero(n * c);
  for (Index i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c) throw ShapeError("cross_entropy: label out of range");
    onehot[i * c + labels[i]] = 1.0;
  }
  return scale(mean(row_sum(mul(log_softmax(logits), Tensor(Shape{n, c}, std::move(onehot))))), -1.0);
}

Tensor triplet_loss(const Tensor& embedding, std::span<const int> labels, Scalar margin) {
  if (embedding.rank() != 2 || static_cast<Index>(labels.size()) != embedding.dim(0)) {
    throw ShapeError("triplet_loss: labels do not match embedding " + to_string(embedding.shape()));
  }
  const Index n = embedding.dim(0);
  const auto e = embedding.matrix();
  RowMatrix dist(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) dist(i, j) = (e.row(i) - e.row(j)).squaredNorm();

  std::vector<Index> anchors, positives, negatives;
  for (Index i = 0; i < n; ++i) {
    Index pos = -1, neg = -1;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      if (labels[j] == labels[i]) {
        if (pos < 0 || dist(i, j) > dist(i, pos)) pos = j;
      } else if (neg < 0 || dist(i, j) < dist(i, neg)) {
        neg = j;
      }
    }
    if (pos >= 0 && neg >= 0) {
      anchors.push_back(i);
      positives.push_back(pos);
      negatives.push_back(neg);
    }
  }
  if (anchors.empty()) return scale(sum(embedding), 0.0);

  const Tensor a = gather_rows(embedding, anchors);
  auto distance = [&](const std::vector<Index>& other) {
    return sqrt(shift(row_sum(square(sub(a, gather_rows(embedding, other)))), 1e-12));
  };
  return mean(relu(shift(sub(distance(positives), distance(negatives)), margin)));
}

}  // namespace kdlab
