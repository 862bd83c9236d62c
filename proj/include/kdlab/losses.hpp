#pragma once

#include <span>
#include <string_view>

#include "kdlab/tensor.hpp"

namespace kdlab {

enum class TargetKind { embedding, logits, feature_map, attention_map };

std::string_view to_string(TargetKind kind);
TargetKind parse_target_kind(std::string_view name);

/// Teacher-derived knowledge for a batch. The teacher side is detached on
/// construction so no gradient can reach teacher parameters.
struct DistillTarget {
  DistillTarget(TargetKind kind, const Tensor& teacher, Tensor student);

  TargetKind kind;
  Tensor teacher;
  Tensor student;
};

/// d_i = mean over the flattened target of (student - teacher)^2, shape [N].
Tensor gap(const DistillTarget& target);

/// (1/N) sum_i w_i d_i. Weights are constants; they must be non-negative.
Tensor weighted_distill_loss(const Tensor& d, const Array& w);

/// task + lambda * distill
Tensor total_loss(const Tensor& task, const Tensor& distill, Scalar lambda);

/// T^2 * mean_n KL(softmax(teacher/T) || softmax(student/T)).
Tensor hkd_loss(const Tensor& student_logits, const Tensor& teacher_logits, Scalar temperature);

/// [N, C, H, W] -> [N, H*W]: channel sum of squared activations, L2
/// normalised per sample. An all-zero map stays zero.
Tensor attention_map(const Tensor& feature_map);

/// Mean softmax cross-entropy of [N, C] logits against integer labels.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Batch-hard triplet loss on Euclidean distances. Anchors lacking a
/// positive or a negative in the batch are skipped; returns 0 if none remain.
Tensor triplet_loss(const Tensor& embedding, std::span<const int> labels, Scalar margin = 0.3);

}  // namespace kdlab
