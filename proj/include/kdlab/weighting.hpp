#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string_view>

#include "kdlab/tensor.hpp"

namespace kdlab {

using SampleId = std::int64_t;
/// Per-sample sigma^2 learned by a PAD run, keyed by stable sample id.
using VarianceTable = std::map<SampleId, Scalar>;

// All weight functions read gaps as plain values: weights never carry
// gradient back into the student.

/// exp(-d_i/T) / sum_j exp(-d_j/T), max-shifted.
Array soft_exp_weights(const Array& d, Scalar temperature);
/// (1+d_i)^-alpha / sum_j (1+d_j)^-alpha.
Array soft_poly_weights(const Array& d, Scalar alpha);
/// exp(+d_i/T) / sum_j exp(+d_j/T).
Array hard_mining_weights(const Array& d, Scalar temperature);
/// Zero for the k largest gaps, one elsewhere. Among tied gaps the lower
/// batch index is kept.
Array hard_discard_weights(const Array& d, Index k);
/// 1/sigma_i^2 looked up by id, rescaled to mean 1 over the batch.
Array frozen_pad_weights(const VarianceTable& variances, std::span<const SampleId> batch_ids);

struct WarmupSchedule {
  Index warmup_epochs = 0;
  Scalar final_lambda = 1.0;
};

/// final_lambda * min(1, epoch / warmup_epochs); constant when warmup_epochs == 0.
Scalar lambda_at(const WarmupSchedule& schedule, Index epoch);

struct WeightingScheme {
  enum class Kind { equal, hard_mining, hard_discard, soft_exp, soft_poly, frozen_pad };

  Kind kind = Kind::equal;
  Scalar temperature = 1.0;  // hard_mining, soft_exp
  Scalar alpha = 1.0;        // soft_poly
  Index discard = 0;         // hard_discard
  std::shared_ptr<const VarianceTable> table;  // frozen_pad
};

std::string_view to_string(WeightingScheme::Kind kind);
WeightingScheme::Kind parse_scheme_kind(std::string_view name);

/// Weights for one batch on the scale used by the distillation loss: the
/// normalised schemes (soft_exp, soft_poly, hard_mining) are multiplied by N
/// so every scheme has mean weight 1 and lambda keeps its meaning.
Array batch_weights(const WeightingScheme& scheme, const Array& d, std::span<const SampleId> batch_ids);

}  // namespace kdlab
