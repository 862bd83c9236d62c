#pragma once

#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "kdlab/model.hpp"
#include "kdlab/weighting.hpp"

namespace kdlab {

/// How many log-variances the head predicts per sample.
enum class VarianceMode { per_dimension, per_sample };

std::string_view to_string(VarianceMode mode);
VarianceMode parse_variance_mode(std::string_view name);

/// s = log sigma^2, [N, D] per dimension or [N, 1] per sample.
struct VariancePrediction {
  Tensor log_var;

  Tensor sigma_sq() const { return sigma_squared(log_var); }
};

struct PadLossBreakdown {
  Tensor total;
  /// mean over N*D of residual^2 / sigma^2
  Tensor data_term;
  /// mean over N*D of log sigma^2
  Tensor reg_term;
  /// w_i * d_i with w_i = mean_k 1/sigma_ik^2 and d_i the L2 gap.
  Array per_sample_effect;
};

/// Heteroscedastic Gaussian negative log-likelihood of the teacher target,
/// constants and the factor 1/2 dropped, averaged over N*D elements:
///
///   total = (1/ND) sum_i sum_k [ (s_ik - t_ik)^2 / sigma_ik^2 + ln sigma_ik^2 ]
///
/// with ln sigma^2 = clamp(log_var, -10, 10). The teacher is detached.
/// Feature maps are flattened per sample.
PadLossBreakdown pad_loss(const Tensor& student, const Tensor& teacher, const VariancePrediction& var);

struct VarianceTableResult {
  VarianceTable table;
  /// The head never moved from its initial parameters.
  bool head_untrained = false;
};

/// sigma_i^2 = mean over D of sigma^2, with evaluation-mode statistics for
/// both the student trunk and the head's normaliser.
VarianceTableResult extract_variance_table(Network& student, VarianceHead& head, const Tensor& inputs,
                                           std::span<const SampleId> ids, Index batch_size = 256);

struct VarianceGapBin {
  Scalar low = 0.0;
  Scalar high = 0.0;
  Index count = 0;
  Scalar proportion = 0.0;
  Scalar mean_gap = 0.0;
  /// mean of (1/sigma^2) * d inside the bin
  Scalar mean_effect = 0.0;
};

struct VarianceGapReport {
  std::vector<VarianceGapBin> bins;
  Scalar spearman = 0.0;
  Index samples = 0;
};

/// Equal-width bins over the observed sigma^2 range of the samples present in
/// both tables, plus the rank correlation between sigma^2 and gap.
VarianceGapReport variance_gap_report(const VarianceTable& variances, const std::map<SampleId, Scalar>& gaps,
                                      Index bins);

}  // namespace kdlab
