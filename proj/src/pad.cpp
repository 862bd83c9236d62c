#include "kdlab/pad.hpp"

#include <algorithm>
#include <string>

#include "kdlab/stats.hpp"

namespace kdlab {

std::string_view to_string(VarianceMode mode) {
  return mode == VarianceMode::per_dimension ? "per_dimension" : "per_sample";
}

VarianceMode parse_variance_mode(std::string_view name) {
  if (name == "per_dimension") return VarianceMode::per_dimension;
  if (name == "per_sample") return VarianceMode::per_sample;
  throw ConfigError("unknown variance mode '" + std::string(name) + "'");
}

namespace {

Tensor flatten_batch(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("pad_loss needs [N, ...] inputs, got " + to_string(x.shape()));
  return x.rank() == 2 ? x : reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

}  // namespace

PadLossBreakdown pad_loss(const Tensor& student, const Tensor& teacher, const VariancePrediction& var) {
  if (student.shape() != teacher.shape()) {
    throw ShapeError("pad_loss: student " + to_string(student.shape()) + " vs teacher " + to_string(teacher.shape()));
  }
  const Tensor s = flatten_batch(student);
  const Tensor t = flatten_batch(teacher.detach());
  const Index n = s.dim(0), d = s.dim(1);
  const Tensor& lv = var.log_var;
  const bool per_sample = lv.rank() == 2 && lv.dim(0) == n && lv.dim(1) == 1 && d != 1;
  if (!(lv.rank() == 2 && lv.dim(0) == n && (lv.dim(1) == d || lv.dim(1) == 1))) {
    throw ShapeError("pad_loss: log variance " + to_string(lv.shape()) + " does not match target [" +
                     std::to_string(n) + ", " + std::to_string(d) + "]");
  }

  const Tensor residual_sq = square(sub(s, t));
  const Tensor log_sigma_sq = clamped_log_variance(lv);
  PadLossBreakdown out;
  if (per_sample) {
    const Tensor ls = reshape(log_sigma_sq, Shape{n});
    out.data_term = mean(row_scale(residual_sq, exp(scale(ls, -1.0))));
    // Each sample's ln sigma^2 repeats over D elements; the 1/(ND) mean is
    // therefore the plain mean over samples.
    out.reg_term = mean(ls);
  } else {
    out.data_term = mean(mul(residual_sq, exp(scale(log_sigma_sq, -1.0))));
    out.reg_term = mean(log_sigma_sq);
  }
  out.total = add(out.data_term, out.reg_term);

  const Array gaps = residual_sq.matrix().rowwise().mean().array();
  const RowMatrix inv_var = (-log_sigma_sq.matrix().array()).exp().matrix();
  const Array weights = inv_var.rowwise().mean().array();
  out.per_sample_effect = weights * gaps;
  return out;
}

VarianceTableResult extract_variance_table(Network& student, VarianceHead& head, const Tensor& inputs,
                                           std::span<const SampleId> ids, Index batch_size) {
  if (inputs.rank() < 1 || inputs.dim(0) != static_cast<Index>(ids.size())) {
    throw ShapeError("extract_variance_table: " + std::to_string(ids.size()) + " ids for inputs " +
                     to_string(inputs.shape()));
  }
  if (batch_size < 1) throw std::invalid_argument("extract_variance_table: batch size must be positive");
  VarianceTableResult result;
  result.head_untrained = head.at_initialization();
  const Index n = inputs.dim(0);
  const Index row = n == 0 ? 0 : inputs.numel() / n;
  for (Index start = 0; start < n; start += batch_size) {
    const Index m = std::min(batch_size, n - start);
    Shape shape = inputs.shape();
    shape[0] = m;
    const Tensor batch(shape, inputs.values().segment(start * row, m * row));
    const ForwardResult fwd = student.forward(batch, Mode::eval);
    const Tensor sigma = sigma_squared(predict_log_variance(head, fwd.embedding.detach(), Mode::eval));
    const Array per_sample = sigma.matrix().rowwise().mean().array();
    for (Index i = 0; i < m; ++i) {
      if (!result.table.emplace(ids[static_cast<std::size_t>(start + i)], per_sample[i]).second) {
        throw std::invalid_argument("extract_variance_table: duplicate sample id");
      }
    }
  }
  return result;
}

VarianceGapReport variance_gap_report(const VarianceTable& variances, const std::map<SampleId, Scalar>& gaps,
                                      Index bins) {
  if (bins < 2) throw std::invalid_argument("variance_gap_report: need at least two bins");
  std::vector<Scalar> var, gap;
  for (const auto& [id, v] : variances) {
    const auto it = gaps.find(id);
    if (it == gaps.end()) continue;
    var.push_back(v);
    gap.push_back(it->second);
  }
  if (var.empty()) throw std::invalid_argument("variance_gap_report: tables share no sample ids");

  VarianceGapReport report;
  report.samples = static_cast<Index>(var.size());
  report.spearman = var.size() >= 2 ? stats::spearman(var, gap) : 0.0;

  const Scalar lo = *std::min_element(var.begin(), var.end());
  const Scalar hi = *std::max_element(var.begin(), var.end());
  const Scalar width = (hi - lo) / static_cast<Scalar>(bins);
  report.bins.resize(static_cast<std::size_t>(bins));
  for (Index b = 0; b < bins; ++b) {
    auto& bin = report.bins[static_cast<std::size_t>(b)];
    bin.low = lo + width * static_cast<Scalar>(b);
    bin.high = b + 1 == bins ? hi : lo + width * static_cast<Scalar>(b + 1);
  }
  for (std::size_t i = 0; i < var.size(); ++i) {
    Index b = width > 0.0 ? static_cast<Index>((var[i] - lo) / width) : 0;
    b = std::clamp<Index>(b, 0, bins - 1);
    auto& bin = report.bins[static_cast<std::size_t>(b)];
    ++bin.count;
    bin.mean_gap += gap[i];
    bin.mean_effect += gap[i] / var[i];
  }
  const auto total = static_cast<Scalar>(var.size());
  for (auto& bin : report.bins) {
    bin.proportion = static_cast<Scalar>(bin.count) / total;
    if (bin.count > 0) {
      bin.mean_gap /= static_cast<Scalar>(bin.count);
      bin.mean_effect /= static_cast<Scalar>(bin.count);
    }
  }
  return report;
}

}  // namespace kdlab
