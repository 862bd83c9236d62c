#include "kdlab/weighting.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

namespace kdlab {

namespace {

void require_batch(const char* what, const Array& d) {
  if (d.size() < 1) throw std::invalid_argument(std::string(what) + ": empty batch");
  if (!d.allFinite()) throw DomainError(std::string(what) + ": non-finite gap");
}

Array normalized_exp(const Array& logits) {
  Array w = (logits - logits.maxCoeff()).exp();
  return w / w.sum();
}

}  // namespace

Array soft_exp_weights(const Array& d, Scalar temperature) {
  require_batch("soft_exp_weights", d);
  if (!(temperature > 0.0)) throw DomainError("soft_exp_weights: T must be positive");
  return normalized_exp(-d / temperature);
}

Array soft_poly_weights(const Array& d, Scalar alpha) {
  require_batch("soft_poly_weights", d);
  if (!(alpha > 0.0)) throw DomainError("soft_poly_weights: alpha must be positive");
  if ((d < 0.0).any()) throw DomainError("soft_poly_weights: gaps must be non-negative");
  // Evaluate in log space: -alpha * log1p(d), then normalise like soft_exp.
  return normalized_exp(-alpha * d.log1p());
}

Array hard_mining_weights(const Array& d, Scalar temperature) {
  require_batch("hard_mining_weights", d);
  if (!(temperature > 0.0)) throw DomainError("hard_mining_weights: T must be positive");
  return normalized_exp(d / temperature);
}

Array hard_discard_weights(const Array& d, Index k) {
  require_batch("hard_discard_weights", d);
  if (k < 0 || k >= d.size()) {
    throw std::invalid_argument("hard_discard_weights: k=" + std::to_string(k) + " must lie in [0, " +
                                std::to_string(d.size()) + ")");
  }
  std::vector<Index> order(static_cast<std::size_t>(d.size()));
  std::iota(order.begin(), order.end(), Index{0});
  // Largest gap first; among equal gaps the higher index is dropped first.
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
    if (d[a] != d[b]) return d[a] > d[b];
    return a > b;
  });
  Array w = Array::Ones(d.size());
  for (Index i = 0; i < k; ++i) w[order[static_cast<std::size_t>(i)]] = 0.0;
  return w;
}

Array frozen_pad_weights(const VarianceTable& variances, std::span<const SampleId> batch_ids) {
  if (batch_ids.empty()) throw std::invalid_argument("frozen_pad_weights: empty batch");
  Array w(static_cast<Index>(batch_ids.size()));
  for (std::size_t i = 0; i < batch_ids.size(); ++i) {
    const auto it = variances.find(batch_ids[i]);
    if (it == variances.end()) {
      throw std::out_of_range("frozen_pad_weights: sample id " + std::to_string(batch_ids[i]) +
                              " missing from variance table");
    }
    if (!(it->second > 0.0)) throw DomainError("frozen_pad_weights: sigma^2 must be positive");
    w[static_cast<Index>(i)] = 1.0 / it->second;
  }
  return w / w.mean();
}

Scalar lambda_at(const WarmupSchedule& schedule, Index epoch) {
  if (epoch < 0) throw std::invalid_argument("lambda_at: negative epoch");
  if (schedule.warmup_epochs <= 0) return schedule.final_lambda;
  const Scalar ramp =
      std::min<Scalar>(1.0, static_cast<Scalar>(epoch) / static_cast<Scalar>(schedule.warmup_epochs));
  return schedule.final_lambda * ramp;
}

std::string_view to_string(WeightingScheme::Kind kind) {
  using K = WeightingScheme::Kind;
  switch (kind) {
    case K::equal: return "equal";
    case K::hard_mining: return "hard_mining";
    case K::hard_discard: return "hard_discard";
    case K::soft_exp: return "soft_exp";
    case K::soft_poly: return "soft_poly";
    case K::frozen_pad: return "frozen_pad";
  }
  return "?";
}

WeightingScheme::Kind parse_scheme_kind(std::string_view name) {
  using K = WeightingScheme::Kind;
  for (K k : {K::equal, K::hard_mining, K::hard_discard, K::soft_exp, K::soft_poly, K::frozen_pad}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown weighting scheme '" + std::string(name) + "'");
}

Array batch_weights(const WeightingScheme& scheme, const Array& d, std::span<const SampleId> batch_ids) {
  using K = WeightingScheme::Kind;
  const auto n = static_cast<Scalar>(d.size());
  switch (scheme.kind) {
    case K::equal: return Array::Ones(d.size());
    case K::hard_mining: return n * hard_mining_weights(d, scheme.temperature);
    // A short trailing batch keeps at least one sample.
    case K::hard_discard: return hard_discard_weights(d, std::min(scheme.discard, d.size() - 1));
    case K::soft_exp: return n * soft_exp_weights(d, scheme.temperature);
    case K::soft_poly: return n * soft_poly_weights(d, scheme.alpha);
    case K::frozen_pad:
      if (!scheme.table) throw ConfigError("frozen_pad scheme has no variance table");
      return frozen_pad_weights(*scheme.table, batch_ids);
  }
  return Array::Ones(d.size());
}

}  // namespace kdlab
