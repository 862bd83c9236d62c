#include "kdlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace kdlab::stats {

Array average_ranks(std::span<const Scalar> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  Array ranks(static_cast<Index>(n));
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const Scalar avg = 0.5 * static_cast<Scalar>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[static_cast<Index>(order[k])] = avg;
    i = j + 1;
  }
  return ranks;
}

Scalar pearson(std::span<const Scalar> x, std::span<const Scalar> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("pearson: need two equal-length samples of size >= 2");
  Eigen::Map<const Array> xa(x.data(), static_cast<Index>(x.size()));
  Eigen::Map<const Array> ya(y.data(), static_cast<Index>(y.size()));
  const Array dx = xa - xa.mean();
  const Array dy = ya - ya.mean();
  const Scalar denom = std::sqrt(dx.square().sum() * dy.square().sum());
  if (denom == 0.0) return 0.0;
  return (dx * dy).sum() / denom;
}

Scalar spearman(std::span<const Scalar> x, std::span<const Scalar> y) {
  const Array rx = average_ranks(x);
  const Array ry = average_ranks(y);
  return pearson({rx.data(), static_cast<std::size_t>(rx.size())}, {ry.data(), static_cast<std::size_t>(ry.size())});
}

Scalar median(std::vector<Scalar> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty sample");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const Scalar upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const Scalar lower = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

}  // namespace kdlab::stats
