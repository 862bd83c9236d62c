#pragma once

#include <span>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdlab::stats {

/// 1-based ranks; tied values share their average rank.
Array average_ranks(std::span<const Scalar> values);
Scalar pearson(std::span<const Scalar> x, std::span<const Scalar> y);
Scalar spearman(std::span<const Scalar> x, std::span<const Scalar> y);
/// Mean of the two middle order statistics for even counts.
Scalar median(std::vector<Scalar> values);

}  // namespace kdlab::stats
