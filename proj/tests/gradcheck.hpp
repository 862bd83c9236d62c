#pragma once

#include <algorithm>
#include <functional>
#include <random>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdlab::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, Scalar lo = -1.0, Scalar hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<Scalar> u(lo, hi);
  Array v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Largest relative error ||g_analytic - g_fd|| / max(||g_analytic||, ||g_fd||, floor)
/// over all inputs, with central differences of step h.
inline Scalar gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                        Scalar h = 1e-6, Scalar floor = 1e-7) {
  for (Tensor& x : inputs) x.zero_grad();
  backward(f(inputs));
  Scalar worst = 0.0;
  for (Tensor& x : inputs) {
    const Array analytic = x.has_grad() ? x.grad() : Array::Zero(x.numel());
    Array numeric(x.numel());
    for (Index i = 0; i < x.numel(); ++i) {
      const Scalar keep = x.mutable_values()[i];
      x.mutable_values()[i] = keep + h;
      const Scalar up = f(inputs).item();
      x.mutable_values()[i] = keep - h;
      const Scalar down = f(inputs).item();
      x.mutable_values()[i] = keep;
      numeric[i] = (up - down) / (2.0 * h);
    }
    const Scalar scale = std::max({analytic.matrix().norm(), numeric.matrix().norm(), floor});
    worst = std::max(worst, (analytic - numeric).matrix().norm() / scale);
  }
  return worst;
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
inline Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, 0.5, 1.5, false)));
}

}  // namespace kdlab::testing
