#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "kdlab/losses.hpp"
#include "kdlab/tensor.hpp"

namespace kdlab {
namespace {

using testing::gradcheck;
using testing::random_tensor;
using testing::weighted_sum;

constexpr Scalar kGradTol = 1e-4;

TEST(TensorTest, ShapeMustMatchData) {
  EXPECT_THROW(Tensor(Shape{2, 3}, Array::Zero(5)), ShapeError);
  const Tensor t = Tensor::zeros({2, 3});
  EXPECT_EQ(t.numel(), 6);
  EXPECT_EQ(t.rank(), 2);
  EXPECT_EQ(Tensor::scalar(3.0).item(), 3.0);
}

TEST(TensorTest, MatmulIdentity) {
  const Tensor eye = Tensor::of({2, 2}, {1, 0, 0, 1});
  const Tensor b = Tensor::of({2, 1}, {3, 4});
  const Tensor c = matmul(eye, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 3.0);
  EXPECT_EQ(c[1], 4.0);
}

TEST(TensorTest, MatmulRejectsMismatchNamingExtents) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3]"), std::string::npos) << e.what();
  }
}

TEST(TensorTest, ReluDefinition) {
  const Tensor y = relu(Tensor::of({3}, {-1, 0, 2}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 2.0);
}

TEST(TensorTest, SoftmaxOfEqualLogitsIsUniform) {
  const Tensor y = softmax(Tensor::of({1, 2}, {0, 0}));
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], 0.5);
}

TEST(TensorTest, LogAndDivRejectNonPositive) {
  EXPECT_THROW(log(Tensor::of({2}, {1, 0})), DomainError);
  EXPECT_THROW(log(Tensor::of({1}, {-1})), DomainError);
  EXPECT_THROW(div(Tensor::of({1}, {1}), Tensor::of({1}, {0})), DomainError);
}

TEST(TensorTest, BroadcastOnlyOverLeadingDimensions) {
  const Tensor x = Tensor::of({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor row = Tensor::of({3}, {10, 20, 30});
  const Tensor y = add(x, row);
  EXPECT_EQ(y[3], 14.0);
  EXPECT_EQ(y[5], 36.0);
  EXPECT_THROW(add(x, Tensor::zeros({2})), ShapeError);
  EXPECT_THROW(add(x, Tensor::zeros({3, 2})), ShapeError);
}

TEST(BackwardTest, SumOfSquares) {
  Tensor x = Tensor::of({2}, {1, 2}, true);
  backward(sum(square(x)));
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], 4.0);
}

TEST(BackwardTest, LogAtOne) {
  Tensor x = Tensor::of({1}, {1}, true);
  backward(sum(log(x)));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(BackwardTest, SoftmaxCrossEntropyMatchesFiniteDifference) {
  Tensor logits = Tensor::of({1, 2}, {0, 0}, true);
  const std::vector<int> label{0};
  backward(cross_entropy(logits, label));
  // Central differences with step 1e-5 on the closed form -log softmax_0.
  auto loss = [](Scalar a, Scalar b) { return -(a - std::log(std::exp(a) + std::exp(b))); };
  const Scalar h = 1e-5;
  const Scalar fd0 = (loss(h, 0) - loss(-h, 0)) / (2 * h);
  const Scalar fd1 = (loss(0, h) - loss(0, -h)) / (2 * h);
  EXPECT_NEAR(fd0, -0.5, 1e-9);
  EXPECT_NEAR(fd1, 0.5, 1e-9);
  EXPECT_NEAR(logits.grad()[0], fd0, 1e-9);
  EXPECT_NEAR(logits.grad()[1], fd1, 1e-9);
}

TEST(BackwardTest, RejectsNonScalarRoot) {
  Tensor x = Tensor::of({2}, {1, 2}, true);
  EXPECT_THROW(backward(square(x)), ShapeError);
}

TEST(BackwardTest, RepeatedCallsAccumulate) {
  Tensor x = Tensor::of({1}, {3}, true);
  backward(sum(square(x)));
  backward(sum(square(x)));
  EXPECT_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  backward(sum(square(x)));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(BackwardTest, SharedSubexpressionVisitedOnce) {
  Tensor x = Tensor::of({1}, {2}, true);
  const Tensor y = square(x);
  const Tensor z = add(y, y);  // 2x^2
  const Tape tape = Tape::record(sum(z));
  EXPECT_EQ(tape.size(), 4u);  // x, square, add, sum
  backward(sum(z));
  EXPECT_EQ(x.grad()[0], 8.0);
}

TEST(BackwardTest, TapeIsTopologicallyOrdered) {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  const Tensor root = mean(softmax(relu(matmul(a, b))));
  const Tape tape = Tape::record(root);
  const auto nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& input : nodes[i]->inputs) {
      const auto pos = std::find(nodes.begin(), nodes.end(), input.get()) - nodes.begin();
      EXPECT_LT(static_cast<std::size_t>(pos), i);
    }
  }
  EXPECT_EQ(nodes.back(), root.node().get());
}

TEST(BackwardTest, LinearityOverIndependentGraphs) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({3, 2}, rng, -2, 2);
    auto f = [&] { return sum(exp(scale(x, 0.5))); };
    auto g = [&] { return mean(square(matmul(x, transpose(x)))); };
    backward(f());
    const Array gf = x.grad();
    x.zero_grad();
    backward(g());
    const Array gg = x.grad();
    x.zero_grad();
    backward(add(f(), g()));
    EXPECT_LT((x.grad() - (gf + gg)).abs().maxCoeff(), 1e-12);
  }
}

TEST(SgdTest, PlainStep) {
  Tensor p = Tensor::of({1}, {5}, true);
  backward(sum(p));  // grad 1
  sgd_step(std::vector<Tensor>{p}, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(p[0], 4.9);
}

TEST(SgdTest, MomentumTwoSteps) {
  Tensor p = Tensor::of({1}, {0}, true);
  const std::vector<Tensor> params{p};
  for (int step = 0; step < 2; ++step) {
    zero_grads(params);
    backward(sum(p));
    sgd_step(params, 1.0, 0.9);
  }
  EXPECT_DOUBLE_EQ(p[0], -2.9);
}

TEST(SgdTest, ZeroGradIsFixedPoint) {
  Tensor p = Tensor::of({2}, {1.5, -2}, true);
  backward(scale(sum(p), 0.0));
  sgd_step(std::vector<Tensor>{p}, 0.3, 0.9);
  EXPECT_EQ(p[0], 1.5);
  EXPECT_EQ(p[1], -2.0);
}

TEST(SgdTest, MissingGradRejected) {
  Tensor p = Tensor::of({1}, {1}, true);
  EXPECT_THROW(sgd_step(std::vector<Tensor>{p}, 0.1, 0.0), std::logic_error);
  EXPECT_THROW(sgd_step(std::vector<Tensor>{p}, -0.1, 0.0), std::invalid_argument);
}

TEST(SoftmaxProperty, RowsSumToOneAndArePositive) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_tensor({4, 7}, rng, -30, 30, false);
    const Tensor y = softmax(x);
    for (Index r = 0; r < 4; ++r) {
      EXPECT_NEAR(y.matrix().row(r).sum(), 1.0, 1e-12);
      EXPECT_GT(y.matrix().row(r).minCoeff(), 0.0);
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference checks for every primitive.

class PrimitiveGradTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{20240601};

  /// Uniform in [-2, 2], resampled while within 1e-3 of any kink.
  Tensor away_from(Shape shape, std::initializer_list<Scalar> kinks) {
    Tensor t = random_tensor(std::move(shape), rng, -2, 2);
    std::uniform_real_distribution<Scalar> u(-2, 2);
    for (Index i = 0; i < t.numel(); ++i) {
      auto near = [&](Scalar v) {
        return std::any_of(kinks.begin(), kinks.end(), [&](Scalar k) { return std::abs(v - k) < 1e-3; });
      };
      while (near(t.mutable_values()[i])) t.mutable_values()[i] = u(rng);
    }
    return t;
  }
};

TEST_F(PrimitiveGradTest, Elementwise) {
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_tensor({3, 4}, rng, -2, 2);
    const Tensor b = random_tensor({3, 4}, rng, -2, 2);
    const Tensor pos = random_tensor({3, 4}, rng, 0.5, 2);
    const Tensor row = random_tensor({4}, rng, -2, 2);
    auto ws = [](const Tensor& y) { return weighted_sum(y); };
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(add(v[0], v[1])); }, {a, b}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(sub(v[0], v[1])); }, {a, b}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(mul(v[0], v[1])); }, {a, b}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(div(v[0], v[1])); }, {a, pos}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(mul(v[0], v[1])); }, {a, row}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(div(v[1], v[0])); }, {pos, row}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(exp(v[0])); }, {a}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(log(v[0])); }, {pos}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(sqrt(v[0])); }, {pos}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(square(v[0])); }, {a}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return ws(scale(shift(v[0], 0.3), -1.7)); }, {a}), kGradTol);
  }
}

TEST_F(PrimitiveGradTest, Kinked) {
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = away_from({3, 5}, {0.0});
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(relu(v[0])); }, {a}), kGradTol);
    const Tensor c = away_from({3, 5}, {-0.5, 0.7});
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(clamp(v[0], -0.5, 0.7)); }, {c}), kGradTol);
  }
}

TEST_F(PrimitiveGradTest, MatmulTransposeReductions) {
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_tensor({3, 4}, rng, -2, 2);
    const Tensor b = random_tensor({4, 2}, rng, -2, 2);
    const Tensor x = random_tensor({2, 3, 4}, rng, -2, 2);
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(matmul(v[0], v[1])); }, {a, b}), kGradTol);
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(transpose(v[0])); }, {a}), kGradTol);
    EXPECT_LT(gradcheck([](const auto& v) { return sum(v[0]); }, {x}), kGradTol);
    EXPECT_LT(gradcheck([](const auto& v) { return mean(v[0]); }, {x}), kGradTol);
    for (Index axis = 0; axis < 3; ++axis) {
      EXPECT_LT(gradcheck([axis](const auto& v) { return weighted_sum(sum_axis(v[0], axis)); }, {x}), kGradTol);
      EXPECT_LT(gradcheck([axis](const auto& v) { return weighted_sum(mean_axis(v[0], axis)); }, {x}), kGradTol);
    }
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(row_sum(v[0])); }, {x}), kGradTol);
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(row_mean(v[0])); }, {x}), kGradTol);
  }
}

TEST_F(PrimitiveGradTest, SoftmaxFamily) {
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_tensor({3, 5}, rng, -2, 2);
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(softmax(v[0])); }, {a}), kGradTol);
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(log_softmax(v[0])); }, {a}), kGradTol);
  }
}

TEST_F(PrimitiveGradTest, ShapeOps) {
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = random_tensor({2, 6}, rng, -2, 2);
    const Tensor r = random_tensor({4}, rng, -2, 2);
    const Tensor s = random_tensor({2}, rng, -2, 2);
    const std::vector<Index> rows{1, 0, 1};
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(reshape(v[0], Shape{3, 4})); }, {a}), kGradTol);
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(broadcast(v[0], Shape{3, 4})); }, {r}), kGradTol);
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(row_scale(v[0], v[1])); }, {a, s}), kGradTol);
    EXPECT_LT(gradcheck([&](const auto& v) { return weighted_sum(gather_rows(v[0], rows)); }, {a}), kGradTol);
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(normalize_rows(v[0])); }, {a}), kGradTol);
  }
}

TEST_F(PrimitiveGradTest, BatchNorm) {
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x2 = random_tensor({5, 3}, rng, -2, 2);
    const Tensor x4 = random_tensor({3, 2, 2, 2}, rng, -2, 2);
    const Tensor g = random_tensor({3}, rng, 0.5, 1.5);
    const Tensor b = random_tensor({3}, rng, -1, 1);
    const Tensor g2 = random_tensor({2}, rng, 0.5, 1.5);
    const Tensor b2 = random_tensor({2}, rng, -1, 1);
    for (bool batch_stats : {true, false}) {
      BatchNormState s3(3), s2(2);
      s3.running_var = Array::Constant(3, 0.7);
      EXPECT_LT(gradcheck([&](const auto& v) { return weighted_sum(batchnorm(v[0], v[1], v[2], s3, batch_stats)); },
                          {x2, g, b}),
                kGradTol);
      EXPECT_LT(gradcheck([&](const auto& v) { return weighted_sum(batchnorm(v[0], v[1], v[2], s2, batch_stats)); },
                          {x4, g2, b2}),
                kGradTol);
    }
  }
}

TEST_F(PrimitiveGradTest, ConvAndPool) {
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = random_tensor({2, 2, 4, 4}, rng, -2, 2);
    const Tensor w = random_tensor({3, 2, 3, 3}, rng, -1, 1);
    const Tensor b = random_tensor({3}, rng, -1, 1);
    for (Index pad : {0, 1}) {
      EXPECT_LT(gradcheck([pad](const auto& v) { return weighted_sum(conv2d(v[0], v[1], v[2], pad)); }, {x, w, b}),
                kGradTol);
    }
    EXPECT_LT(gradcheck([](const auto& v) { return weighted_sum(avg_pool2d(v[0], 2)); }, {x}), kGradTol);
  }
}

// ---------------------------------------------------------------------------

TEST(BatchNormTest, NormalisesAndTracksRunningStatistics) {
  const Tensor x = Tensor::of({4, 1}, {1, 2, 3, 4});
  const Tensor g = Tensor::of({1}, {1});
  const Tensor b = Tensor::of({1}, {0});
  BatchNormState state(1);
  const Tensor y = batchnorm(x, g, b, state, true);
  EXPECT_NEAR(y.values().mean(), 0.0, 1e-12);
  // Biased batch variance 1.25 normalises; unbiased 5/3 feeds the running estimate.
  EXPECT_NEAR(y[3], 1.5 / std::sqrt(1.25 + 1e-5), 1e-12);
  EXPECT_NEAR(state.running_mean[0], 0.1 * 2.5, 1e-12);
  EXPECT_NEAR(state.running_var[0], 0.9 + 0.1 * 5.0 / 3.0, 1e-12);
  const Tensor e = batchnorm(x, g, b, state, false);
  EXPECT_NEAR(e[0], (1.0 - 0.25) / std::sqrt(state.running_var[0] + 1e-5), 1e-12);
}

TEST(ConvTest, MatchesDirectSummation) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 3, 5, 4}, rng, -2, 2, false);
  const Tensor w = random_tensor({2, 3, 3, 3}, rng, -1, 1, false);
  const Tensor b = random_tensor({2}, rng, -1, 1, false);
  const Tensor y = conv2d(x, w, b, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 2, 5, 4}));
  auto at = [](const Tensor& t, Index n, Index c, Index i, Index j) {
    return t[((n * t.dim(1) + c) * t.dim(2) + i) * t.dim(3) + j];
  };
  for (Index n = 0; n < 2; ++n)
    for (Index o = 0; o < 2; ++o)
      for (Index i = 0; i < 5; ++i)
        for (Index j = 0; j < 4; ++j) {
          Scalar acc = b[o];
          for (Index c = 0; c < 3; ++c)
            for (Index di = 0; di < 3; ++di)
              for (Index dj = 0; dj < 3; ++dj) {
                const Index si = i + di - 1, sj = j + dj - 1;
                if (si < 0 || sj < 0 || si >= 5 || sj >= 4) continue;
                acc += at(x, n, c, si, sj) * w[((o * 3 + c) * 3 + di) * 3 + dj];
              }
          EXPECT_NEAR(at(y, n, o, i, j), acc, 1e-12);
        }
}

TEST(DetachTest, CutsGradientFlow) {
  Tensor x = Tensor::of({2}, {1, 2}, true);
  const Tensor y = mul(x, x.detach());
  backward(sum(y));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 2.0);
}

}  // namespace
}  // namespace kdlab
