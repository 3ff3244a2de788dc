#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "langemb/tensor.hpp"
#include "support.hpp"

namespace langemb {
namespace {

using testing::gradient_check;
using testing::random_tensor;

constexpr double kTol = 1e-5;

// Contracts a tensor against fixed random weights so every output element
// contributes a distinct gradient.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng, -1.0, 1.0, false)));
}

Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = random_tensor(std::move(shape), rng);
  for (double& v : t.mutable_data())
    if (std::abs(v) < 1e-3) v = v < 0 ? -0.5 : 0.5;
  return t;
}

TEST(Tensor, MatmulForwardAndGradient) {
  const Tensor a({2, 2}, {1, 2, 3, 4});
  const Tensor b({2, 1}, {5, 6});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 17.0);
  EXPECT_EQ(c[1], 39.0);

  Rng rng(1);
  Tensor x = random_tensor({4, 3}, rng), w = random_tensor({3, 2}, rng);
  EXPECT_LT(gradient_check([&] { return weighted_sum(matmul(x, w), 9); }, {x, w}), 1e-6);
}

TEST(Tensor, MatmulShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("matmul"), std::string::npos);
    EXPECT_NE(m.find("[2, 3]"), std::string::npos) << m;
  }
}

TEST(Tensor, ElementwiseGradients) {
  Rng rng(2);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  Tensor bias = random_tensor({4}, rng);
  EXPECT_LT(gradient_check([&] { return weighted_sum(add(a, b), 1); }, {a, b}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(mul(a, b), 2); }, {a, b}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(add_bias(a, bias), 3); }, {a, bias}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(scale(a, -1.7), 4); }, {a}), kTol);
  EXPECT_LT(gradient_check([&] { return sum(a); }, {a}), kTol);
  Tensor r = away_from_zero({3, 4}, rng);
  EXPECT_LT(gradient_check([&] { return weighted_sum(relu(r), 5); }, {r}), kTol);
}

TEST(Tensor, ShapeOpGradients) {
  Rng rng(3);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({2, 4}, rng);
  Tensor c = random_tensor({3, 2}, rng), v = random_tensor({4}, rng);
  EXPECT_LT(gradient_check([&] { return weighted_sum(mean_over_axis(a, 0), 1); }, {a}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(mean_over_axis(a, 1), 2); }, {a}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(reshape(a, {2, 6}), 3); }, {a}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(concat({a, b}, 0), 4); }, {a, b}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(concat({a, c}, 1), 5); }, {a, c}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(concat({v, v}, 0), 6); }, {v}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(slice_cols(a, 1, 3), 7); }, {a}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(slice_rows(a, 1, 3), 8); }, {a}), kTol);
  EXPECT_LT(gradient_check([&] { return weighted_sum(tile_rows(v, 5), 9); }, {v}), kTol);
}

// out[t, o] = sum_{j,c} in[t + j*d, c] * k[j, c, o] + b[o], written out directly.
std::vector<double> brute_conv(const Tensor& in, const Tensor& k, const Tensor& b,
                               std::size_t d) {
  const std::size_t T = in.dim(0), C = in.dim(1), K = k.dim(0), O = k.dim(2);
  const std::size_t To = T - (K - 1) * d;
  std::vector<double> out(To * O);
  for (std::size_t t = 0; t < To; ++t)
    for (std::size_t o = 0; o < O; ++o) {
      long double acc = b[o];
      for (std::size_t j = 0; j < K; ++j)
        for (std::size_t c = 0; c < C; ++c)
          acc += static_cast<long double>(in[(t + j * d) * C + c]) * k[(j * C + c) * O + o];
      out[t * O + o] = static_cast<double>(acc);
    }
  return out;
}

TEST(Tensor, Conv1dMatchesDirectSum) {
  Rng rng(4);
  for (std::size_t d : {1u, 2u, 3u}) {
    Tensor in = random_tensor({15, 3}, rng), k = random_tensor({3, 3, 4}, rng);
    Tensor b = random_tensor({4}, rng);
    const Tensor y = conv1d(in, k, b, d);
    const auto expect = brute_conv(in, k, b, d);
    ASSERT_EQ(y.numel(), expect.size());
    EXPECT_EQ(y.dim(0), 15 - 2 * d);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(y[i], expect[i], 1e-12);
    EXPECT_LT(gradient_check([&] { return weighted_sum(conv1d(in, k, b, d), d); }, {in, k, b}),
              kTol);
  }
}

TEST(Tensor, Conv1dRejectsShortSequence) {
  try {
    conv1d(Tensor::zeros({6, 2}), Tensor::zeros({3, 2, 2}), Tensor::zeros({2}), 3);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("receptive field of 7"), std::string::npos) << e.what();
  }
}

TEST(Tensor, StatisticsPoolingMatchesTwoPass) {
  Rng rng(5);
  Tensor x = random_tensor({9, 3}, rng);
  const Tensor y = statistics_pooling(x);
  ASSERT_EQ(y.shape(), (Shape{6}));
  for (std::size_t c = 0; c < 3; ++c) {
    long double m = 0;
    for (std::size_t t = 0; t < 9; ++t) m += x.at(t, c);
    m /= 9;
    long double v = 0;
    for (std::size_t t = 0; t < 9; ++t) v += (x.at(t, c) - m) * (x.at(t, c) - m);
    v /= 9;
    EXPECT_NEAR(y[c], static_cast<double>(m), 1e-12);
    EXPECT_NEAR(y[3 + c], std::sqrt(static_cast<double>(v) + 1e-8), 1e-12);
  }
  EXPECT_LT(gradient_check([&] { return weighted_sum(statistics_pooling(x), 6); }, {x}), kTol);
}

TEST(Tensor, StatisticsPoolingOfConstantSequenceIsFinite) {
  Tensor x = Tensor({4, 2}, {1, 2, 1, 2, 1, 2, 1, 2}, true);
  const Tensor y = statistics_pooling(x);
  EXPECT_NEAR(y[2], 1e-4, 1e-12);
  backward(sum(y));
  for (double g : x.grad()) EXPECT_TRUE(std::isfinite(g));
}

TEST(Tensor, CrossEntropyMatchesLongDoubleOracle) {
  Rng rng(6);
  Tensor logits = random_tensor({5, 7}, rng, -3.0, 3.0);
  const std::vector<int> y{0, 6, 3, 3, 1};
  long double total = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    long double z = 0;
    for (std::size_t j = 0; j < 7; ++j) z += std::exp(static_cast<long double>(logits.at(i, j)));
    total += std::log(z) - logits.at(i, static_cast<std::size_t>(y[i]));
  }
  EXPECT_NEAR(softmax_cross_entropy(logits, y).item(), static_cast<double>(total / 5), 1e-12);
  EXPECT_LT(gradient_check([&] { return softmax_cross_entropy(logits, y); }, {logits}), kTol);
}

TEST(Tensor, CrossEntropyUniformLogitsIsLogK) {
  for (std::size_t K : {3u, 6u, 48u}) {
    const Tensor logits = Tensor::zeros({4, K});
    const std::vector<int> y{0, 1, 2, static_cast<int>(K) - 1};
    EXPECT_NEAR(softmax_cross_entropy(logits, y).item(), std::log(static_cast<double>(K)), 1e-9);
  }
}

TEST(Tensor, CrossEntropyRejectsOutOfRangeLabel) {
  const Tensor logits = Tensor::zeros({2, 3});
  const std::vector<int> bad{0, 3};
  EXPECT_THROW(softmax_cross_entropy(logits, bad), std::out_of_range);
  const std::vector<int> neg{-1, 0};
  EXPECT_THROW(softmax_cross_entropy(logits, neg), std::out_of_range);
}

TEST(Tensor, CrossEntropyIsStableForHugeLogits) {
  const Tensor logits({1, 2}, {1000.0, 0.0});
  const std::vector<int> y{1};
  EXPECT_NEAR(softmax_cross_entropy(logits, y).item(), 1000.0, 1e-9);
}

TEST(GradReverse, ForwardIsBitwiseIdentity) {
  Rng rng(7);
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor y = grad_reverse(x, 0.75);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(GradReverse, BackwardNegatesAndScales) {
  {
    Tensor x({2}, {1.0, 2.0}, true);
    const Tensor up({2}, {0.3, -0.7});
    backward(sum(mul(grad_reverse(x, 1.0), up)));
    EXPECT_EQ(x.grad()[0], -0.3);
    EXPECT_EQ(x.grad()[1], 0.7);
  }
  {
    Tensor x({1}, {4.0}, true);
    backward(sum(scale(grad_reverse(x, 0.5), 2.0)));
    EXPECT_EQ(x.grad()[0], -1.0);
  }
}

TEST(GradReverse, BackwardIsExactlyMinusLambdaTimesUpstream) {
  Rng rng(8);
  for (double lambda : {0.0, 0.3, 1.0, 2.5}) {
    Tensor x = random_tensor({4, 3}, rng);
    const Tensor up = random_tensor({4, 3}, rng, -1.0, 1.0, false);
    backward(sum(mul(grad_reverse(x, lambda), up)));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(x.grad()[i], -lambda * up[i]);
  }
}

TEST(GradReverse, ZeroLambdaKillsGradientExactly) {
  Tensor x({3}, {1, -2, 3}, true);
  backward(sum(mul(grad_reverse(x, 0.0), Tensor({3}, {5, 6, 7}))));
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(GradReverse, DoubleReversalEqualsPlainPath) {
  Rng rng(9);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor w = random_tensor({4, 2}, rng, -1, 1, false);
  backward(sum(relu(matmul(x, w))));
  const std::vector<double> plain(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(sum(relu(matmul(grad_reverse(grad_reverse(x, 1.0), 1.0), w))));
  for (std::size_t i = 0; i < plain.size(); ++i) EXPECT_EQ(x.grad()[i], plain[i]);
}

TEST(GradReverse, NegativeLambdaThrows) {
  const Tensor x({1}, {1.0}, true);
  EXPECT_THROW(grad_reverse(x, -1.0), std::invalid_argument);
  EXPECT_THROW(grad_reverse(x, std::numeric_limits<double>::quiet_NaN()), std::invalid_argument);
}

TEST(Autodiff, NonScalarRootThrows) {
  Tensor x({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2.0)), ShapeError);
}

TEST(Autodiff, RepeatedBackwardAccumulatesIntoLeaves) {
  Tensor x({2}, {1, 2}, true);
  const Tensor loss = sum(mul(x, x));
  backward(loss);
  backward(loss);
  EXPECT_EQ(x.grad()[0], 4.0);
  EXPECT_EQ(x.grad()[1], 8.0);
}

TEST(Autodiff, SharedSubexpressionGradientsAdd) {
  Tensor x({1}, {3.0}, true);
  const Tensor y = scale(x, 2.0);
  backward(sum(add(y, y)));
  EXPECT_EQ(x.grad()[0], 4.0);
}

TEST(Autodiff, NoGradGuardBuildsNoGraph) {
  Tensor x({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = scale(x, 3.0);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Autodiff, NonFiniteValuesAreHardErrors) {
  const Tensor big({1}, {1e308});
  EXPECT_THROW(scale(big, 10.0), NumericError);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(add(Tensor({1}, {nan}), Tensor({1}, {0.0})), NumericError);
}

TEST(Autodiff, ConstructorRejectsCountMismatch) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), ShapeError);
}

}  // namespace
}  // namespace langemb
