#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace transadapter;
using testutil::max_abs_diff;
using testutil::t;

namespace {

// Plain triple loop, no sharing with the blocked kernels.
std::vector<double> matmul_oracle(const std::vector<double> &a, const std::vector<double> &b, std::size_t m,
                                  std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p)
        s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
  return c;
}

} // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye = t({2, 2}, {1, 0, 0, 1});
  Tensor b = t({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(matmul(eye, b).values(), (std::vector<double>{5, 6, 7, 8}));
}

TEST(Matmul, RowTimesColumnIsDot) {
  Tensor c = matmul(t({1, 2}, {1, 2}), t({2, 1}, {3, 4}));
  EXPECT_EQ(c.shape(), (Shape{1, 1}));
  EXPECT_EQ(c.item(), 11.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Rng rng = derive_rng(7, {1});
  Tensor a = testutil::random({3, 4}, rng);
  Tensor b = testutil::random({4, 2}, rng);
  EXPECT_LT(max_abs_diff(matmul(a, b).values(), matmul_oracle(a.values(), b.values(), 3, 4, 2)), 1e-12);
}

TEST(Matmul, BlockedKernelsMatchOracleOnAwkwardSizes) {
  // Sizes straddle the 4-row / 8-column register tiles.
  for (auto [m, k, n] : {std::tuple{1, 1, 1}, {5, 3, 9}, {9, 17, 23}, {4, 8, 16}, {13, 2, 31}}) {
    Rng rng = derive_rng(m * 100 + n, {2});
    Tensor a = testutil::random({std::size_t(m), std::size_t(k)}, rng);
    Tensor b = testutil::random({std::size_t(k), std::size_t(n)}, rng);
    EXPECT_EQ(matmul(a, b).values(), matmul_oracle(a.values(), b.values(), m, k, n)) << m << "x" << k << "x" << n;
  }
}

TEST(Matmul, BatchedBroadcastsOverLeadingAxes) {
  Rng rng = derive_rng(3, {3});
  Tensor a = testutil::random({2, 3, 4}, rng);
  Tensor b = testutil::random({2, 4, 5}, rng);
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<double> as(a.values().begin() + s * 12, a.values().begin() + (s + 1) * 12);
    std::vector<double> bs(b.values().begin() + s * 20, b.values().begin() + (s + 1) * 20);
    std::vector<double> cs(c.values().begin() + s * 15, c.values().begin() + (s + 1) * 15);
    EXPECT_LT(max_abs_diff(cs, matmul_oracle(as, bs, 3, 4, 5)), 1e-12);
  }
}

TEST(Matmul, InnerExtentMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Softmax, SymmetricPair) {
  Tensor s = softmax(t({2}, {0, 0}), 0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, HandValues) {
  Tensor s = softmax(t({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(s[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(s[0], 0.09003, 1e-5);
  EXPECT_NEAR(s[1], 0.24473, 1e-5);
  EXPECT_NEAR(s[2], 0.66524, 1e-5);
}

TEST(Softmax, LargeInputsStayFinite) {
  Tensor s = softmax(t({2}, {1000, 1000}), 0);
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng = derive_rng(seed, {4});
    Tensor x = testutil::random({3, 4, 6}, rng, -30.0, 30.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tensor s = softmax(x, axis);
      Tensor sums = sum_axis(s, axis);
      for (double v : sums.values())
        EXPECT_NEAR(v, 1.0, 1e-9);
      EXPECT_LT(max_abs_diff(s, softmax(add_scalar(x, 17.25), axis)), 1e-9);
    }
  }
}

TEST(Elementwise, HandCases) {
  EXPECT_EQ(relu(t({3}, {-1, 0, 2})).values(), (std::vector<double>{0, 0, 2}));
  EXPECT_EQ(sigmoid(t({1}, {0})).item(), 0.5);
  EXPECT_EQ(mul(t({2}, {2, 3}), t({2}, {4, 5})).values(), (std::vector<double>{8, 15}));
  EXPECT_EQ(add(t({2}, {2, 3}), t({2}, {4, 5})).values(), (std::vector<double>{6, 8}));
  EXPECT_EQ(sub(t({2}, {2, 3}), t({2}, {4, 5})).values(), (std::vector<double>{-2, -2}));
  EXPECT_EQ(scale(t({2}, {2, 3}), -2.0).values(), (std::vector<double>{-4, -6}));
  EXPECT_DOUBLE_EQ(exp(t({1}, {1})).item(), std::exp(1.0));
  EXPECT_DOUBLE_EQ(log(t({1}, {2})).item(), std::log(2.0));
  EXPECT_DOUBLE_EQ(sqrt(t({1}, {9})).item(), 3.0);
}

TEST(Elementwise, BroadcastAddsRowVector) {
  Tensor y = add(t({2, 2}, {1, 2, 3, 4}), t({1, 2}, {10, 20}));
  EXPECT_EQ(y.values(), (std::vector<double>{11, 22, 13, 24}));
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({1, 2})), DimensionError);
  EXPECT_THROW(add(Tensor::zeros({2, 2}), Tensor::zeros({2})), DimensionError);
}

TEST(Elementwise, LogOfNonPositiveIsNumericError) {
  EXPECT_THROW(log(t({1}, {0.0})), NumericError);
  EXPECT_THROW(log(t({1}, {-1.0})), NumericError);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tensor y = layer_norm(t({3}, {1, 1, 1}), Tensor::full({3}, 1.0), Tensor::zeros({3}));
  for (double v : y.values())
    EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoValueHandCase) {
  Tensor y = layer_norm(t({2}, {0, 2}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  EXPECT_NEAR(y[0], -1.0, 1e-4);
  EXPECT_NEAR(y[1], 1.0, 1e-4);
  EXPECT_NEAR(y[1], 1.0 / std::sqrt(1.0 + kLayerNormEps), 1e-15);
}

TEST(LayerNorm, ZeroGainYieldsBias) {
  Tensor bias = t({3}, {0.5, -1.0, 2.0});
  Tensor y = layer_norm(t({2, 3}, {1, 5, -2, 0, 3, 3}), Tensor::zeros({3}), bias);
  EXPECT_EQ(y.values(), (std::vector<double>{0.5, -1.0, 2.0, 0.5, -1.0, 2.0}));
}

TEST(Backward, SquareAtThree) {
  Tensor x = t({1}, {3}, true);
  backward(mul(x, x));
  EXPECT_EQ(x.grad()[0], 6.0);
}

TEST(Backward, SumOfProductMatchesTransposeRuleAndFiniteDifferences) {
  Rng rng = derive_rng(11, {5});
  Tensor a = testutil::random({3, 4}, rng, -1, 1, true);
  Tensor b = testutil::random({4, 2}, rng, -1, 1, true);
  backward(sum(matmul(a, b)));
  // dA = 1 B^T, dB = A^T 1
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p)
      EXPECT_NEAR(a.grad()[i * 4 + p], b.at({p, 0}) + b.at({p, 1}), 1e-15);
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t j = 0; j < 2; ++j)
      EXPECT_NEAR(b.grad()[p * 2 + j], a.at({0, p}) + a.at({1, p}) + a.at({2, p}), 1e-15);
  auto r = grad_check_tensors([&] { return sum(matmul(a, b)); }, {a, b}, 1e-5);
  EXPECT_GT(r.checked, 0u);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Backward, DetachedLossLeavesGradZero) {
  Tensor x = t({2}, {1, 2}, true);
  backward(sum(mul(detach(x), detach(x))));
  for (double g : x.grad())
    EXPECT_EQ(g, 0.0);
}

TEST(Backward, AccumulationIsAdditive) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng = derive_rng(seed, {6});
    Tensor x = testutil::random({5}, rng, -1, 1, true);
    auto l1 = [&] { return sum(mul(x, x)); };
    auto l2 = [&] { return sum(sigmoid(scale(x, 3.0))); };
    backward(add(l1(), l2()));
    auto joint = testutil::grad_of(x);
    x.zero_grad();
    backward(l1());
    backward(l2());
    EXPECT_LT(max_abs_diff(joint, testutil::grad_of(x)), 1e-12);
    x.zero_grad();
  }
}

TEST(Backward, NonScalarLossThrows) {
  Tensor x = t({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  EXPECT_THROW(backward(y), ContractError);
  Tape::current().clear();
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = t({2}, {1, 2}, true);
  const std::size_t before = Tape::current().size();
  {
    NoGradGuard guard;
    Tensor y = sum(mul(x, x));
    EXPECT_EQ(Tape::current().size(), before);
  }
}

TEST(GradCheck, SumHasConstantGradient) {
  Rng rng = derive_rng(1, {7});
  auto r = grad_check([](const Tensor &x) { return sum(x); }, testutil::random({6}, rng));
  EXPECT_EQ(r.checked, 6u);
  EXPECT_LT(r.max_rel_error, 1e-10);
}

TEST(GradCheck, SoftmaxDotInput) {
  Rng rng = derive_rng(2, {7});
  auto r = grad_check([](const Tensor &x) { return sum(mul(softmax(x, 0), x)); }, testutil::random({8}, rng));
  EXPECT_EQ(r.checked, 8u);
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(GradCheck, ReluKinkCoordinateIsExcluded) {
  auto r = grad_check([](const Tensor &x) { return sum(relu(x)); }, t({3}, {0.5, 0.0, -0.7}));
  EXPECT_EQ(r.excluded, 1u);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_LT(r.max_rel_error, 1e-10);
}

TEST(GradCheck, RejectsSillyStep) {
  EXPECT_THROW(grad_check([](const Tensor &x) { return sum(x); }, t({1}, {1}), 1.0), ContractError);
}

TEST(Shapes, ReshapeAndSliceAndConcatRoundtrip) {
  Rng rng = derive_rng(9, {8});
  Tensor x = testutil::random({2, 3, 4}, rng);
  Tensor left = slice(x, 2, 0, 1), right = slice(x, 2, 1, 4);
  EXPECT_EQ(concat({left, right}, 2).values(), x.values());
  EXPECT_EQ(reshape(x, {6, 4}).values(), x.values());
  EXPECT_THROW(reshape(x, {5, 5}), DimensionError);
  EXPECT_EQ(permute(permute(x, {2, 0, 1}), {1, 2, 0}).values(), x.values());
}
