#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>

#include "test_util.hpp"

using namespace transadapter;
using testutil::max_abs_diff;
using testutil::t;

namespace {

Tensor identity(std::size_t n) {
  Tensor e = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    e.values()[i * n + i] = 1.0;
  return e;
}

GddParams random_gdd(std::size_t channels, std::uint64_t seed, double scale = 0.5) {
  Rng rng = derive_rng(seed, {41});
  GddParams p = GddParams::make(GddConfig::for_channels(channels), rng);
  ParameterList params;
  p.collect(params, "gdd");
  for (auto &nt : params)
    for (auto &v : nt.tensor.values())
      v = scale * (2.0 * uniform01(rng) - 1.0);
  return p;
}

} // namespace

TEST(Adjacency, IdenticalNodesAreFullySimilar) {
  AdjacencyMatrix a = build_adjacency(t({2, 2}, {0.3, -1.2, 0.3, -1.2}), identity(2));
  for (double v : a.a.values())
    EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Adjacency, OrthogonalNodesHaveZeroOffDiagonal) {
  AdjacencyMatrix a = build_adjacency(t({2, 2}, {1, 0, 0, 1}), identity(2));
  EXPECT_EQ(a.a.at({0, 1}), 0.0);
  EXPECT_EQ(a.a.at({1, 0}), 0.0);
}

TEST(Adjacency, FortyFiveDegrees) {
  AdjacencyMatrix a = build_adjacency(t({2, 2}, {1, 0, 1, 1}), identity(2));
  EXPECT_NEAR(a.a.at({0, 1}), 0.70711, 1e-5);
  EXPECT_NEAR(a.a.at({0, 1}), 1.0 / std::numbers::sqrt2, 1e-15);
}

TEST(Adjacency, SymmetricAndBounded) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng = derive_rng(seed, {42});
    Tensor x = testutil::random({3, 7, 5}, rng);
    Tensor p = testutil::random({5, 4}, rng);
    Tensor a = build_adjacency(x, p).a;
    EXPECT_LT(max_abs_diff(a, transpose(a)), 1e-12);
    for (double v : a.values())
      EXPECT_LE(std::abs(v), 1.0 + 1e-12);
  }
}

TEST(NormalizeAdjacency, AllOnesHalves) {
  AdjacencyMatrix n = normalize_adjacency({t({2, 2}, {1, 1, 1, 1})});
  for (double v : n.a.values())
    EXPECT_NEAR(v, 0.5, 1e-15);
  EXPECT_TRUE(n.normalized);
}

TEST(NormalizeAdjacency, IdentityStaysIdentity) {
  EXPECT_EQ(normalize_adjacency({identity(3)}).a.values(), identity(3).values());
}

TEST(NormalizeAdjacency, NegativeEntriesAreClamped) {
  EXPECT_EQ(normalize_adjacency({t({2, 2}, {1, -0.5, -0.5, 1})}).a.values(), identity(2).values());
}

TEST(GraphConv, IdentityAdjacencyIsDenseLayer) {
  Rng rng = derive_rng(1, {43});
  Tensor x = testutil::random({4, 3}, rng), w = testutil::random({3, 2}, rng);
  EXPECT_EQ(graph_conv(x, {identity(4), true}, w).values(), relu(matmul(x, w)).values());
}

TEST(GraphConv, UniformAdjacencySmoothsFully) {
  Rng rng = derive_rng(2, {43});
  Tensor x = testutil::random({4, 3}, rng), w = testutil::random({3, 2}, rng);
  Tensor y = graph_conv(x, {Tensor::full({4, 4}, 0.25), true}, w);
  for (std::size_t i = 1; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j)
      EXPECT_NEAR(y.at({i, j}), y.at({0, j}), 1e-15);
}

TEST(GraphConv, TwoNodeHandCase) {
  Tensor y = graph_conv(t({2, 1}, {1, 3}), {Tensor::full({2, 2}, 0.5), true}, t({1, 1}, {1}));
  EXPECT_EQ(y.values(), (std::vector<double>{2, 2}));
}

TEST(PoolHalve, PairwiseMax) {
  EXPECT_EQ(pool_halve(t({1, 4}, {1, 5, 2, 2})).values(), (std::vector<double>{5, 2}));
  EXPECT_EQ(pool_halve(Tensor::full({3, 6}, 0.25)).values(), Tensor::full({3, 3}, 0.25).values());
  EXPECT_THROW(pool_halve(Tensor::zeros({2, 3})), ContractError);
}

TEST(PoolHalve, GradientReachesOnlyArgmax) {
  Tensor x = t({1, 4}, {1, 5, 3, 2}, true);
  backward(sum(mul(pool_halve(x), t({1, 2}, {2, -7}))));
  EXPECT_EQ(testutil::grad_of(x), (std::vector<double>{0, 2, -7, 0}));
  Rng rng = derive_rng(3, {43});
  auto r = grad_check([](const Tensor &v) { return sum(mul(pool_halve(v), pool_halve(v))); },
                      testutil::random({3, 8}, rng));
  EXPECT_EQ(r.checked, 24u);
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(Grl, ForwardIsBitwiseIdentity) {
  Rng rng = derive_rng(4, {43});
  Tensor x = testutil::random({5, 3}, rng);
  EXPECT_EQ(grl(x, 0.37).values(), x.values());
}

TEST(Grl, BackwardFlipsSign) {
  Tensor x = t({2}, {0.1, 0.2}, true);
  backward(sum(mul(grl(x, 1.0), t({2}, {2, -3}))));
  EXPECT_EQ(testutil::grad_of(x), (std::vector<double>{-2, 3}));
}

TEST(Grl, ZeroLambdaBlocksGradient) {
  Tensor x = t({2}, {0.1, 0.2}, true);
  backward(sum(mul(grl(x, 0.0), t({2}, {2, -3}))));
  for (double g : x.grad())
    EXPECT_EQ(g, 0.0);
  EXPECT_THROW(grl(x, -1.0), ContractError);
}

TEST(Grl, EqualsNegativeLambdaTimesPlainGradientExactly) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    Rng rng = derive_rng(seed, {44});
    Tensor x = testutil::random({6}, rng, -1, 1, true);
    const double lambda = 0.1 + uniform01(rng);
    auto f = [&](const Tensor &in) { return sum(mul(sigmoid(in), exp(scale(in, 0.3)))); };
    backward(f(x));
    auto plain = testutil::grad_of(x);
    x.zero_grad();
    backward(f(grl(x, lambda)));
    for (std::size_t i = 0; i < plain.size(); ++i)
      EXPECT_EQ(x.grad()[i], -lambda * plain[i]);
  }
}

TEST(GddForward, ProbabilitiesStrictlyInsideUnitInterval) {
  GddParams p = random_gdd(8, 1);
  Rng rng = derive_rng(1, {45});
  Tensor probs = gdd_forward(p, testutil::random({2, 10, 8}, rng, -3, 3));
  EXPECT_EQ(probs.shape(), (Shape{2, 10}));
  for (double v : probs.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(GddForward, ZeroHeadGivesMaximalEntropy) {
  GddParams p = random_gdd(8, 2);
  fill(p.head.weight, 0.0);
  fill(p.head.bias, 0.0);
  Rng rng = derive_rng(2, {45});
  Tensor probs = gdd_forward(p, testutil::random({6, 8}, rng));
  for (double v : probs.values())
    EXPECT_EQ(v, 0.5);
  for (Tensor all = entropy_from_domain_probs(probs).h; double h : all.values())
    EXPECT_NEAR(h, std::numbers::ln2, 1e-15);
}

TEST(GddForward, EqualNodesGetEqualProbabilities) {
  GddParams p = random_gdd(4, 3);
  Tensor probs = gdd_forward(p, t({2, 4}, {0.2, -0.4, 1.0, 0.3, 0.2, -0.4, 1.0, 0.3}));
  EXPECT_EQ(probs[0], probs[1]);
}

TEST(GddForward, PermutationEquivariant) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    GddParams p = random_gdd(8, seed);
    Rng rng = derive_rng(seed, {46});
    const std::size_t m = 9;
    Tensor nodes = testutil::random({m, 8}, rng);
    std::vector<std::size_t> perm(m);
    for (std::size_t i = 0; i < m; ++i)
      perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor permuted = Tensor::zeros({m, 8});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < 8; ++c)
        permuted.values()[i * 8 + c] = nodes.at({perm[i], c});
    Tensor a = gdd_forward(p, nodes), b = gdd_forward(p, permuted);
    for (std::size_t i = 0; i < m; ++i)
      EXPECT_NEAR(b[i], a[perm[i]], 1e-9);
  }
}

TEST(GddForward, WrongWidthThrows) {
  GddParams p = random_gdd(8, 4);
  EXPECT_THROW(gdd_forward(p, Tensor::zeros({3, 6})), DimensionError);
}

TEST(GddForward, AdversarialStepHelpsDiscriminatorAndReversesFeatureGradient) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    GddParams p = random_gdd(8, seed, 0.4);
    p.config.grl_lambda = 0.7;
    Rng rng = derive_rng(seed, {47});
    Tensor src = testutil::random({4, 8}, rng, -1, 1, true);
    Tensor tgt = testutil::random({4, 8}, rng, -0.5, 1.5, true);
    auto loss = [&] {
      Tensor probs = gdd_forward(p, concat({src, tgt}, 0));
      return scale(add(binary_cross_entropy(slice(probs, 0, 0, 4), 1.0),
                       binary_cross_entropy(slice(probs, 0, 4, 8), 0.0)),
                   0.5);
    };
    ParameterList params;
    p.collect(params, "gdd");

    {
      TransparentGrlGuard plain;
      backward(loss());
    }
    auto plain_src = testutil::grad_of(src);
    auto plain_tgt = testutil::grad_of(tgt);
    std::vector<std::vector<double>> plain_params;
    for (auto &nt : params) {
      plain_params.push_back(testutil::grad_of(nt.tensor));
      nt.tensor.zero_grad();
    }
    src.zero_grad();
    tgt.zero_grad();

    Tensor l0 = loss();
    const double before = l0.item();
    backward(l0);
    for (std::size_t i = 0; i < plain_src.size(); ++i) {
      EXPECT_EQ(src.grad()[i], -0.7 * plain_src[i]);
      EXPECT_EQ(tgt.grad()[i], -0.7 * plain_tgt[i]);
    }
    // Discriminator parameters see the unreversed gradient.
    for (std::size_t k = 0; k < params.size(); ++k)
      EXPECT_EQ(testutil::grad_of(params[k].tensor), plain_params[k]) << params[k].name;

    OptimState st;
    st.momentum = 0.0;
    st.weight_decay = 0.0;
    for (const auto &nt : params)
      st.buffers.emplace_back(nt.tensor.numel(), 0.0);
    sgd_step(params, st, 0.05);
    NoGradGuard guard;
    EXPECT_LT(loss().item(), before);
  }
}
