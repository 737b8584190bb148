#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace transadapter;
using testutil::max_abs_diff;
using testutil::t;

namespace {

FeatureMap grid_map(std::size_t batch, std::size_t rows, std::size_t cols, std::size_t channels,
                    std::uint64_t seed) {
  Rng rng = derive_rng(seed, {21});
  return FeatureMap{testutil::random({batch, rows * cols, channels}, rng), rows, cols, Stream::source};
}

BackboneConfig small_backbone(std::size_t depth = 2) {
  BackboneConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.embed_dim = 8;
  c.depth = depth;
  c.heads = 2;
  c.window = 2;
  c.shift = 1;
  c.num_classes = 3;
  return c;
}

Tensor random_images(std::size_t n, std::size_t size, std::uint64_t seed) {
  Rng rng = derive_rng(seed, {22});
  return testutil::random({n, size, size, 3}, rng, 0.0, 1.0);
}

void zero(Linear &l) {
  fill(l.weight, 0.0);
  if (l.bias.defined())
    fill(l.bias, 0.0);
}

} // namespace

TEST(PatchEmbed, TokenCount) {
  BackboneConfig c;
  Rng rng = derive_rng(1, {23});
  Linear proj = Linear::make(c.patch_features(), c.embed_dim, rng);
  FeatureMap f = patch_embed(proj, random_images(2, 32, 1), c, Stream::source);
  EXPECT_EQ(f.tokens(), 64u);
  EXPECT_EQ(f.rows, 8u);
  EXPECT_EQ(f.data.shape(), (Shape{2, 64, c.embed_dim}));
}

TEST(PatchEmbed, ZeroImageZeroBiasGivesZeroFeatures) {
  BackboneConfig c;
  Rng rng = derive_rng(2, {23});
  Linear proj = Linear::make(c.patch_features(), c.embed_dim, rng);
  FeatureMap f = patch_embed(proj, Tensor::zeros({1, 32, 32, 3}), c, Stream::source);
  for (double v : f.data.values())
    EXPECT_EQ(v, 0.0);
}

TEST(PatchEmbed, OneHotPixelSelectsProjectionRow) {
  BackboneConfig c;
  Rng rng = derive_rng(3, {23});
  Linear proj = Linear::make(c.patch_features(), c.embed_dim, rng);
  const std::size_t y = 13, x = 6, ch = 2;
  Tensor img = Tensor::zeros({1, 32, 32, 3});
  img.values()[(y * 32 + x) * 3 + ch] = 1.0;
  FeatureMap f = patch_embed(proj, img, c, Stream::source);
  const std::size_t token = (y / 4) * 8 + x / 4;
  const std::size_t row = ((y % 4) * 4 + x % 4) * 3 + ch;
  for (std::size_t t2 = 0; t2 < 64; ++t2)
    for (std::size_t d = 0; d < c.embed_dim; ++d) {
      const double expected = t2 == token ? proj.weight.at({row, d}) : 0.0;
      EXPECT_EQ(f.data.at({0, t2, d}), expected);
    }
}

TEST(PatchEmbed, WrongImageShapeThrows) {
  BackboneConfig c;
  Rng rng = derive_rng(4, {23});
  Linear proj = Linear::make(c.patch_features(), c.embed_dim, rng);
  EXPECT_THROW(patch_embed(proj, Tensor::zeros({1, 16, 16, 3}), c, Stream::source), DimensionError);
}

TEST(WindowPartition, CountsAndShape) {
  FeatureMap f = grid_map(1, 8, 8, 3, 1);
  Tensor w = window_partition(f, 4);
  EXPECT_EQ(w.shape(), (Shape{4, 16, 3}));
}

TEST(WindowPartition, TokenLandsInExpectedWindowSlot) {
  FeatureMap f{Tensor::zeros({1, 64, 1}), 8, 8, Stream::source};
  for (std::size_t i = 0; i < 64; ++i)
    f.data.values()[i] = static_cast<double>(i);
  Tensor w = window_partition(f, 4);
  // (row 5, col 2): window (1,0) is the third row-major window, slot (1,2).
  EXPECT_EQ(w.at({2, 1 * 4 + 2, 0}), 5.0 * 8 + 2);
}

TEST(WindowPartition, RoundtripIsBitwiseForAnyShift) {
  for (long long shift : {0LL, 1LL, 2LL, 3LL, -1LL}) {
    FeatureMap f = grid_map(2, 8, 8, 5, 2 + shift);
    FeatureMap back = window_reverse(partition_windows(f, 4, shift), 8, 8, 4, f.stream, shift);
    EXPECT_EQ(back.data.values(), f.data.values()) << "shift " << shift;
    EXPECT_EQ(back.data.shape(), f.data.shape());
  }
}

TEST(WindowPartition, NonDividingWindowThrows) {
  EXPECT_THROW(window_partition(grid_map(1, 6, 6, 2, 3), 4), DimensionError);
}

TEST(CyclicShift, ZeroIsIdentity) {
  FeatureMap f = grid_map(2, 4, 4, 3, 4);
  EXPECT_EQ(cyclic_shift(f, 0).data.values(), f.data.values());
}

TEST(CyclicShift, ShiftThenUnshiftIsBitwiseIdentity) {
  for (long long s : {1LL, 2LL, 3LL, 5LL}) {
    FeatureMap f = grid_map(2, 4, 4, 3, 5 + s);
    EXPECT_EQ(cyclic_shift(cyclic_shift(f, s), -s).data.values(), f.data.values());
  }
}

TEST(CyclicShift, InverseRollMovesOriginToTwoTwo) {
  FeatureMap f{Tensor::zeros({1, 16, 1}), 4, 4, Stream::source};
  f.data.values()[0] = 1.0;
  FeatureMap g = cyclic_shift(f, -2);
  EXPECT_EQ(g.data.at({0, 2 * 4 + 2, 0}), 1.0);
  EXPECT_EQ(sum(g.data).item(), 1.0);
}

TEST(CyclicShift, SplitHeadsMatchesRollThenPartition) {
  FeatureMap f = grid_map(2, 4, 4, 4, 6);
  Tensor direct = split_window_heads(f.data, 4, 4, 2, 1, 1);
  Tensor via_roll = window_partition(cyclic_shift(f, 1), 2);
  EXPECT_EQ(direct.values(), via_roll.values());
  EXPECT_EQ(merge_window_heads(split_window_heads(f.data, 4, 4, 2, 2, 1), 4, 4, 2, 1).values(), f.data.values());
}

TEST(FeatureCorrection, ZeroWeightsIsIdentity) {
  Rng rng = derive_rng(1, {24});
  TwoLayerMlp mlp = TwoLayerMlp::make(3, 3, 3, rng);
  zero(mlp.fc1);
  zero(mlp.fc2);
  FeatureMap f = grid_map(2, 2, 2, 3, 7);
  f.stream = Stream::target;
  FeatureMap g = feature_correction(mlp, f);
  EXPECT_EQ(g.data.values(), f.data.values());
  EXPECT_EQ(g.data.shape(), f.data.shape());
}

TEST(FeatureCorrection, ScalarHandCase) {
  TwoLayerMlp mlp{{t({1, 1}, {1}), t({1}, {0})}, {t({1, 1}, {2}), t({1}, {0})}};
  FeatureMap f{t({1, 1, 1}, {3}), 1, 1, Stream::target};
  EXPECT_EQ(feature_correction(mlp, f).data.item(), 9.0);
}

TEST(FeatureCorrection, SourceStreamIsRejected) {
  Rng rng = derive_rng(2, {24});
  TwoLayerMlp mlp = TwoLayerMlp::make(3, 3, 3, rng);
  EXPECT_THROW(feature_correction(mlp, grid_map(1, 2, 2, 3, 8)), ContractError);
}

TEST(ClassifierHead, EqualTokensPoolToSharedVector) {
  Rng rng = derive_rng(3, {24});
  Linear head = Linear::make(2, 3, rng);
  FeatureMap f{t({1, 3, 2}, {0.5, -1, 0.5, -1, 0.5, -1}), 1, 3, Stream::source};
  Tensor expected = head(t({1, 2}, {0.5, -1}));
  EXPECT_LT(max_abs_diff(classifier_head(head, f), expected), 1e-15);
}

TEST(ClassifierHead, ZeroWeightsGiveBias) {
  Linear head{Tensor::zeros({2, 3}), t({3}, {0.1, -0.2, 0.3})};
  FeatureMap f = grid_map(4, 2, 2, 2, 9);
  Tensor logits = classifier_head(head, f);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_EQ(logits.at({b, k}), head.bias[k]);
}

TEST(ClassifierHead, TwoTokenHandCase) {
  Linear head{t({1, 1}, {1}), t({1}, {0})};
  FeatureMap f{t({1, 2, 1}, {1, 3}), 1, 2, Stream::source};
  EXPECT_EQ(classifier_head(head, f).item(), 2.0);
}

TEST(ForwardDual, IdenticalInputsWithZeroCorrectionMatchAcrossStreams) {
  TransAdapterModel m = TransAdapterModel::make(small_backbone(), 5);
  for (auto &b : m.blocks) {
    zero(b.correction.fc1);
    zero(b.correction.fc2);
  }
  Tensor imgs = random_images(2, 16, 3);
  DualForward f = forward_dual(m, imgs, imgs);
  for (std::size_t i = 0; i < m.blocks.size(); ++i)
    EXPECT_EQ(f.source_blocks[i].data.values(), f.target_blocks[i].data.values());
  EXPECT_EQ(f.source_logits.values(), f.target_logits.values());
}

TEST(ForwardDual, WithoutCftTargetIgnoresSource) {
  TransAdapterModel m = TransAdapterModel::make(small_backbone(), 6);
  Tensor tgt = random_images(2, 16, 4);
  DualForward a = forward_dual(m, random_images(2, 16, 5), tgt);
  DualForward b = forward_dual(m, random_images(2, 16, 6), tgt);
  for (std::size_t i = 0; i < m.blocks.size(); ++i)
    EXPECT_EQ(a.target_blocks[i].data.values(), b.target_blocks[i].data.values());
  EXPECT_NE(a.source_logits.values(), b.source_logits.values());

  DualForwardOptions opt;
  opt.cft_block = 0;
  DualForward c = forward_dual(m, random_images(2, 16, 5), tgt, opt);
  DualForward d = forward_dual(m, random_images(2, 16, 6), tgt, opt);
  EXPECT_NE(c.target_logits.values(), d.target_logits.values());
}

TEST(ForwardDual, ZeroAttentionReducesToPerTokenMlpOracle) {
  TransAdapterModel m = TransAdapterModel::make(small_backbone(2), 7);
  for (auto &b : m.blocks)
    for (Tensor *w : {&b.mada.attn.w_q, &b.mada.attn.w_k, &b.mada.attn.w_v, &b.mada.attn.w_q_shift,
                      &b.mada.attn.w_k_shift, &b.mada.attn.w_v_shift})
      fill(*w, 0.0);
  Rng rng = derive_rng(8, {25});
  fill(m.head.bias, 0.0);
  for (auto &v : m.head.bias.values())
    v = uniform01(rng);
  Tensor imgs = random_images(2, 16, 7);
  DualForward f = forward_dual(m, imgs, imgs);

  // Hand pipeline: residual MLP per token, no attention contribution.
  Tensor z = m.patch(patchify(imgs, m.config));
  for (const auto &b : m.blocks)
    z = add(z, b.mada.mlp(b.mada.norm2(z)));
  Tensor expected = m.head(mean_axis(z, 1));
  EXPECT_LT(max_abs_diff(f.source_logits, expected), 1e-12);

  // Degenerate embedding as well: logits collapse to the head bias.
  fill(m.patch.weight, 0.0);
  DualForward g = forward_dual(m, imgs, imgs);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 3; ++k)
      EXPECT_NEAR(g.source_logits.at({b, k}), m.head.bias[k], 1e-15);
}

TEST(ForwardDual, OutputShapes) {
  TransAdapterModel m = TransAdapterModel::make(small_backbone(3), 8);
  DualForward f = forward_dual(m, random_images(3, 16, 8), random_images(3, 16, 9));
  ASSERT_EQ(f.source_blocks.size(), 3u);
  EXPECT_EQ(f.target_blocks[2].data.shape(), (Shape{3, 16, 8}));
  EXPECT_EQ(f.source_logits.shape(), (Shape{3, 3}));
  EXPECT_THROW(forward_dual(m, random_images(3, 16, 8), random_images(2, 16, 9)), ContractError);
}

TEST(ForwardSingle, SourceStreamMatchesDualSourceStream) {
  TransAdapterModel m = TransAdapterModel::make(small_backbone(), 9);
  Tensor imgs = random_images(2, 16, 10);
  SingleForward s = forward_single(m, imgs, Stream::source);
  DualForward d = forward_dual(m, imgs, random_images(2, 16, 11));
  EXPECT_EQ(s.logits.values(), d.source_logits.values());
  SingleForward t2 = forward_single(m, imgs, Stream::target);
  DualForward d2 = forward_dual(m, random_images(2, 16, 12), imgs);
  EXPECT_EQ(t2.logits.values(), d2.target_logits.values());
}

TEST(BackboneConfigCheck, RejectsInconsistentGeometry) {
  BackboneConfig c = small_backbone();
  c.window = 3;
  EXPECT_THROW(c.validate(), ContractError);
  c = small_backbone();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ContractError);
}
