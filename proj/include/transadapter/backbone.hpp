#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "transadapter/ada_attention.hpp"
#include "transadapter/cft.hpp"
#include "transadapter/gdd.hpp"

namespace transadapter {

/// Images (B, H, W, 3) -> patch vectors (B, tokens, p*p*3), each patch
/// flattened in (row, col, channel) order.
inline Tensor patchify(const Tensor &images, const BackboneConfig &cfg) {
  const auto &s = images.shape();
  if (s.size() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != 3)
    throw DimensionError("patch_embed: expected (batch," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + ",3) images, got " + shape_str(s));
  const std::size_t B = s[0], H = s[1], W = s[2], p = cfg.patch_size, g = cfg.grid();
  std::vector<std::size_t> index;
  index.reserve(images.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t pr = 0; pr < g; ++pr)
      for (std::size_t pc = 0; pc < g; ++pc)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x)
            for (std::size_t ch = 0; ch < 3; ++ch)
              index.push_back(((b * H + pr * p + y) * W + pc * p + x) * 3 + ch);
  return gather(images, {B, g * g, p * p * 3}, std::move(index));
}

inline FeatureMap patch_embed(const Linear &proj, const Tensor &images, const BackboneConfig &cfg,
                              Stream stream) {
  return FeatureMap{proj(patchify(images, cfg)), cfg.grid(), cfg.grid(), stream};
}

/// target + fc2(relu(fc1(target))), per token.
inline FeatureMap feature_correction(const TwoLayerMlp &mlp, const FeatureMap &target) {
  if (target.stream != Stream::target)
    throw ContractError("feature_correction applies to target-stream features only");
  return FeatureMap{add(target.data, mlp(target.data)), target.rows, target.cols, target.stream};
}

/// Mean over tokens, then a linear map to class logits.
inline Tensor classifier_head(const Linear &head, const FeatureMap &f) {
  return head(mean_axis(f.data, 1));
}

struct BackboneBlock {
  TwoLayerMlp correction;
  MadaBlockParams mada;
};

/// Shared-weight dual-stream backbone plus the adaptation modules that hang
/// off it.
struct TransAdapterModel {
  BackboneConfig config;
  Linear patch;
  std::vector<BackboneBlock> blocks;
  Linear head;
  CftParams cft;
  GddParams gdd_attention; // token-level, feeds the entropy reweighting
  GddParams gdd_local;     // sample-level, local tap
  GddParams gdd_global;    // sample-level, global tap

  static TransAdapterModel make(const BackboneConfig &cfg, std::uint64_t seed,
                                GrlPlacement grl = GrlPlacement::before_stack) {
    cfg.validate();
    Rng rng = derive_rng(seed, {0x1a1b});
    TransAdapterModel m;
    m.config = cfg;
    const std::size_t C = cfg.embed_dim;
    m.patch = Linear::make(cfg.patch_features(), C, rng);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      m.blocks.push_back({TwoLayerMlp::make(C, C, C, rng), MadaBlockParams::make(C, cfg.heads, rng)});
      // Correction starts as the identity. It only trains when a target stream
      // runs, yet evaluation on target data always applies it.
      fill(m.blocks.back().correction.fc2.weight, 0.0);
    }
    m.head = Linear::make(C, cfg.num_classes, rng);
    m.cft = CftParams::make(C, rng);
    GddConfig gc = GddConfig::for_channels(C);
    gc.grl = grl;
    m.gdd_attention = GddParams::make(gc, rng);
    m.gdd_local = GddParams::make(gc, rng);
    m.gdd_global = GddParams::make(gc, rng);
    return m;
  }

  WindowGeometry geometry() const {
    return {config.grid(), config.grid(), config.window, config.shift};
  }

  ParameterList parameters() const {
    ParameterList out;
    patch.collect(out, "patch_embed");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string prefix = "blocks." + std::to_string(i);
      blocks[i].correction.collect(out, prefix + ".correction");
      blocks[i].mada.collect(out, prefix + ".mada");
    }
    head.collect(out, "head");
    cft.collect(out, "cft");
    gdd_attention.collect(out, "gdd_attention");
    gdd_local.collect(out, "gdd_local");
    gdd_global.collect(out, "gdd_global");
    return out;
  }

  void zero_grad() const {
    for (auto &p : parameters())
      Tensor(p.tensor).zero_grad();
  }
};

struct DualForwardOptions {
  std::optional<std::size_t> cft_block;
  bool entropy_reweighting = false;
};

struct DualForward {
  std::vector<FeatureMap> source_blocks; // output of each block
  std::vector<FeatureMap> target_blocks; // after correction, attention and any CFT
  Tensor source_logits;
  Tensor target_logits;
  // Token discriminator output per (block, branch), source tokens first along
  // axis 1; empty without entropy reweighting.
  std::vector<Tensor> attention_probs;
};

namespace detail {
/// The discriminator sees detached keys and h is detached from it, so the
/// weights steer attention without carrying task gradient. Its reversal layer
/// would otherwise push the backbone against the task loss through h.
inline std::pair<EntropyWeights, EntropyWeights> key_entropies(const GddParams &gdd, const Tensor &ks,
                                                               const Tensor &kt, std::uint64_t provenance,
                                                               std::vector<Tensor> &probs_out) {
  const std::size_t n = ks.dim(1);
  Tensor probs = gdd_forward(gdd, concat({detach(ks), detach(kt)}, 1));
  probs_out.push_back(probs);
  Tensor fixed = detach(probs);
  return {entropy_from_domain_probs(slice(fixed, 1, 0, n), provenance),
          entropy_from_domain_probs(slice(fixed, 1, n, 2 * n), provenance)};
}
} // namespace detail

inline DualForward forward_dual(const TransAdapterModel &m, const Tensor &src, const Tensor &tgt,
                                const DualForwardOptions &opt = {}) {
  if (src.rank() != 4 || tgt.rank() != 4 || src.dim(0) != tgt.dim(0))
    throw ContractError("forward_dual: source and target batches differ: " + shape_str(src.shape()) +
                        " vs " + shape_str(tgt.shape()));
  if (opt.cft_block && *opt.cft_block >= m.blocks.size())
    throw ContractError("forward_dual: cft_block out of range");
  const auto g = m.geometry();
  FeatureMap zs = patch_embed(m.patch, src, m.config, Stream::source);
  FeatureMap zt = patch_embed(m.patch, tgt, m.config, Stream::target);
  DualForward out;
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const auto &block = m.blocks[i];
    zt = feature_correction(block.correction, zt);
    MadaPrepared ps = mada_prepare(block.mada, zs, g);
    MadaPrepared pt = mada_prepare(block.mada, zt, g);
    if (opt.entropy_reweighting) {
      auto [hs, ht] = detail::key_entropies(m.gdd_attention, ps.keys, pt.keys, 2 * i, out.attention_probs);
      auto [hss, hts] =
          detail::key_entropies(m.gdd_attention, ps.keys_shift, pt.keys_shift, 2 * i + 1, out.attention_probs);
      zs = mada_attend(block.mada, ps, g, &hs, &hss);
      zt = mada_attend(block.mada, pt, g, &ht, &hts);
    } else {
      zs = mada_attend(block.mada, ps, g);
      zt = mada_attend(block.mada, pt, g);
    }
    if (opt.cft_block && *opt.cft_block == i)
      zt.data = cross_feature_transform(zs.data, zt.data, m.cft);
    out.source_blocks.push_back(zs);
    out.target_blocks.push_back(zt);
  }
  out.source_logits = classifier_head(m.head, zs);
  out.target_logits = classifier_head(m.head, zt);
  return out;
}

struct SingleForward {
  std::vector<FeatureMap> blocks;
  Tensor logits;
};

/// One stream with identity reweighting; the target stream keeps its
/// feature correction.
inline SingleForward forward_single(const TransAdapterModel &m, const Tensor &images, Stream stream) {
  const auto g = m.geometry();
  FeatureMap z = patch_embed(m.patch, images, m.config, stream);
  SingleForward out;
  for (const auto &block : m.blocks) {
    if (stream == Stream::target)
      z = feature_correction(block.correction, z);
    z = mada_block(block.mada, z, g);
    out.blocks.push_back(z);
  }
  out.logits = classifier_head(m.head, z);
  return out;
}

} // namespace transadapter
