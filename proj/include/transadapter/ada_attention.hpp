#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>

#include "transadapter/feature_map.hpp"
#include "transadapter/layers.hpp"

namespace transadapter {

/// Window-branch and shifted-branch projections, each (C, C).
struct AttentionProjections {
  Tensor w_q, w_k, w_v;
  Tensor w_q_shift, w_k_shift, w_v_shift;
  std::size_t heads = 1;

  static AttentionProjections make(std::size_t channels, std::size_t heads, Rng &rng) {
    if (heads == 0 || channels % heads != 0)
      throw ContractError("AttentionProjections: channels must be divisible by heads");
    AttentionProjections p;
    p.heads = heads;
    for (Tensor *t : {&p.w_q, &p.w_k, &p.w_v, &p.w_q_shift, &p.w_k_shift, &p.w_v_shift})
      *t = trunc_normal_param({channels, channels}, rng, fan_in_std(channels));
    return p;
  }

  void collect(ParameterList &out, const std::string &prefix) const {
    out.push_back({prefix + ".q", w_q});
    out.push_back({prefix + ".k", w_k});
    out.push_back({prefix + ".v", w_v});
    out.push_back({prefix + ".q_shift", w_q_shift});
    out.push_back({prefix + ".k_shift", w_k_shift});
    out.push_back({prefix + ".v_shift", w_v_shift});
  }
};

/// Per-key binary entropies of discriminator outputs, shape (groups, keys).
struct EntropyWeights {
  Tensor h;
  std::uint64_t provenance = 0;
};

inline EntropyWeights entropy_from_domain_probs(const Tensor &p, std::uint64_t provenance = 0) {
  return {binary_entropy(p), provenance};
}

/// Entropy rescaled so a fully confused discriminator (h = ln 2) leaves the
/// attention scores untouched.
inline Tensor attention_weights(const EntropyWeights &w) {
  return scale(w.h, 1.0 / std::numbers::ln2);
}

/// (q k^T / sqrt(d)) * h, with h broadcast along the query axis.
/// q, k: (G, heads.., n, d); h: (G, n) or already of rank q.rank().
inline Tensor reweight_scores(const Tensor &q, const Tensor &k, const Tensor *h = nullptr) {
  if (q.rank() < 2 || q.shape() != k.shape())
    throw DimensionError("reweight_scores: q " + shape_str(q.shape()) + " vs k " +
                         shape_str(k.shape()));
  const std::size_t n = k.dim(k.rank() - 2);
  const double d = static_cast<double>(q.shape().back());
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(d));
  if (!h)
    return scores;
  if (h->shape().back() != n || h->dim(0) != q.dim(0))
    throw ContractError("reweight_scores: entropy " + shape_str(h->shape()) +
                        " not aligned with keys " + shape_str(k.shape()));
  Tensor hb = *h;
  if (h->rank() != q.rank()) {
    if (h->rank() != 2)
      throw ContractError("reweight_scores: entropy must be (groups, keys)");
    Shape s(q.rank(), 1);
    s.front() = h->dim(0);
    s.back() = n;
    hb = reshape(*h, s);
  }
  return mul(scores, hb);
}

struct FusedAttention {
  Tensor output;    // (.., n, d)
  Tensor attention; // (.., n, 2n), rows sum to one
};

/// Softmax over the concatenated key axis of both branches, applied to the
/// stacked values.
inline FusedAttention mada_fuse(const Tensor &a, const Tensor &a_shift, const Tensor &v,
                                const Tensor &v_shift) {
  if (a.shape() != a_shift.shape() || v.shape() != v_shift.shape() || a.rank() != v.rank() ||
      a.shape().back() != v.dim(v.rank() - 2))
    throw DimensionError("mada_fuse: branch shapes " + shape_str(a.shape()) + "/" +
                         shape_str(a_shift.shape()) + " and values " + shape_str(v.shape()) + "/" +
                         shape_str(v_shift.shape()));
  const std::size_t r = a.rank();
  Tensor attn = softmax(concat({a, a_shift}, r - 1), r - 1);
  Tensor out = matmul(attn, concat({v, v_shift}, r - 2));
  return {out, attn};
}

struct MadaBlockParams {
  LayerNorm norm1;
  AttentionProjections attn;
  LayerNorm norm2;
  TwoLayerMlp mlp;

  static MadaBlockParams make(std::size_t channels, std::size_t heads, Rng &rng) {
    MadaBlockParams p;
    p.norm1 = LayerNorm::make(channels);
    p.attn = AttentionProjections::make(channels, heads, rng);
    p.norm2 = LayerNorm::make(channels);
    p.mlp = TwoLayerMlp::make(channels, 4 * channels, channels, rng);
    return p;
  }

  void collect(ParameterList &out, const std::string &prefix) const {
    norm1.collect(out, prefix + ".norm1");
    attn.collect(out, prefix + ".attn");
    norm2.collect(out, prefix + ".norm2");
    mlp.collect(out, prefix + ".mlp");
  }
};

struct WindowGeometry {
  std::size_t rows, cols, window, shift;
};

/// Per-stream projections computed from LN(z) ahead of attention.
struct MadaPrepared {
  FeatureMap input;
  Tensor q, k, v, k_shift, v_shift; // (windows, heads, n, d_head)
  Tensor keys;                      // (windows, n, C) window-branch keys
  Tensor keys_shift;                // (windows, n, C) shifted-branch keys, rolled layout
};

inline MadaPrepared mada_prepare(const MadaBlockParams &p, const FeatureMap &z,
                                 const WindowGeometry &g) {
  z.check();
  const auto shift = static_cast<long long>(g.shift);
  const std::size_t heads = p.attn.heads;
  Tensor normed = p.norm1(z.data);
  Tensor q = linear(normed, p.attn.w_q);
  Tensor k = linear(normed, p.attn.w_k);
  Tensor v = linear(normed, p.attn.w_v);
  Tensor ks = linear(normed, p.attn.w_k_shift);
  Tensor vs = linear(normed, p.attn.w_v_shift);
  MadaPrepared out;
  out.input = z;
  out.q = split_window_heads(q, g.rows, g.cols, g.window, heads, 0);
  out.k = split_window_heads(k, g.rows, g.cols, g.window, heads, 0);
  out.v = split_window_heads(v, g.rows, g.cols, g.window, heads, 0);
  out.k_shift = split_window_heads(ks, g.rows, g.cols, g.window, heads, shift);
  out.v_shift = split_window_heads(vs, g.rows, g.cols, g.window, heads, shift);
  out.keys = partition_windows(FeatureMap{k, g.rows, g.cols, z.stream}, g.window, 0);
  out.keys_shift = partition_windows(FeatureMap{ks, g.rows, g.cols, z.stream}, g.window, shift);
  return out;
}

/// Dual-branch attention plus the residual MLP. Window-branch queries score
/// against both the window keys and the shifted-window keys; the result is in
/// the query (unshifted) layout.
inline FeatureMap mada_attend(const MadaBlockParams &p, const MadaPrepared &prep,
                              const WindowGeometry &g, const EntropyWeights *h = nullptr,
                              const EntropyWeights *h_shift = nullptr,
                              Tensor *attention_out = nullptr) {
  std::optional<Tensor> w, ws;
  if (h)
    w = attention_weights(*h);
  if (h_shift)
    ws = attention_weights(*h_shift);
  Tensor a = reweight_scores(prep.q, prep.k, w ? &*w : nullptr);
  Tensor a_shift = reweight_scores(prep.q, prep.k_shift, ws ? &*ws : nullptr);
  FusedAttention fused = mada_fuse(a, a_shift, prep.v, prep.v_shift);
  if (attention_out)
    *attention_out = fused.attention;
  Tensor attended = merge_window_heads(fused.output, g.rows, g.cols, g.window, 0);
  Tensor z_mada = add(prep.input.data, attended);
  Tensor z_out = add(z_mada, p.mlp(p.norm2(z_mada)));
  return FeatureMap{z_out, prep.input.rows, prep.input.cols, prep.input.stream};
}

/// Pre-norm residual block. Without domain probabilities the reweighting is
/// the identity.
inline FeatureMap mada_block(const MadaBlockParams &p, const FeatureMap &z, const WindowGeometry &g,
                             const Tensor *domain_probs = nullptr,
                             const Tensor *domain_probs_shift = nullptr) {
  MadaPrepared prep = mada_prepare(p, z, g);
  std::optional<EntropyWeights> h, hs;
  if (domain_probs)
    h = entropy_from_domain_probs(*domain_probs);
  if (domain_probs_shift)
    hs = entropy_from_domain_probs(*domain_probs_shift);
  return mada_attend(p, prep, g, h ? &*h : nullptr, hs ? &*hs : nullptr);
}

} // namespace transadapter
