#pragma once

#include <string>

#include "transadapter/layers.hpp"

namespace transadapter {

struct CftParams {
  Tensor f_proj; // (C, C) applied to source tokens
  Tensor g_proj; // (C, C) applied to target tokens
  Tensor gamma;  // (1) gate logit

  static CftParams make(std::size_t channels, Rng &rng) {
    CftParams p;
    p.f_proj = trunc_normal_param({channels, channels}, rng, fan_in_std(channels));
    p.g_proj = trunc_normal_param({channels, channels}, rng, fan_in_std(channels));
    p.gamma = Tensor::zeros({1}, true);
    return p;
  }

  void collect(ParameterList &out, const std::string &prefix) const {
    out.push_back({prefix + ".f_proj", f_proj});
    out.push_back({prefix + ".g_proj", g_proj});
    out.push_back({prefix + ".gamma", gamma});
  }
};

struct CrossAttention {
  Tensor s2t;     // (.., n, c) target queries pulling source content
  Tensor t2s;     // (.., n, c) source queries pulling target content
  Tensor map_s2t; // (.., n, n)
  Tensor map_t2s; // (.., n, n)
};

inline CrossAttention cross_attention_features(const Tensor &xs, const Tensor &xt,
                                               const CftParams &p) {
  if (xs.shape() != xt.shape() || xs.rank() < 2)
    throw ContractError("cross_attention_features: token shapes differ " + shape_str(xs.shape()) +
                        " vs " + shape_str(xt.shape()));
  const std::size_t last = xs.rank() - 1;
  Tensor fs = linear(xs, p.f_proj);
  Tensor gt = linear(xt, p.g_proj);
  CrossAttention out;
  out.map_s2t = softmax(matmul(gt, transpose(fs)), last);
  out.map_t2s = softmax(matmul(fs, transpose(gt)), last);
  out.s2t = matmul(out.map_s2t, xs);
  out.t2s = matmul(out.map_t2s, xt);
  return out;
}

/// (1 - sigmoid(gamma)) * s2t + sigmoid(gamma) * t2s
inline Tensor gated_combine(const Tensor &s2t, const Tensor &t2s, const Tensor &gamma) {
  if (s2t.shape() != t2s.shape())
    throw DimensionError("gated_combine: " + shape_str(s2t.shape()) + " vs " +
                         shape_str(t2s.shape()));
  Tensor gate = reshape(sigmoid(gamma), Shape(s2t.rank(), 1));
  Tensor keep = add_scalar(neg(gate), 1.0);
  return add(mul(s2t, keep), mul(t2s, gate));
}

/// gate * (|s2t - t2s|^2 / c per token) + xt
inline Tensor cft_output(const Tensor &gating, const Tensor &s2t, const Tensor &t2s,
                         const Tensor &xt) {
  if (gating.shape() != xt.shape() || s2t.shape() != xt.shape() || t2s.shape() != xt.shape())
    throw DimensionError("cft_output: misaligned shapes");
  Tensor diff = sub(s2t, t2s);
  const std::size_t last = xt.rank() - 1;
  Tensor dist = scale(sum_axis(mul(diff, diff), last, true), 1.0 / static_cast<double>(xt.dim(last)));
  return add(mul(gating, dist), xt);
}

/// Full transform; returns the updated target tokens.
inline Tensor cross_feature_transform(const Tensor &xs, const Tensor &xt, const CftParams &p) {
  CrossAttention ca = cross_attention_features(xs, xt, p);
  Tensor gating = gated_combine(ca.s2t, ca.t2s, p.gamma);
  return cft_output(gating, ca.s2t, ca.t2s, xt);
}

/// Uniform block index in [0, depth).
inline std::size_t select_cft_block(std::size_t depth, Rng &rng) {
  if (depth == 0)
    throw ContractError("select_cft_block: depth must be positive");
  return uniform_index(rng, depth);
}

} // namespace transadapter
