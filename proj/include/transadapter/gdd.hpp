#pragma once

#include <cmath>
#include <string>

#include "transadapter/layers.hpp"

namespace transadapter {

inline constexpr double kAdjacencyEps = 1e-8;

/// Where the gradient reversal sits in the discriminator.
enum class GrlPlacement {
  before_stack, ///< on the node features, so the whole stack trains adversarially
  after_stack,  ///< between the last graph convolution and the domain head
};

struct AdjacencyMatrix {
  Tensor a; // (.., m, m)
  bool normalized = false;
};

struct GddConfig {
  std::size_t in_dim = 32;
  std::size_t proj_dim = 32;
  std::size_t hidden = 32;
  std::size_t hidden2 = 16;
  std::size_t hidden3 = 16;
  double grl_lambda = 1.0;
  GrlPlacement grl = GrlPlacement::before_stack;

  static GddConfig for_channels(std::size_t channels) {
    GddConfig c;
    c.in_dim = c.proj_dim = c.hidden = channels;
    c.hidden2 = c.hidden3 = channels / 2;
    return c;
  }
};

struct GddParams {
  GddConfig config;
  Tensor proj; // (in_dim, proj_dim)
  Tensor w1;   // (proj_dim, hidden)
  Tensor w2;   // (hidden / 2, hidden2)
  Tensor w3;   // (hidden2, hidden3)
  Linear head; // hidden3 -> 1

  static GddParams make(const GddConfig &cfg, Rng &rng) {
    if (cfg.hidden % 2 != 0)
      throw ContractError("GddConfig: hidden width must be even for pooling");
    if (cfg.grl_lambda < 0.0)
      throw ContractError("GddConfig: grl_lambda must be nonnegative");
    GddParams p;
    p.config = cfg;
    // With the 0.02 default the four-layer stack starts within 1e-7 of 0.5
    // and its gradients vanish.
    p.proj = trunc_normal_param({cfg.in_dim, cfg.proj_dim}, rng, fan_in_std(cfg.in_dim, 1.0));
    p.w1 = trunc_normal_param({cfg.proj_dim, cfg.hidden}, rng, fan_in_std(cfg.proj_dim, 2.0));
    p.w2 = trunc_normal_param({cfg.hidden / 2, cfg.hidden2}, rng, fan_in_std(cfg.hidden / 2, 2.0));
    p.w3 = trunc_normal_param({cfg.hidden2, cfg.hidden3}, rng, fan_in_std(cfg.hidden2, 2.0));
    p.head.weight = trunc_normal_param({cfg.hidden3, 1}, rng, fan_in_std(cfg.hidden3, 1.0));
    p.head.bias = Tensor::zeros({1}, true);
    return p;
  }

  void collect(ParameterList &out, const std::string &prefix) const {
    out.push_back({prefix + ".proj", proj});
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".w2", w2});
    out.push_back({prefix + ".w3", w3});
    head.collect(out, prefix + ".head");
  }
};

/// Cosine similarity between every pair of rows of already-projected node
/// features z: (.., m, d) -> (.., m, m). Norms are floored at 1e-8 and the
/// result clamped to [-1,1], which rounding can overshoot on the diagonal.
inline AdjacencyMatrix cosine_adjacency(const Tensor &z) {
  if (z.rank() < 2)
    throw DimensionError("cosine_adjacency needs (.., m, d), got " + shape_str(z.shape()));
  Tensor norms = clamp_min(sqrt(sum_axis(mul(z, z), z.rank() - 1, true)), kAdjacencyEps);
  Tensor unit = div(z, norms);
  return {clamp(matmul(unit, transpose(unit)), -1.0, 1.0), false};
}

/// a[i,j] = <P x_i, P x_j> / (|P x_i| |P x_j|)
inline AdjacencyMatrix build_adjacency(const Tensor &x, const Tensor &proj) {
  return cosine_adjacency(linear(x, proj));
}

/// Clamps negative similarities to zero, then D^-1/2 A D^-1/2 with degrees
/// floored at 1e-8.
inline AdjacencyMatrix normalize_adjacency(const AdjacencyMatrix &adj) {
  const Tensor &a = adj.a;
  if (a.rank() < 2 || a.dim(a.rank() - 1) != a.dim(a.rank() - 2))
    throw DimensionError("normalize_adjacency: not square " + shape_str(a.shape()));
  Tensor clamped = relu(a);
  Tensor degree = clamp_min(sum_axis(clamped, a.rank() - 1, true), kAdjacencyEps);
  Tensor inv_sqrt = pow_scalar(degree, -0.5);
  return {mul(mul(clamped, inv_sqrt), transpose(inv_sqrt)), true};
}

/// relu(A_hat x W)
inline Tensor graph_conv(const Tensor &x, const AdjacencyMatrix &adj, const Tensor &weight) {
  if (adj.a.rank() != x.rank() || adj.a.shape().back() != x.dim(x.rank() - 2))
    throw DimensionError("graph_conv: adjacency " + shape_str(adj.a.shape()) + " vs nodes " +
                         shape_str(x.shape()));
  return relu(matmul(adj.a, linear(x, weight)));
}

/// Feature-axis max pooling with width-2 windows; node count is preserved.
inline Tensor pool_halve(const Tensor &x) { return pairwise_max_pool(x); }

struct GddOutput {
  Tensor probs;        // (.., m) domain probability (1 = source)
  AdjacencyMatrix adjacency; // normalized
};

/// Nodes (.., m, c), source nodes first. Returns per-node source probability.
inline GddOutput gdd_forward_full(const GddParams &p, const Tensor &nodes) {
  const auto &cfg = p.config;
  if (nodes.rank() < 2 || nodes.shape().back() != cfg.in_dim)
    throw DimensionError("gdd_forward: nodes " + shape_str(nodes.shape()) + " expected last extent " +
                         std::to_string(cfg.in_dim));
  Tensor x = cfg.grl == GrlPlacement::before_stack ? grl(nodes, cfg.grl_lambda) : nodes;
  Tensor z = linear(x, p.proj);
  AdjacencyMatrix adj = normalize_adjacency(cosine_adjacency(z));
  Tensor h = graph_conv(z, adj, p.w1);
  h = pool_halve(h);
  h = graph_conv(h, adj, p.w2);
  h = graph_conv(h, adj, p.w3);
  if (cfg.grl == GrlPlacement::after_stack)
    h = grl(h, cfg.grl_lambda);
  Tensor logits = p.head(h); // (.., m, 1)
  Shape s = logits.shape();
  s.pop_back();
  return {sigmoid(reshape(logits, s)), adj};
}

inline Tensor gdd_forward(const GddParams &p, const Tensor &nodes) {
  return gdd_forward_full(p, nodes).probs;
}

} // namespace transadapter
