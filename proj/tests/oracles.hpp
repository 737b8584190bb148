#pragma once

#include <cmath>
#include <vector>

#include "transadapter/transadapter.hpp"

namespace oracles {

using namespace transadapter;

// Straight-line reference: one window covering the whole grid, one head,
// identity reweighting, no shift. Every step is an explicit loop.
inline std::vector<double> brute_force_block(const MadaBlockParams &p, const std::vector<double> &z,
                                             std::size_t n, std::size_t c) {
  auto ln = [&](const std::vector<double> &x, const Tensor &gain, const Tensor &bias) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < n; ++i) {
      double mu = 0.0, var = 0.0;
      for (std::size_t j = 0; j < c; ++j)
        mu += x[i * c + j];
      mu /= double(c);
      for (std::size_t j = 0; j < c; ++j)
        var += (x[i * c + j] - mu) * (x[i * c + j] - mu);
      var /= double(c);
      for (std::size_t j = 0; j < c; ++j)
        out[i * c + j] = (x[i * c + j] - mu) / std::sqrt(var + kLayerNormEps) * gain[j] + bias[j];
    }
    return out;
  };
  auto proj = [&](const std::vector<double> &x, const Tensor &w, std::size_t in, std::size_t out_dim,
                  const Tensor *bias) {
    std::vector<double> out(n * out_dim, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out_dim; ++o) {
        double s = bias ? (*bias)[o] : 0.0;
        for (std::size_t j = 0; j < in; ++j)
          s += x[i * in + j] * w.at({j, o});
        out[i * out_dim + o] = s;
      }
    return out;
  };
  const auto x = ln(z, p.norm1.gain, p.norm1.bias);
  const auto q = proj(x, p.attn.w_q, c, c, nullptr);
  const auto k = proj(x, p.attn.w_k, c, c, nullptr);
  const auto v = proj(x, p.attn.w_v, c, c, nullptr);
  const auto ks = proj(x, p.attn.w_k_shift, c, c, nullptr);
  const auto vs = proj(x, p.attn.w_v_shift, c, c, nullptr);
  std::vector<double> zm = z;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> s(2 * n);
    for (std::size_t j = 0; j < n; ++j) {
      double a = 0.0, b = 0.0;
      for (std::size_t d = 0; d < c; ++d) {
        a += q[i * c + d] * k[j * c + d];
        b += q[i * c + d] * ks[j * c + d];
      }
      s[j] = a / std::sqrt(double(c));
      s[n + j] = b / std::sqrt(double(c));
    }
    double mx = s[0];
    for (double e : s)
      mx = std::max(mx, e);
    double total = 0.0;
    for (double &e : s)
      total += (e = std::exp(e - mx));
    for (std::size_t d = 0; d < c; ++d) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        acc += s[j] / total * v[j * c + d] + s[n + j] / total * vs[j * c + d];
      zm[i * c + d] += acc;
    }
  }
  const auto x2 = ln(zm, p.norm2.gain, p.norm2.bias);
  auto hidden = proj(x2, p.mlp.fc1.weight, c, 4 * c, &p.mlp.fc1.bias);
  for (double &h : hidden)
    h = std::max(h, 0.0);
  const auto mlp = proj(hidden, p.mlp.fc2.weight, 4 * c, c, &p.mlp.fc2.bias);
  std::vector<double> out(zm.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = zm[i] + mlp[i];
  return out;
}

inline MadaBlockParams random_block(std::size_t c, std::size_t heads, std::uint64_t seed) {
  Rng rng = derive_rng(seed, {31});
  MadaBlockParams p = MadaBlockParams::make(c, heads, rng);
  ParameterList params;
  p.collect(params, "b");
  for (auto &nt : params)
    for (auto &v : nt.tensor.values())
      v = 0.6 * (2.0 * uniform01(rng) - 1.0);
  return p;
}

} // namespace oracles
