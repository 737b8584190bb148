#pragma once

#include <string>
#include <vector>

#include "transadapter/ops.hpp"
#include "transadapter/random.hpp"

namespace transadapter {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered (name, tensor) pairs; order defines checkpoint layout.
using ParameterList = std::vector<NamedTensor>;

struct Linear {
  Tensor weight; // (in, out)
  Tensor bias;   // (out), may be undefined

  static Linear make(std::size_t in, std::size_t out, Rng &rng, bool with_bias = true) {
    Linear l;
    l.weight = trunc_normal_param({in, out}, rng, fan_in_std(in));
    if (with_bias)
      l.bias = Tensor::zeros({out}, true);
    return l;
  }

  Tensor operator()(const Tensor &x) const {
    return bias.defined() ? linear(x, weight, bias) : linear(x, weight);
  }

  void collect(ParameterList &out, const std::string &prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined())
      out.push_back({prefix + ".bias", bias});
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm make(std::size_t channels) {
    return {Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true)};
  }

  Tensor operator()(const Tensor &x) const { return layer_norm(x, gain, bias); }

  void collect(ParameterList &out, const std::string &prefix) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
  }
};

/// fc2(relu(fc1(x)))
struct TwoLayerMlp {
  Linear fc1;
  Linear fc2;

  static TwoLayerMlp make(std::size_t in, std::size_t hidden, std::size_t out, Rng &rng) {
    return {Linear::make(in, hidden, rng), Linear::make(hidden, out, rng)};
  }

  Tensor operator()(const Tensor &x) const { return fc2(relu(fc1(x))); }

  void collect(ParameterList &out, const std::string &prefix) const {
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }
};

inline void fill(Tensor &t, double value) {
  for (auto &v : t.values())
    v = value;
}

} // namespace transadapter
