#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "transadapter/grad_check.hpp"
#include "transadapter/training.hpp"

namespace transadapter {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr std::size_t kGradSeeds = 20;

struct GradCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

struct GradCaseReport {
  std::string name;
  std::size_t seeds = 0;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  bool passed = false;
};

struct GradSuiteReport {
  std::vector<GradCaseReport> cases;
  double seconds = 0.0;
  bool passed() const {
    for (const auto &c : cases)
      if (!c.passed)
        return false;
    return !cases.empty();
  }
};

namespace gradsuite {

using Fn = std::function<Tensor(const std::vector<Tensor> &)>;

/// Checks the scalar probe sum(R * f(inputs)) for a fixed random R.
inline GradCheckResult check(const Fn &f, std::vector<Tensor> inputs, Rng &rng, double h,
                             std::size_t max_coords = 0) {
  Tensor shape_probe;
  {
    NoGradGuard guard;
    shape_probe = f(inputs);
  }
  Tensor weights = random_tensor(shape_probe.shape(), rng);
  for (auto &t : inputs)
    t.set_requires_grad(true);
  return grad_check_tensors([&] { return sum(mul(f(inputs), weights)); }, inputs, h, max_coords);
}

inline Tensor rnd(Shape s, Rng &rng, double lo = -1.0, double hi = 1.0) {
  return random_tensor(std::move(s), rng, lo, hi);
}

/// Replaces every parameter value with U(-scale, scale) so the check sees
/// non-trivial magnitudes.
inline void randomize(const ParameterList &params, Rng &rng, double scale = 0.5) {
  for (const auto &p : params) {
    Tensor t = p.tensor;
    for (auto &v : t.values())
      v = scale * (2.0 * uniform01(rng) - 1.0);
  }
}

inline std::vector<Tensor> tensors_of(const ParameterList &params) {
  std::vector<Tensor> out;
  for (const auto &p : params)
    out.push_back(p.tensor);
  return out;
}

/// Parameters plus extra inputs, checked jointly against a closure that reads
/// the parameters through captured structs.
inline GradCheckResult check_module(const std::function<Tensor(const std::vector<Tensor> &)> &f,
                                    const ParameterList &params, std::vector<Tensor> inputs, Rng &rng, double h,
                                    std::size_t max_coords = 0) {
  std::vector<Tensor> all = inputs;
  for (const auto &t : tensors_of(params))
    all.push_back(t);
  const std::size_t n_inputs = inputs.size();
  return check(
      [&](const std::vector<Tensor> &xs) {
        return f(std::vector<Tensor>(xs.begin(), xs.begin() + static_cast<std::ptrdiff_t>(n_inputs)));
      },
      all, rng, h, max_coords);
}

inline BackboneConfig tiny_backbone() {
  BackboneConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.embed_dim = 2;
  c.depth = 1;
  c.heads = 1;
  c.window = 2;
  c.shift = 1;
  c.num_classes = 2;
  return c;
}

} // namespace gradsuite

/// Every differentiable op and composite module. Reversal layers are made
/// transparent for all cases except "grl", which checks the exact sign flip.
inline std::vector<GradCase> gradient_cases(double h = 1e-5) {
  using namespace gradsuite;
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::function<GradCheckResult(Rng &)> body) {
    const std::uint64_t id = cases.size();
    cases.push_back({std::move(name), [body, id](std::uint64_t seed) {
                       Rng rng = derive_rng(seed, {0x67c, id});
                       TransparentGrlGuard transparent;
                       return body(rng);
                     }});
  };
  auto unary = [&](std::string name, std::function<Tensor(const Tensor &)> f, double lo, double hi) {
    add_case(std::move(name), [f, lo, hi, h](Rng &rng) {
      return check([&](const std::vector<Tensor> &x) { return f(x[0]); }, {rnd({3, 4}, rng, lo, hi)}, rng, h);
    });
  };
  auto binary = [&](std::string name, std::function<Tensor(const Tensor &, const Tensor &)> f, double lo,
                    double hi) {
    add_case(std::move(name), [f, lo, hi, h](Rng &rng) {
      return check([&](const std::vector<Tensor> &x) { return f(x[0], x[1]); },
                   {rnd({3, 1, 4}, rng), rnd({1, 2, 4}, rng, lo, hi)}, rng, h);
    });
  };

  binary("add", [](const Tensor &a, const Tensor &b) { return add(a, b); }, -1, 1);
  binary("sub", [](const Tensor &a, const Tensor &b) { return sub(a, b); }, -1, 1);
  binary("mul", [](const Tensor &a, const Tensor &b) { return mul(a, b); }, -1, 1);
  binary("div", [](const Tensor &a, const Tensor &b) { return div(a, b); }, 0.5, 2.0);
  unary("scale", [](const Tensor &x) { return scale(x, -1.7); }, -1, 1);
  unary("add_scalar", [](const Tensor &x) { return add_scalar(x, 0.3); }, -1, 1);
  unary("neg", [](const Tensor &x) { return neg(x); }, -1, 1);
  unary("relu", [](const Tensor &x) { return relu(x); }, -1, 1);
  unary("sigmoid", [](const Tensor &x) { return sigmoid(x); }, -3, 3);
  unary("log", [](const Tensor &x) { return log(x); }, 0.2, 3.0);
  unary("exp", [](const Tensor &x) { return exp(x); }, -2, 2);
  unary("sqrt", [](const Tensor &x) { return sqrt(x); }, 0.2, 3.0);
  unary("pow_scalar", [](const Tensor &x) { return pow_scalar(x, 2.5); }, 0.2, 2.0);
  unary("clamp", [](const Tensor &x) { return clamp(x, -0.5, 0.5); }, -1, 1);
  unary("clamp_min", [](const Tensor &x) { return clamp_min(x, 0.1); }, -1, 1);
  unary("binary_entropy", [](const Tensor &x) { return binary_entropy(x); }, 0.05, 0.95);
  unary("reshape", [](const Tensor &x) { return reshape(x, {2, 6}); }, -1, 1);
  unary("permute", [](const Tensor &x) { return permute(reshape(x, {2, 3, 2}), {2, 0, 1}); }, -1, 1);
  unary("transpose", [](const Tensor &x) { return transpose(x); }, -1, 1);
  unary("slice", [](const Tensor &x) { return slice(x, 1, 1, 3); }, -1, 1);
  unary("gather", [](const Tensor &x) { return gather(x, {5}, {0, 3, 3, 11, 7}); }, -1, 1);
  unary("sum", [](const Tensor &x) { return sum(x); }, -1, 1);
  unary("mean", [](const Tensor &x) { return mean(x); }, -1, 1);
  unary("sum_axis", [](const Tensor &x) { return sum_axis(x, 0, true); }, -1, 1);
  unary("mean_axis", [](const Tensor &x) { return mean_axis(x, 1); }, -1, 1);
  unary("softmax", [](const Tensor &x) { return softmax(x, 1); }, -2, 2);
  unary("log_softmax", [](const Tensor &x) { return log_softmax(x, 0); }, -2, 2);
  unary("pairwise_max_pool", [](const Tensor &x) { return pairwise_max_pool(x); }, -1, 1);

  add_case("grl", [h](Rng &rng) {
    // The forward pass is the identity, so the recorded backward must equal
    // -lambda times the finite-difference slope.
    TransparentGrlGuard outer;
    detail::grl_transparent_flag() = false;
    const double lambda = 0.25 + uniform01(rng);
    Tensor x = rnd({3, 4}, rng).set_requires_grad(true);
    Tensor weights = rnd({3, 4}, rng);
    auto f = [&] { return sum(mul(grl(x, lambda), weights)); };
    backward(f());
    GradCheckResult r;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double saved = x.data()[i];
      x.data()[i] = saved + h;
      const double fp = f().item();
      x.data()[i] = saved - h;
      const double fm = f().item();
      x.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      r.max_rel_error = std::max(r.max_rel_error, std::abs(x.grad()[i] + lambda * numeric) /
                                                      std::max(1.0, std::abs(x.grad()[i])));
      ++r.checked;
    }
    return r;
  });
  add_case("concat", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return concat({x[0], x[1]}, 1); },
                 {rnd({2, 3, 2}, rng), rnd({2, 1, 2}, rng)}, rng, h);
  });
  add_case("matmul", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return matmul(x[0], x[1]); },
                 {rnd({2, 1, 3, 4}, rng), rnd({1, 2, 4, 5}, rng)}, rng, h);
  });
  add_case("linear", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return linear(x[0], x[1], x[2]); },
                 {rnd({2, 3, 4}, rng), rnd({4, 5}, rng), rnd({5}, rng)}, rng, h);
  });
  add_case("layer_norm", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return layer_norm(x[0], x[1], x[2]); },
                 {rnd({3, 5}, rng, -2, 2), rnd({5}, rng), rnd({5}, rng)}, rng, h);
  });

  auto fm = [](const Tensor &x) { return FeatureMap{x, 4, 4, Stream::source}; };
  add_case("cyclic_shift", [h, fm](Rng &rng) {
    return check([&](const std::vector<Tensor> &x) { return cyclic_shift(fm(x[0]), 1).data; },
                 {rnd({1, 16, 2}, rng)}, rng, h);
  });
  add_case("partition_windows", [h, fm](Rng &rng) {
    return check([&](const std::vector<Tensor> &x) { return partition_windows(fm(x[0]), 2, 1); },
                 {rnd({1, 16, 2}, rng)}, rng, h);
  });
  add_case("window_heads", [h](Rng &rng) {
    return check(
        [](const std::vector<Tensor> &x) {
          return merge_window_heads(mul(split_window_heads(x[0], 4, 4, 2, 2, 1), split_window_heads(x[0], 4, 4, 2, 2, 0)),
                                    4, 4, 2, 0);
        },
        {rnd({1, 16, 4}, rng)}, rng, h);
  });

  add_case("reweight_scores", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return reweight_scores(x[0], x[1], &x[2]); },
                 {rnd({3, 2, 4, 2}, rng), rnd({3, 2, 4, 2}, rng), rnd({3, 4}, rng, 0.0, 1.0)}, rng, h);
  });
  add_case("mada_fuse", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return mada_fuse(x[0], x[1], x[2], x[3]).output; },
                 {rnd({2, 4, 4}, rng, -2, 2), rnd({2, 4, 4}, rng, -2, 2), rnd({2, 4, 3}, rng), rnd({2, 4, 3}, rng)},
                 rng, h);
  });
  add_case("mada_block", [h](Rng &rng) {
    MadaBlockParams p = MadaBlockParams::make(4, 2, rng);
    ParameterList params;
    p.collect(params, "mada");
    randomize(params, rng);
    const WindowGeometry g{2, 2, 2, 1};
    return check_module(
        [&](const std::vector<Tensor> &x) {
          return mada_block(p, FeatureMap{x[0], 2, 2, Stream::source}, g, &x[1], &x[2]).data;
        },
        params, {rnd({2, 4, 4}, rng), rnd({2, 4}, rng, 0.1, 0.9), rnd({2, 4}, rng, 0.1, 0.9)}, rng, h);
  });

  add_case("cosine_adjacency", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return cosine_adjacency(x[0]).a; }, {rnd({2, 5, 3}, rng)}, rng,
                 h);
  });
  add_case("normalize_adjacency", [h](Rng &rng) {
    return check(
        [](const std::vector<Tensor> &x) { return normalize_adjacency(cosine_adjacency(x[0])).a; },
        {rnd({5, 3}, rng, 0.1, 1.0)}, rng, h);
  });
  add_case("graph_conv", [h](Rng &rng) {
    return check(
        [](const std::vector<Tensor> &x) {
          return graph_conv(x[0], normalize_adjacency(cosine_adjacency(x[0])), x[1]);
        },
        {rnd({6, 4}, rng, 0.1, 1.0), rnd({4, 3}, rng)}, rng, h);
  });
  add_case("gdd_forward", [h](Rng &rng) {
    GddParams p = GddParams::make(GddConfig::for_channels(4), rng);
    ParameterList params;
    p.collect(params, "gdd");
    randomize(params, rng);
    return check_module([&](const std::vector<Tensor> &x) { return gdd_forward(p, x[0]); }, params,
                        {rnd({6, 4}, rng)}, rng, h);
  });

  add_case("gated_combine", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return gated_combine(x[0], x[1], x[2]); },
                 {rnd({2, 3}, rng), rnd({2, 3}, rng), rnd({1}, rng)}, rng, h);
  });
  add_case("cft_output", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return cft_output(x[0], x[1], x[2], x[3]); },
                 {rnd({2, 3}, rng), rnd({2, 3}, rng), rnd({2, 3}, rng), rnd({2, 3}, rng)}, rng, h);
  });
  add_case("cross_feature_transform", [h](Rng &rng) {
    CftParams p = CftParams::make(3, rng);
    ParameterList params;
    p.collect(params, "cft");
    randomize(params, rng);
    return check_module([&](const std::vector<Tensor> &x) { return cross_feature_transform(x[0], x[1], p); },
                        params, {rnd({2, 4, 3}, rng), rnd({2, 4, 3}, rng)}, rng, h);
  });

  add_case("cls_loss", [h](Rng &rng) {
    Tensor labels = softmax(rnd({3, 4}, rng, -2, 2), 1);
    return check([&](const std::vector<Tensor> &x) { return cls_loss(x[0], labels); }, {rnd({3, 4}, rng, -2, 2)},
                 rng, h);
  });
  add_case("binary_cross_entropy", [h](Rng &rng) {
    return check([](const std::vector<Tensor> &x) { return add(binary_cross_entropy(x[0], 1.0), binary_cross_entropy(x[0], 0.0)); },
                 {rnd({5}, rng, 0.05, 0.95)}, rng, h);
  });
  add_case("focal_loss", [h](Rng &rng) {
    const double gamma = 3.0 * uniform01(rng);
    return check(
        [gamma](const std::vector<Tensor> &x) { return add(focal_loss(x[0], 1.0, gamma), focal_loss(x[0], 0.0, gamma)); },
        {rnd({5}, rng, 0.05, 0.95)}, rng, h);
  });
  add_case("total_loss", [h](Rng &rng) {
    return check(
        [](const std::vector<Tensor> &x) {
          AdversarialLosses adv = adversarial_losses(x[0], x[1], x[2], x[3]);
          return total_loss(x[4], adv.local, adv.global);
        },
        {rnd({3}, rng, 0.05, 0.95), rnd({3}, rng, 0.05, 0.95), rnd({3}, rng, 0.05, 0.95), rnd({3}, rng, 0.05, 0.95),
         rnd({1}, rng)},
        rng, h);
  });

  add_case("patch_embed", [h](Rng &rng) {
    const BackboneConfig cfg = tiny_backbone();
    Linear proj = Linear::make(cfg.patch_features(), cfg.embed_dim, rng);
    ParameterList params;
    proj.collect(params, "patch");
    randomize(params, rng);
    return check_module(
        [&](const std::vector<Tensor> &x) { return patch_embed(proj, x[0], cfg, Stream::source).data; }, params,
        {rnd({1, 8, 8, 3}, rng, 0.0, 1.0)}, rng, h);
  });
  add_case("end_to_end", [h](Rng &rng) {
    TrainConfig cfg;
    cfg.backbone = tiny_backbone();
    cfg.local_tap = 1;
    cfg.batch_size = 2;
    cfg.seed = uniform_index(rng, 1u << 30);
    TransAdapterModel m = make_model(cfg);
    const ParameterList params = m.parameters();
    randomize(params, rng);
    DomainBatch batch;
    batch.source_images = rnd({2, 8, 8, 3}, rng, 0.0, 1.0);
    batch.target_images = rnd({2, 8, 8, 3}, rng, 0.0, 1.0);
    batch.source_labels = softmax(rnd({2, 2}, rng, -2, 2), 1);
    const std::uint64_t cft_seed = uniform_index(rng, 1u << 30);
    return grad_check_tensors(
        [&] {
          Rng r = derive_rng(cft_seed, {rng_stream::cft});
          return compute_losses(batch, m, cfg, r).total;
        },
        tensors_of(params), h);
  });
  add_case("attention_discriminator_loss", [h](Rng &rng) {
    GddParams g = GddParams::make(GddConfig::for_channels(4), rng);
    ParameterList params;
    g.collect(params, "g");
    randomize(params, rng);
    const std::vector<std::pair<Tensor, Tensor>> keys{{rnd({2, 3, 4}, rng), rnd({2, 3, 4}, rng)},
                                                      {rnd({2, 3, 4}, rng), rnd({2, 3, 4}, rng)}};
    return grad_check_tensors([&] { return attention_discriminator_loss(g, keys); }, tensors_of(params), h);
  });
  return cases;
}

/// Runs every case over `seeds` seeds (1..seeds). `filter` keeps cases whose
/// name contains it.
inline GradSuiteReport run_gradient_suite(std::size_t seeds = kGradSeeds, double tolerance = kGradTolerance,
                                          double h = 1e-5, const std::string &filter = "") {
  const auto start = std::chrono::steady_clock::now();
  GradSuiteReport report;
  for (const auto &c : gradient_cases(h)) {
    if (!filter.empty() && c.name.find(filter) == std::string::npos)
      continue;
    GradCaseReport r;
    r.name = c.name;
    for (std::uint64_t s = 1; s <= seeds; ++s) {
      GradCheckResult g = c.run(s);
      r.max_rel_error = std::max(r.max_rel_error, g.max_rel_error);
      r.checked += g.checked;
      r.excluded += g.excluded;
      ++r.seeds;
    }
    r.passed = r.checked > 0 && r.max_rel_error < tolerance;
    report.cases.push_back(r);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

} // namespace transadapter
