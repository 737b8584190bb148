#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <istream>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "transadapter/objective.hpp"
#include "transadapter/pixel_transform.hpp"

namespace transadapter {

struct ModuleToggles {
  bool gdd = true;
  bool ada_entropy = true;
  bool cft = true;
  bool pixel_transform = true;

  static ModuleToggles none() { return {false, false, false, false}; }
  bool needs_target_stream() const { return gdd || ada_entropy || cft; }
};

struct TrainConfig {
  std::uint64_t total_steps = 2000;
  std::optional<std::uint64_t> warmup_steps; // unset: 5% of total_steps
  std::size_t batch_size = 16;
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  std::uint64_t seed = 1;
  double lambda_local = kLambdaLocal;
  double lambda_global = kLambdaGlobal;
  double focal_gamma = kFocalGamma;
  double p_mix = kMixProbability;
  double mix_alpha = kMixAlpha;
  std::size_t local_tap = 2;  // 1-based block index feeding the local discriminator
  std::size_t global_tap = 0; // 1-based; 0 means the last block
  double grl_lambda = 1.0;
  GrlPlacement grl = GrlPlacement::before_stack;
  ModuleToggles toggles;
  BackboneConfig backbone;

  std::uint64_t warmup() const { return warmup_steps ? *warmup_steps : total_steps / 20; }

  void validate() const {
    auto fail = [](const std::string &why) { throw ContractError("TrainConfig: " + why); };
    backbone.validate();
    if (total_steps == 0)
      fail("total_steps must be positive");
    if (warmup() >= total_steps)
      fail("warmup_steps must be smaller than total_steps");
    if (batch_size == 0)
      fail("batch_size must be positive");
    if (!(base_lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0))
      fail("optimizer hyperparameters out of range");
    if (!(lambda_local >= 0.0) || !(lambda_global >= 0.0) || !(focal_gamma >= 0.0) || !(grl_lambda >= 0.0))
      fail("loss weights must be nonnegative");
    if (!(p_mix >= 0.0 && p_mix <= 1.0) || !(mix_alpha > 0.0))
      fail("p_mix must lie in [0,1] and mix_alpha be positive");
    if (local_tap == 0 || local_tap > backbone.depth)
      fail("local_tap must be a block index in [1, depth]");
    if (global_tap > backbone.depth)
      fail("global_tap must be 0 (last block) or a block index in [1, depth]");
  }
};

inline TransAdapterModel make_model(const TrainConfig &cfg) {
  TransAdapterModel m = TransAdapterModel::make(cfg.backbone, cfg.seed, cfg.grl);
  for (GddParams *g : {&m.gdd_attention, &m.gdd_local, &m.gdd_global})
    g->config.grl_lambda = cfg.grl_lambda;
  return m;
}

// ---------------------------------------------------------------------------
// key = value configuration
// ---------------------------------------------------------------------------

struct ConfigEntry {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

/// Lines of `key = value`; '#' starts a comment; blank lines ignored.
inline std::vector<ConfigEntry> parse_key_values(std::istream &in, const std::string &what) {
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
      return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  std::vector<ConfigEntry> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos)
      line.resize(hash);
    line = trim(line);
    if (line.empty())
      continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(what + ":" + std::to_string(n) + ": expected key = value");
    ConfigEntry e{trim(line.substr(0, eq)), trim(line.substr(eq + 1)), n};
    if (e.key.empty())
      throw std::invalid_argument(what + ":" + std::to_string(n) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

namespace detail {
inline bool parse_bool(const std::string &v, const std::string &key) {
  if (v == "on" || v == "true" || v == "1")
    return true;
  if (v == "off" || v == "false" || v == "0")
    return false;
  throw std::invalid_argument("config key " + key + ": expected on/off, got '" + v + "'");
}
inline std::uint64_t parse_uint(const std::string &v, const std::string &key) {
  std::size_t used = 0;
  unsigned long long x = 0;
  try {
    x = std::stoull(v, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used != v.size() || v.empty() || v[0] == '-')
    throw std::invalid_argument("config key " + key + ": expected a nonnegative integer, got '" + v + "'");
  return x;
}
inline double parse_double(const std::string &v, const std::string &key) {
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used != v.size() || v.empty())
    throw std::invalid_argument("config key " + key + ": expected a number, got '" + v + "'");
  return x;
}
} // namespace detail

/// Applies one entry; returns false for keys TrainConfig does not own.
inline bool apply_config_entry(TrainConfig &c, const std::string &key, const std::string &value) {
  using detail::parse_bool, detail::parse_double, detail::parse_uint;
  if (key == "total_steps") c.total_steps = parse_uint(value, key);
  else if (key == "warmup_steps") c.warmup_steps = parse_uint(value, key);
  else if (key == "batch_size") c.batch_size = parse_uint(value, key);
  else if (key == "base_lr") c.base_lr = parse_double(value, key);
  else if (key == "momentum") c.momentum = parse_double(value, key);
  else if (key == "weight_decay") c.weight_decay = parse_double(value, key);
  else if (key == "seed") c.seed = parse_uint(value, key);
  else if (key == "lambda_local") c.lambda_local = parse_double(value, key);
  else if (key == "lambda_global") c.lambda_global = parse_double(value, key);
  else if (key == "focal_gamma") c.focal_gamma = parse_double(value, key);
  else if (key == "p_mix") c.p_mix = parse_double(value, key);
  else if (key == "mix_alpha") c.mix_alpha = parse_double(value, key);
  else if (key == "local_tap") c.local_tap = parse_uint(value, key);
  else if (key == "global_tap") c.global_tap = parse_uint(value, key);
  else if (key == "grl_lambda") c.grl_lambda = parse_double(value, key);
  else if (key == "grl") {
    if (value == "before_stack") c.grl = GrlPlacement::before_stack;
    else if (value == "after_stack") c.grl = GrlPlacement::after_stack;
    else throw std::invalid_argument("config key grl: expected before_stack or after_stack");
  }
  else if (key == "gdd") c.toggles.gdd = parse_bool(value, key);
  else if (key == "ada_entropy") c.toggles.ada_entropy = parse_bool(value, key);
  else if (key == "cft") c.toggles.cft = parse_bool(value, key);
  else if (key == "pixel_transform") c.toggles.pixel_transform = parse_bool(value, key);
  else if (key == "image_size") c.backbone.image_size = parse_uint(value, key);
  else if (key == "patch_size") c.backbone.patch_size = parse_uint(value, key);
  else if (key == "embed_dim") c.backbone.embed_dim = parse_uint(value, key);
  else if (key == "depth") c.backbone.depth = parse_uint(value, key);
  else if (key == "heads") c.backbone.heads = parse_uint(value, key);
  else if (key == "window") c.backbone.window = parse_uint(value, key);
  else if (key == "shift") c.backbone.shift = parse_uint(value, key);
  else if (key == "num_classes") c.backbone.num_classes = parse_uint(value, key);
  else return false;
  return true;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct OptimState {
  double momentum = 0.9;
  double weight_decay = 1e-3;
  double base_lr = 0.01;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> buffers; // parallel to the parameter list

  static OptimState for_params(const ParameterList &params, const TrainConfig &cfg) {
    OptimState s;
    s.momentum = cfg.momentum;
    s.weight_decay = cfg.weight_decay;
    s.base_lr = cfg.base_lr;
    for (const auto &p : params)
      s.buffers.emplace_back(p.tensor.numel(), 0.0);
    return s;
  }
};

/// g' = g + wd*theta; v = momentum*v + g'; theta -= lr*v.
inline void sgd_step(const ParameterList &params, OptimState &state, double lr) {
  if (state.buffers.size() != params.size())
    throw ContractError("sgd_step: " + std::to_string(state.buffers.size()) + " momentum buffers for " +
                        std::to_string(params.size()) + " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].tensor;
    auto &v = state.buffers[i];
    if (v.size() != p.numel() || (p.has_grad() && p.grad().size() != p.numel()))
      throw ContractError("sgd_step: shape mismatch for parameter " + params[i].name);
    auto theta = p.data();
    const bool has_grad = p.has_grad();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double g = (has_grad ? p.grad()[j] : 0.0) + state.weight_decay * theta[j];
      v[j] = state.momentum * v[j] + g;
      theta[j] -= lr * v[j];
    }
  }
}

inline double warmup_cosine_lr(std::uint64_t step, const TrainConfig &cfg) {
  const std::uint64_t total = cfg.total_steps, warm = cfg.warmup();
  if (step > total)
    throw ContractError("warmup_cosine_lr: step " + std::to_string(step) + " beyond total " +
                        std::to_string(total));
  if (step < warm)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  const double t = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------
// Batches and stepping
// ---------------------------------------------------------------------------

struct TrainingData {
  const Dataset *source = nullptr;
  const Dataset *target = nullptr;
  PseudoLabelSet pseudo;
};

struct DomainBatch {
  Tensor source_images; // (b, H, W, 3)
  Tensor source_labels; // (b, k) distributions
  Tensor target_images; // (b, H, W, 3)
  std::vector<std::size_t> source_ids, target_ids;
  std::vector<std::optional<MixSpec>> mixes;
};

namespace rng_stream {
inline constexpr std::uint64_t source_batch = 0xb5;
inline constexpr std::uint64_t target_batch = 0xb7;
inline constexpr std::uint64_t mix = 0x31;
inline constexpr std::uint64_t cft = 0xcf;
} // namespace rng_stream

/// Every draw is keyed by (seed, step, stream) so any step can be rebuilt
/// without replaying the ones before it.
inline DomainBatch make_batch(const TrainingData &data, const TrainConfig &cfg, std::uint64_t step) {
  if (!data.source || !data.target || data.source->size() == 0 || data.target->size() == 0)
    throw ContractError("make_batch: source and target datasets must be nonempty");
  const Dataset &src = *data.source;
  const std::size_t b = cfg.batch_size, k = src.num_classes;
  DomainBatch out;
  Rng rs = derive_rng(cfg.seed, {rng_stream::source_batch, step});
  Rng rt = derive_rng(cfg.seed, {rng_stream::target_batch, step});
  for (std::size_t i = 0; i < b; ++i) {
    out.source_ids.push_back(uniform_index(rs, src.size()));
    out.target_ids.push_back(uniform_index(rt, data.target->size()));
  }
  SourceBatch sb;
  sb.geometry = {src.height, src.width, src.channels};
  sb.classes = k;
  sb.images = src.images(out.source_ids).values();
  sb.labels.assign(b * k, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    sb.labels[i * k + src.labels[out.source_ids[i]]] = 1.0;
  if (cfg.toggles.pixel_transform) {
    Rng rm = derive_rng(cfg.seed, {rng_stream::mix, step});
    AugmentedBatch ab = augment_source_batch(sb, data.pseudo, *data.target, cfg.p_mix, rm, cfg.mix_alpha);
    sb = std::move(ab.batch);
    out.mixes = std::move(ab.mixes);
  } else {
    out.mixes.assign(b, std::nullopt);
  }
  out.source_images = Tensor({b, src.height, src.width, src.channels}, std::move(sb.images));
  out.source_labels = Tensor({b, k}, std::move(sb.labels));
  if (cfg.toggles.needs_target_stream())
    out.target_images = data.target->images(out.target_ids);
  return out;
}

/// Sample-level discriminator probabilities for mean-pooled block features,
/// source nodes first.
inline std::pair<Tensor, Tensor> discriminate_pooled(const GddParams &gdd, const FeatureMap &s,
                                                     const FeatureMap &t) {
  const std::size_t b = s.batch();
  Tensor probs = gdd_forward(gdd, concat({mean_axis(s.data, 1), mean_axis(t.data, 1)}, 0));
  return {slice(probs, 0, 0, b), slice(probs, 0, b, 2 * b)};
}

inline void require_finite(const LossReport &r) {
  const std::pair<const char *, double> parts[] = {
      {"l_cls", r.l_cls}, {"l_local", r.l_local}, {"l_global", r.l_global}, {"l_total", r.l_total}};
  for (const auto &[name, v] : parts)
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite ") + name + " at step " + std::to_string(r.step));
}

/// Domain BCE (source 1, target 0) over token discriminator outputs whose
/// axis 1 holds source tokens then target tokens. Only that discriminator
/// receives this gradient since its inputs were detached.
inline Tensor attention_discriminator_loss(const std::vector<Tensor> &probs) {
  if (probs.empty())
    throw ContractError("attention_discriminator_loss: no discriminator outputs");
  Tensor acc = Tensor::scalar(0.0);
  for (const Tensor &p : probs) {
    const std::size_t n = p.dim(1) / 2;
    acc = add(acc, add(binary_cross_entropy(slice(p, 1, 0, n), 1.0),
                       binary_cross_entropy(slice(p, 1, n, 2 * n), 0.0)));
  }
  return scale(acc, 0.5 / static_cast<double>(probs.size()));
}

/// Same loss evaluated from raw (source, target) key pairs.
inline Tensor attention_discriminator_loss(const GddParams &gdd,
                                           const std::vector<std::pair<Tensor, Tensor>> &keys) {
  std::vector<Tensor> probs;
  for (const auto &[ks, kt] : keys)
    probs.push_back(gdd_forward(gdd, concat({detach(ks), detach(kt)}, 1)));
  return attention_discriminator_loss(probs);
}

struct LossTerms {
  Tensor l_cls, l_local, l_global, total;
  Tensor l_attention; // undefined unless entropy reweighting is on
  std::optional<std::size_t> cft_block;
};

/// Forward pass and objective for one batch, recorded on the tape.
inline LossTerms compute_losses(const DomainBatch &batch, const TransAdapterModel &model, const TrainConfig &cfg,
                                Rng &rng) {
  LossTerms out;
  out.l_local = Tensor::scalar(0.0);
  out.l_global = Tensor::scalar(0.0);
  if (!cfg.toggles.needs_target_stream()) {
    out.l_cls = cls_loss(forward_single(model, batch.source_images, Stream::source).logits, batch.source_labels);
  } else {
    DualForwardOptions opt;
    if (cfg.toggles.cft)
      opt.cft_block = select_cft_block(model.blocks.size(), rng);
    opt.entropy_reweighting = cfg.toggles.ada_entropy;
    out.cft_block = opt.cft_block;
    DualForward f = forward_dual(model, batch.source_images, batch.target_images, opt);
    out.l_cls = cls_loss(f.source_logits, batch.source_labels);
    if (cfg.toggles.ada_entropy)
      out.l_attention = attention_discriminator_loss(f.attention_probs);
    if (cfg.toggles.gdd) {
      const std::size_t local = cfg.local_tap - 1;
      const std::size_t global = (cfg.global_tap == 0 ? model.blocks.size() : cfg.global_tap) - 1;
      auto [ls, lt] = discriminate_pooled(model.gdd_local, f.source_blocks[local], f.target_blocks[local]);
      auto [gs, gt] = discriminate_pooled(model.gdd_global, f.source_blocks[global], f.target_blocks[global]);
      AdversarialLosses adv = adversarial_losses(ls, lt, gs, gt, cfg.focal_gamma);
      out.l_local = adv.local;
      out.l_global = adv.global;
    }
  }
  out.total = total_loss(out.l_cls, out.l_local, out.l_global, cfg.lambda_local, cfg.lambda_global);
  return out;
}

/// One optimisation step; advances optim.step.
inline LossReport train_step(const DomainBatch &batch, TransAdapterModel &model, OptimState &optim,
                             const TrainConfig &cfg, Rng &rng) {
  LossReport report;
  report.step = optim.step;
  report.lambda_local = cfg.lambda_local;
  report.lambda_global = cfg.lambda_global;
  report.lr = warmup_cosine_lr(optim.step, cfg);

  LossTerms terms = compute_losses(batch, model, cfg, rng);
  report.cft_block = terms.cft_block;
  report.l_cls = terms.l_cls.item();
  report.l_local = terms.l_local.item();
  report.l_global = terms.l_global.item();
  report.l_total = terms.total.item();
  try {
    require_finite(report);
    if (terms.l_attention.defined() && !std::isfinite(terms.l_attention.item()))
      throw NumericError("non-finite attention discriminator loss at step " + std::to_string(report.step));
  } catch (...) {
    Tape::current().clear();
    throw;
  }

  model.zero_grad();
  backward(terms.l_attention.defined() ? add(terms.total, terms.l_attention) : terms.total);
  sgd_step(model.parameters(), optim, report.lr);
  ++optim.step;
  return report;
}

using StepObserver = std::function<void(const LossReport &, const DomainBatch &)>;

/// Runs steps optim.step .. stop_step-1.
inline void train(TransAdapterModel &model, OptimState &optim, const TrainingData &data, const TrainConfig &cfg,
                  std::uint64_t stop_step, const StepObserver &observe = {}) {
  cfg.validate();
  if (stop_step > cfg.total_steps)
    throw ContractError("train: stop_step beyond total_steps");
  while (optim.step < stop_step) {
    const std::uint64_t t = optim.step;
    DomainBatch batch = make_batch(data, cfg, t);
    Rng rng = derive_rng(cfg.seed, {rng_stream::cft, t});
    LossReport r = train_step(batch, model, optim, cfg, rng);
    if (observe)
      observe(r, batch);
  }
}

inline const char *loss_csv_header() { return "step,l_cls,l_local,l_global,l_total,lr\n"; }

inline std::string format_loss_row(const LossReport &r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g\n", static_cast<unsigned long long>(r.step),
                r.l_cls, r.l_local, r.l_global, r.l_total, r.lr);
  return buf;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class; // NaN for classes absent from the dataset
  std::vector<std::size_t> predictions;
  Tensor embeddings; // (n, C) final-block mean-pooled features
};

/// Frozen forward with identity reweighting; target-domain data goes through
/// the target stream (feature correction kept).
inline EvalResult evaluate(const TransAdapterModel &model, const Dataset &data, std::size_t chunk = 64) {
  if (data.size() == 0)
    throw ContractError("evaluate: empty dataset");
  if (data.num_classes != model.config.num_classes)
    throw ContractError("evaluate: dataset has " + std::to_string(data.num_classes) + " classes, model " +
                        std::to_string(model.config.num_classes));
  NoGradGuard guard;
  const Stream stream = data.domain == Domain::target ? Stream::target : Stream::source;
  const std::size_t k = model.config.num_classes, C = model.config.embed_dim;
  EvalResult out;
  std::vector<double> emb;
  emb.reserve(data.size() * C);
  std::vector<std::size_t> hits(k, 0), seen(k, 0);
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i)
      ids.push_back(i);
    SingleForward f = forward_single(model, data.images(ids), stream);
    Tensor pooled = mean_axis(f.blocks.back().data, 1);
    emb.insert(emb.end(), pooled.values().begin(), pooled.values().end());
    const auto &logits = f.logits.values();
    for (std::size_t r = 0; r < ids.size(); ++r) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (logits[r * k + j] > logits[r * k + best])
          best = j;
      out.predictions.push_back(best);
      const std::size_t y = data.labels[ids[r]];
      ++seen[y];
      if (best == y) {
        ++hits[y];
        ++correct;
      }
    }
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  for (std::size_t j = 0; j < k; ++j)
    out.per_class.push_back(seen[j] ? static_cast<double>(hits[j]) / static_cast<double>(seen[j])
                                    : std::nan(""));
  out.embeddings = Tensor({data.size(), C}, std::move(emb));
  return out;
}

} // namespace transadapter
