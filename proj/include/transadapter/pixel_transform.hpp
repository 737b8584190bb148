#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "transadapter/backbone.hpp"
#include "transadapter/data.hpp"

namespace transadapter {

inline constexpr double kMixAlpha = 1.0;
inline constexpr double kMixProbability = 0.5;

struct PseudoLabelSet {
  std::vector<std::size_t> indices;
  std::vector<std::size_t> labels;
  std::vector<double> confidences;
  double threshold = 1.0;
  std::size_t candidates = 0;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  double retained_fraction() const {
    return candidates == 0 ? 0.0 : static_cast<double>(indices.size()) / static_cast<double>(candidates);
  }
};

/// Retains row i iff max(probs[i]) >= threshold. Label ties go to the lowest index.
inline PseudoLabelSet pseudo_label_from_probs(const Tensor &probs, double threshold) {
  if (probs.rank() != 2)
    throw DimensionError("pseudo_label: probabilities must be (n, k), got " + shape_str(probs.shape()));
  if (!(threshold >= 0.0 && threshold <= 1.0))
    throw ContractError("pseudo_label: threshold must lie in [0,1]");
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  PseudoLabelSet out;
  out.threshold = threshold;
  out.candidates = n;
  const auto &v = probs.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (v[i * k + j] > v[i * k + best])
        best = j;
    const double conf = v[i * k + best];
    if (conf >= threshold) {
      out.indices.push_back(i);
      out.labels.push_back(best);
      out.confidences.push_back(conf);
    }
  }
  return out;
}

/// Softmax class probabilities of a frozen model on the target stream, in
/// chunks to bound memory.
inline Tensor predict_probs(const TransAdapterModel &model, const Dataset &data, Stream stream,
                            std::size_t chunk = 64) {
  if (data.size() == 0)
    throw ContractError("predict_probs: empty dataset");
  NoGradGuard guard;
  const std::size_t k = model.config.num_classes;
  std::vector<double> all;
  all.reserve(data.size() * k);
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> ids;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i)
      ids.push_back(i);
    Tensor p = softmax(forward_single(model, data.images(ids), stream).logits, 1);
    all.insert(all.end(), p.values().begin(), p.values().end());
  }
  return Tensor({data.size(), k}, std::move(all));
}

inline PseudoLabelSet pseudo_label(const TransAdapterModel &model, const Dataset &targets, double threshold) {
  return pseudo_label_from_probs(predict_probs(model, targets, Stream::target), threshold);
}

/// Labeler accuracy on held-out source data, clamped to [0.5, 0.99].
inline double pseudo_threshold_from_accuracy(double accuracy) {
  return std::clamp(accuracy, 0.5, 0.99);
}

enum class MixKind { mixup, cutmix };

inline const char *mix_kind_name(MixKind k) { return k == MixKind::mixup ? "mixup" : "cutmix"; }

struct Box {
  std::size_t row = 0, col = 0, height = 0, width = 0;
  std::size_t area() const { return height * width; }
};

struct MixSpec {
  MixKind kind = MixKind::mixup;
  double lambda = 1.0; // effective source weight (adjusted for cutmix)
  std::optional<Box> box;
  std::size_t partner = 0;
};

struct ImageGeometry {
  std::size_t height, width, channels;
  std::size_t values() const { return height * width * channels; }
};

struct MixedSample {
  std::vector<double> image;
  std::vector<double> label;
};

namespace detail {
inline void check_pair(std::span<const double> xs, std::span<const double> ys, std::span<const double> xt,
                       std::span<const double> yt) {
  if (xs.size() != xt.size() || ys.size() != yt.size())
    throw DimensionError("mix: source and partner sizes differ");
}
inline std::vector<double> blend(std::span<const double> a, std::span<const double> b, double lambda) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    out[i] = lambda * a[i] + (1.0 - lambda) * b[i];
  return out;
}
} // namespace detail

inline MixedSample mixup_with_lambda(std::span<const double> xs, std::span<const double> ys,
                                     std::span<const double> xt, std::span<const double> yt, double lambda) {
  detail::check_pair(xs, ys, xt, yt);
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ContractError("mixup: lambda must lie in [0,1]");
  return {detail::blend(xs, xt, lambda), detail::blend(ys, yt, lambda)};
}

inline MixedSample mixup(std::span<const double> xs, std::span<const double> ys, std::span<const double> xt,
                         std::span<const double> yt, double alpha, Rng &rng, MixSpec *spec = nullptr) {
  if (!(alpha > 0.0))
    throw ContractError("mixup: alpha must be positive");
  const double lambda = beta_sample(rng, alpha, alpha);
  if (spec) {
    spec->kind = MixKind::mixup;
    spec->lambda = lambda;
    spec->box.reset();
  }
  return mixup_with_lambda(xs, ys, xt, yt, lambda);
}

/// Box with sides floor(H*sqrt(1-lambda)), floor(W*sqrt(1-lambda)), placed
/// uniformly so it lies entirely inside the image.
inline Box cutmix_box(std::size_t height, std::size_t width, double lambda, Rng &rng) {
  if (!(lambda >= 0.0 && lambda <= 1.0))
    throw ContractError("cutmix: lambda must lie in [0,1]");
  const double ratio = std::sqrt(1.0 - lambda);
  Box b;
  b.height = std::min(height, static_cast<std::size_t>(std::floor(static_cast<double>(height) * ratio)));
  b.width = std::min(width, static_cast<std::size_t>(std::floor(static_cast<double>(width) * ratio)));
  b.row = uniform_index(rng, height - b.height + 1);
  b.col = uniform_index(rng, width - b.width + 1);
  return b;
}

/// 1 - replaced / total.
inline double cutmix_lambda(const Box &box, std::size_t height, std::size_t width) {
  return 1.0 - static_cast<double>(box.area()) / static_cast<double>(height * width);
}

inline MixedSample cutmix_with_box(std::span<const double> xs, std::span<const double> ys,
                                   std::span<const double> xt, std::span<const double> yt,
                                   const ImageGeometry &geo, const Box &box) {
  detail::check_pair(xs, ys, xt, yt);
  if (xs.size() != geo.values())
    throw DimensionError("cutmix: image size does not match geometry");
  if (box.row + box.height > geo.height || box.col + box.width > geo.width)
    throw ContractError("cutmix: box exceeds image bounds");
  MixedSample out{std::vector<double>(xs.begin(), xs.end()), {}};
  for (std::size_t r = box.row; r < box.row + box.height; ++r)
    for (std::size_t c = box.col; c < box.col + box.width; ++c)
      for (std::size_t ch = 0; ch < geo.channels; ++ch) {
        const std::size_t i = (r * geo.width + c) * geo.channels + ch;
        out.image[i] = xt[i];
      }
  if (box.area() == 0) {
    out.label.assign(ys.begin(), ys.end());
    return out;
  }
  out.label = detail::blend(ys, yt, cutmix_lambda(box, geo.height, geo.width));
  return out;
}

inline MixedSample cutmix(std::span<const double> xs, std::span<const double> ys, std::span<const double> xt,
                          std::span<const double> yt, const ImageGeometry &geo, double alpha, Rng &rng,
                          MixSpec *spec = nullptr) {
  if (!(alpha > 0.0))
    throw ContractError("cutmix: alpha must be positive");
  const Box box = cutmix_box(geo.height, geo.width, beta_sample(rng, alpha, alpha), rng);
  if (spec) {
    spec->kind = MixKind::cutmix;
    spec->lambda = cutmix_lambda(box, geo.height, geo.width);
    spec->box = box;
  }
  return cutmix_with_box(xs, ys, xt, yt, geo, box);
}

struct SourceBatch {
  ImageGeometry geometry;
  std::size_t classes = 0;
  std::vector<double> images; // (b, H, W, C) in [0,1]
  std::vector<double> labels; // (b, k) distributions
  std::size_t size() const { return classes == 0 ? 0 : labels.size() / classes; }
};

struct AugmentedBatch {
  SourceBatch batch;
  std::vector<std::optional<MixSpec>> mixes; // one entry per sample
};

/// Mixes each source sample with probability p_mix against a uniformly drawn
/// retained target sample; mixup or cutmix by fair coin.
inline AugmentedBatch augment_source_batch(const SourceBatch &src, const PseudoLabelSet &pseudo,
                                           const Dataset &targets, double p_mix, Rng &rng,
                                           double alpha = kMixAlpha) {
  if (!(p_mix >= 0.0 && p_mix <= 1.0))
    throw ContractError("augment_source_batch: p_mix must lie in [0,1]");
  AugmentedBatch out{src, std::vector<std::optional<MixSpec>>(src.size())};
  if (pseudo.empty() || p_mix == 0.0)
    return out;
  const auto &geo = src.geometry;
  const std::size_t per = geo.values(), k = src.classes;
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (uniform01(rng) >= p_mix)
      continue;
    const bool use_cutmix = uniform01(rng) < 0.5;
    const std::size_t pick = uniform_index(rng, pseudo.size());
    const std::size_t partner = pseudo.indices[pick];
    std::vector<double> yt(k, 0.0);
    yt[pseudo.labels[pick]] = 1.0;
    const std::vector<double> xt = targets.image(partner);
    std::span<const double> xs(src.images.data() + i * per, per);
    std::span<const double> ys(src.labels.data() + i * k, k);
    MixSpec spec;
    MixedSample m = use_cutmix ? cutmix(xs, ys, xt, yt, geo, alpha, rng, &spec)
                               : mixup(xs, ys, xt, yt, alpha, rng, &spec);
    spec.partner = partner;
    std::copy(m.image.begin(), m.image.end(), out.batch.images.begin() + static_cast<std::ptrdiff_t>(i * per));
    std::copy(m.label.begin(), m.label.end(), out.batch.labels.begin() + static_cast<std::ptrdiff_t>(i * k));
    out.mixes[i] = spec;
  }
  return out;
}

/// One audit line per mixed sample: "mix step=<t> sample=<i> kind=<k> lambda=<l> partner=<id>".
inline std::string format_mix_log(std::uint64_t step, const std::vector<std::optional<MixSpec>> &mixes) {
  std::string out;
  char buf[160];
  for (std::size_t i = 0; i < mixes.size(); ++i) {
    if (!mixes[i])
      continue;
    const auto &m = *mixes[i];
    std::snprintf(buf, sizeof buf, "mix step=%llu sample=%zu kind=%s lambda=%.17g partner=%zu\n",
                  static_cast<unsigned long long>(step), i, mix_kind_name(m.kind), m.lambda, m.partner);
    out += buf;
  }
  return out;
}

} // namespace transadapter
