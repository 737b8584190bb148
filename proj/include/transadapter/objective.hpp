#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "transadapter/ops.hpp"

namespace transadapter {

inline constexpr double kLambdaLocal = 0.1;
inline constexpr double kLambdaGlobal = 0.01;
inline constexpr double kFocalGamma = 2.0;
inline constexpr double kProbClamp = 1e-12;

struct LossReport {
  double l_cls = 0.0;
  double l_local = 0.0;
  double l_global = 0.0;
  double l_total = 0.0;
  double lambda_local = kLambdaLocal;
  double lambda_global = kLambdaGlobal;
  std::uint64_t step = 0;
  double lr = 0.0;
  std::optional<std::size_t> cft_block; // block that received the cross-feature transform
};

/// Mean over the batch of -sum(y * log_softmax(logits)); labels are (b, k)
/// distributions.
inline Tensor cls_loss(const Tensor &logits, const Tensor &labels) {
  if (logits.shape() != labels.shape() || logits.rank() != 2)
    throw DimensionError("cls_loss: logits " + shape_str(logits.shape()) + " vs labels " +
                         shape_str(labels.shape()));
  Tensor per_sample = sum_axis(mul(labels, log_softmax(logits, 1)), 1);
  return neg(mean(per_sample));
}

/// One-hot rows for hard class ids.
inline Tensor one_hot(const std::vector<std::size_t> &labels, std::size_t classes) {
  Tensor t = Tensor::zeros({labels.size(), classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes)
      throw ContractError("one_hot: label " + std::to_string(labels[i]) + " out of range");
    t.values()[i * classes + labels[i]] = 1.0;
  }
  return t;
}

/// Mean binary cross-entropy of probabilities p against a constant label y.
inline Tensor binary_cross_entropy(const Tensor &p, double y) {
  Tensor pc = clamp(p, kProbClamp, 1.0 - kProbClamp);
  Tensor pos = scale(log(pc), y);
  Tensor negt = scale(log(add_scalar(neg(pc), 1.0)), 1.0 - y);
  return neg(mean(add(pos, negt)));
}

/// Mean of -(1 - p_t)^gamma log p_t with p_t = p for y = 1, 1 - p for y = 0.
inline Tensor focal_loss(const Tensor &p, double y, double gamma = kFocalGamma) {
  if (gamma < 0.0)
    throw ContractError("focal_loss: gamma must be nonnegative");
  Tensor pc = clamp(p, kProbClamp, 1.0 - kProbClamp);
  Tensor pt = add(scale(pc, y), scale(add_scalar(neg(pc), 1.0), 1.0 - y));
  Tensor weight = pow_scalar(add_scalar(neg(pt), 1.0), gamma);
  return neg(mean(mul(weight, log(pt))));
}

struct AdversarialLosses {
  Tensor local;
  Tensor global;
};

/// Source nodes labelled 1, target nodes 0; each term averages the two domains.
inline AdversarialLosses adversarial_losses(const Tensor &local_src, const Tensor &local_tgt,
                                            const Tensor &global_src, const Tensor &global_tgt,
                                            double focal_gamma = kFocalGamma) {
  Tensor local = scale(add(binary_cross_entropy(local_src, 1.0), binary_cross_entropy(local_tgt, 0.0)), 0.5);
  Tensor global = scale(add(focal_loss(global_src, 1.0, focal_gamma), focal_loss(global_tgt, 0.0, focal_gamma)), 0.5);
  return {local, global};
}

inline Tensor total_loss(const Tensor &l_cls, const Tensor &l_local, const Tensor &l_global,
                         double lambda_local = kLambdaLocal, double lambda_global = kLambdaGlobal) {
  return add(add(scale(l_local, lambda_local), scale(l_global, lambda_global)), l_cls);
}

inline double total_loss(double l_cls, double l_local, double l_global,
                         double lambda_local = kLambdaLocal, double lambda_global = kLambdaGlobal) {
  return lambda_local * l_local + lambda_global * l_global + l_cls;
}

} // namespace transadapter
