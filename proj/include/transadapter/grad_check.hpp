#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "transadapter/ops.hpp"

namespace transadapter {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates skipped because f has a kink there.
  std::size_t excluded = 0;
};

namespace detail {
inline double kink_tolerance(double central) { return 1e-3 * std::max(1.0, std::abs(central)); }
} // namespace detail

/// Compares backward() against central differences for every coordinate of
/// each tensor in `targets`, perturbing them in place. `loss` must rebuild its
/// graph on each call. Coordinates where the one-sided slopes disagree are
/// treated as kinks and excluded. `max_coords` > 0 limits the coordinates
/// visited per tensor to an evenly strided subset.
inline GradCheckResult grad_check_tensors(const std::function<Tensor()> &loss,
                                          std::vector<Tensor> targets, double h = 1e-5,
                                          std::size_t max_coords = 0) {
  if (!(h >= 1e-7 && h <= 1e-3))
    throw ContractError("grad_check: step must lie in [1e-7, 1e-3]");
  for (auto &t : targets) {
    if (!t.requires_grad())
      t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor y = loss();
  if (y.numel() != 1)
    throw ContractError("grad_check: function must be scalar-valued");
  backward(y);
  std::vector<std::vector<double>> analytic;
  for (auto &t : targets)
    analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheckResult result;
  NoGradGuard guard;
  const double f0 = loss().item();
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    auto values = targets[ti].data();
    const std::size_t n = values.size();
    const std::size_t stride = (max_coords == 0 || n <= max_coords) ? 1 : n / max_coords;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + h;
      const double fp = loss().item();
      values[i] = saved - h;
      const double fm = loss().item();
      values[i] = saved;
      const double central = (fp - fm) / (2.0 * h);
      const double forward = (fp - f0) / h;
      const double backward_slope = (f0 - fm) / h;
      if (std::abs(forward - backward_slope) > detail::kink_tolerance(central)) {
        ++result.excluded;
        continue;
      }
      const double a = analytic[ti][i];
      const double err = std::abs(a - central) / std::max(1.0, std::abs(a));
      result.max_rel_error = std::max(result.max_rel_error, err);
      ++result.checked;
    }
  }
  for (auto &t : targets)
    t.zero_grad();
  return result;
}

/// Gradient check of a scalar function with respect to a single input.
inline GradCheckResult grad_check(const std::function<Tensor(const Tensor &)> &f, const Tensor &x,
                                  double h = 1e-5) {
  Tensor leaf = x.clone(true);
  return grad_check_tensors([&] { return f(leaf); }, {leaf}, h);
}

} // namespace transadapter
