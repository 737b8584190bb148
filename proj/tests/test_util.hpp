#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "transadapter/transadapter.hpp"

namespace testutil {

using transadapter::Rng;
using transadapter::Shape;
using transadapter::Tensor;

inline Tensor t(Shape shape, std::vector<double> values, bool requires_grad = false) {
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

inline double max_abs_diff(const std::vector<double> &a, const std::vector<double> &b) {
  if (a.size() != b.size())
    return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Tensor &a, const Tensor &b) { return max_abs_diff(a.values(), b.values()); }

inline Tensor random(Shape shape, Rng &rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  Tensor x = transadapter::random_tensor(std::move(shape), rng, lo, hi);
  x.set_requires_grad(requires_grad);
  return x;
}

inline std::vector<double> grad_of(const Tensor &x) { return {x.grad().begin(), x.grad().end()}; }

} // namespace testutil
