#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "transadapter/tensor.hpp"

namespace transadapter {

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape &shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;)
    strides[i - 1] = strides[i] * shape[i];
  return strides;
}

inline Shape broadcast_shape(const Shape &a, const Shape &b, std::string_view op) {
  if (a.size() != b.size())
    throw DimensionError(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1)
      out[i] = a[i];
    else if (a[i] == 1)
      out[i] = b[i];
    else
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
  }
  return out;
}

/// Strides of `in` as seen from `out`, with zero stride on broadcast axes.
inline std::vector<std::size_t> broadcast_strides(const Shape &in, const Shape &out) {
  auto strides = strides_of(in);
  for (std::size_t i = 0; i < in.size(); ++i)
    if (in[i] == 1 && out[i] != 1)
      strides[i] = 0;
  return strides;
}

/// Calls fn(out_index, a_index, b_index) over every element of `out`.
template <typename Fn>
void for_each_broadcast(const Shape &out, const std::vector<std::size_t> &sa,
                        const std::vector<std::size_t> &sb, Fn &&fn) {
  const std::size_t rank = out.size();
  const std::size_t total = shape_numel(out);
  if (rank == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<std::size_t> counter(rank, 0);
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; o += inner) {
    for (std::size_t j = 0; j < inner; ++j)
      fn(o + j, ia + j * ia_step, ib + j * ib_step);
    // advance the odometer over axes [0, rank-1)
    for (std::size_t axis = rank - 1; axis-- > 0;) {
      ++counter[axis];
      ia += sa[axis];
      ib += sb[axis];
      if (counter[axis] < out[axis])
        break;
      ia -= sa[axis] * counter[axis];
      ib -= sb[axis] * counter[axis];
      counter[axis] = 0;
    }
  }
}

inline void check_finite(std::span<const double> values, std::string_view op) {
  for (double v : values)
    if (!std::isfinite(v))
      throw NumericError(std::string(op) + ": non-finite input");
}

// C[m,n] += A[m,k] * B[k,n]. Rows in blocks of 4, columns in 8-wide vectors
// held in registers across the k loop; each output element still
// accumulates in k order, so results match the plain triple loop.
using Vec8 = double __attribute__((vector_size(64)));

inline Vec8 load8(const double *p) {
  Vec8 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double *p, const Vec8 &v) { std::memcpy(p, &v, sizeof v); }

inline void gemm_rows_plain(const double *__restrict a, const double *__restrict b,
                            double *__restrict c, std::size_t m, std::size_t k, std::size_t n,
                            std::size_t j0) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      for (std::size_t j = j0; j < n; ++j)
        c[i * n + j] += av * b[p * n + j];
    }
}

inline void gemm_nn(const double *__restrict a, const double *__restrict b, double *__restrict c,
                    std::size_t m, std::size_t k, std::size_t n) {
  const std::size_t m4 = m - m % 4, n8 = n - n % 8;
  for (std::size_t i = 0; i < m4; i += 4) {
    const double *a0 = a + i * k, *a1 = a0 + k, *a2 = a1 + k, *a3 = a2 + k;
    double *c0 = c + i * n, *c1 = c0 + n, *c2 = c1 + n, *c3 = c2 + n;
    std::size_t j = 0;
    for (; j + 16 <= n8; j += 16) {
      Vec8 x00 = load8(c0 + j), x01 = load8(c0 + j + 8), x10 = load8(c1 + j), x11 = load8(c1 + j + 8);
      Vec8 x20 = load8(c2 + j), x21 = load8(c2 + j + 8), x30 = load8(c3 + j), x31 = load8(c3 + j + 8);
      for (std::size_t p = 0; p < k; ++p) {
        const Vec8 b0 = load8(b + p * n + j), b1 = load8(b + p * n + j + 8);
        x00 += a0[p] * b0;
        x01 += a0[p] * b1;
        x10 += a1[p] * b0;
        x11 += a1[p] * b1;
        x20 += a2[p] * b0;
        x21 += a2[p] * b1;
        x30 += a3[p] * b0;
        x31 += a3[p] * b1;
      }
      store8(c0 + j, x00);
      store8(c0 + j + 8, x01);
      store8(c1 + j, x10);
      store8(c1 + j + 8, x11);
      store8(c2 + j, x20);
      store8(c2 + j + 8, x21);
      store8(c3 + j, x30);
      store8(c3 + j + 8, x31);
    }
    for (; j < n8; j += 8) {
      Vec8 x0 = load8(c0 + j), x1 = load8(c1 + j), x2 = load8(c2 + j), x3 = load8(c3 + j);
      for (std::size_t p = 0; p < k; ++p) {
        const Vec8 b0 = load8(b + p * n + j);
        x0 += a0[p] * b0;
        x1 += a1[p] * b0;
        x2 += a2[p] * b0;
        x3 += a3[p] * b0;
      }
      store8(c0 + j, x0);
      store8(c1 + j, x1);
      store8(c2 + j, x2);
      store8(c3 + j, x3);
    }
    if (n8 < n)
      gemm_rows_plain(a0, b, c0, 4, k, n, n8);
  }
  if (m4 < m)
    gemm_rows_plain(a + m4 * k, b, c + m4 * n, m - m4, k, n, 0);
}

// C[k,n] += A[m,k]^T * B[m,n], via an explicit transpose of A
inline void gemm_tn(const double *a, const double *b, double *c, std::size_t m, std::size_t k,
                    std::size_t n, std::vector<double> &scratch) {
  scratch.resize(m * k);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      scratch[p * m + i] = a[i * k + p];
  gemm_nn(scratch.data(), b, c, k, m, n);
}

// C[m,k] += A[m,n] * B[k,n]^T, via an explicit transpose of B
inline void gemm_nt(const double *a, const double *b, double *c, std::size_t m, std::size_t n,
                    std::size_t k, std::vector<double> &scratch) {
  scratch.resize(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j)
      scratch[j * k + p] = b[p * n + j];
  gemm_nn(a, scratch.data(), c, m, n, k);
}

inline Tensor make_output(Shape shape) { return Tensor::zeros(std::move(shape)); }

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary with extent-1 broadcasting
// ---------------------------------------------------------------------------

namespace detail {

template <typename Fwd, typename GradA, typename GradB>
Tensor broadcast_binary(std::string_view tag, const Tensor &a, const Tensor &b, Fwd fwd,
                        GradA grad_a, GradB grad_b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), tag);
  Tensor out = make_output(out_shape);
  auto &o = out.values();
  const auto &av = a.values();
  const auto &bv = b.values();
  const bool same = a.shape() == b.shape();
  if (same) {
    for (std::size_t i = 0; i < o.size(); ++i)
      o[i] = fwd(av[i], bv[i]);
  } else {
    for_each_broadcast(out_shape, broadcast_strides(a.shape(), out_shape),
                       broadcast_strides(b.shape(), out_shape),
                       [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = fwd(av[ia], bv[ib]); });
  }
  auto &tape = Tape::current();
  if (tape.wants({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), oi = out.impl();
    tape.record(tag, {ai, bi}, out, [ai, bi, oi, out_shape, same, grad_a, grad_b](std::span<const double> g) {
      const auto &av = ai->data;
      const auto &bv = bi->data;
      const auto &ov = oi->data;
      if (same) {
        if (ai->requires_grad)
          for (std::size_t i = 0; i < g.size(); ++i)
            ai->grad[i] += grad_a(g[i], av[i], bv[i], ov[i]);
        if (bi->requires_grad)
          for (std::size_t i = 0; i < g.size(); ++i)
            bi->grad[i] += grad_b(g[i], av[i], bv[i], ov[i]);
        return;
      }
      for_each_broadcast(out_shape, broadcast_strides(ai->shape, out_shape),
                         broadcast_strides(bi->shape, out_shape),
                         [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           if (ai->requires_grad)
                             ai->grad[ia] += grad_a(g[i], av[ia], bv[ib], ov[i]);
                           if (bi->requires_grad)
                             bi->grad[ib] += grad_b(g[i], av[ia], bv[ib], ov[i]);
                         });
    });
  }
  return out;
}

template <typename Fwd, typename Grad>
Tensor unary(std::string_view tag, const Tensor &x, Fwd fwd, Grad grad) {
  Tensor out = make_output(x.shape());
  auto &o = out.values();
  const auto &xv = x.values();
  for (std::size_t i = 0; i < o.size(); ++i)
    o[i] = fwd(xv[i]);
  auto &tape = Tape::current();
  if (tape.wants({&x})) {
    auto xi = x.impl(), oi = out.impl();
    tape.record(tag, {xi}, out, [xi, oi, grad](std::span<const double> g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        xi->grad[i] += grad(g[i], xi->data[i], oi->data[i]);
    });
  }
  return out;
}

} // namespace detail

inline Tensor add(const Tensor &a, const Tensor &b) {
  return detail::broadcast_binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double) { return g; },
      [](double g, double, double, double) { return g; });
}

inline Tensor sub(const Tensor &a, const Tensor &b) {
  return detail::broadcast_binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double) { return g; },
      [](double g, double, double, double) { return -g; });
}

inline Tensor mul(const Tensor &a, const Tensor &b) {
  return detail::broadcast_binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y, double) { return g * y; },
      [](double g, double x, double, double) { return g * x; });
}

inline Tensor div(const Tensor &a, const Tensor &b) {
  return detail::broadcast_binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y, double) { return g / y; },
      [](double g, double x, double y, double) { return -g * x / (y * y); });
}

inline Tensor operator+(const Tensor &a, const Tensor &b) { return add(a, b); }
inline Tensor operator-(const Tensor &a, const Tensor &b) { return sub(a, b); }
inline Tensor operator*(const Tensor &a, const Tensor &b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

inline Tensor scale(const Tensor &x, double s) {
  return detail::unary(
      "scale", x, [s](double v) { return v * s; }, [s](double g, double, double) { return g * s; });
}

inline Tensor add_scalar(const Tensor &x, double s) {
  return detail::unary(
      "add_scalar", x, [s](double v) { return v + s; }, [](double g, double, double) { return g; });
}

inline Tensor neg(const Tensor &x) { return scale(x, -1.0); }

/// Gradient at exactly zero is zero.
inline Tensor relu(const Tensor &x) {
  return detail::unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double g, double v, double) { return v > 0.0 ? g : 0.0; });
}

inline double sigmoid(double v) {
  return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline Tensor sigmoid(const Tensor &x) {
  return detail::unary(
      "sigmoid", x, [](double v) { return sigmoid(v); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

inline Tensor log(const Tensor &x) {
  for (double v : x.values())
    if (!(v > 0.0))
      throw NumericError("log of nonpositive value " + std::to_string(v));
  return detail::unary(
      "log", x, [](double v) { return std::log(v); },
      [](double g, double v, double) { return g / v; });
}

inline Tensor exp(const Tensor &x) {
  return detail::unary(
      "exp", x, [](double v) { return std::exp(v); },
      [](double g, double, double y) { return g * y; });
}

inline Tensor sqrt(const Tensor &x) {
  for (double v : x.values())
    if (v < 0.0)
      throw NumericError("sqrt of negative value " + std::to_string(v));
  return detail::unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double g, double, double y) { return y > 0.0 ? g * 0.5 / y : 0.0; });
}

/// x^e for nonnegative x.
inline Tensor pow_scalar(const Tensor &x, double e) {
  return detail::unary(
      "pow", x, [e](double v) { return std::pow(v, e); },
      [e](double g, double v, double) {
        if (e == 0.0)
          return 0.0;
        return g * e * std::pow(v, e - 1.0);
      });
}

/// Clamp into [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clamp(const Tensor &x, double lo, double hi) {
  return detail::unary(
      "clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double g, double v, double) { return (v > lo && v < hi) ? g : 0.0; });
}

inline Tensor clamp_min(const Tensor &x, double lo) {
  return clamp(x, lo, std::numeric_limits<double>::infinity());
}

/// -p log p - (1-p) log(1-p) with 0 log 0 = 0.
inline Tensor binary_entropy(const Tensor &p) {
  for (double v : p.values())
    if (!(v >= 0.0 && v <= 1.0))
      throw ContractError("binary_entropy: probability outside [0,1]: " + std::to_string(v));
  auto xlogx = [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; };
  return detail::unary(
      "binary_entropy", p, [xlogx](double v) { return -xlogx(v) - xlogx(1.0 - v); },
      [](double g, double v, double) {
        const double c = std::clamp(v, 1e-12, 1.0 - 1e-12);
        return g * std::log((1.0 - c) / c);
      });
}

namespace detail {
inline bool &grl_transparent_flag() {
  thread_local bool flag = false;
  return flag;
}
} // namespace detail

/// While alive, gradient reversal layers recorded on this thread pass
/// gradients through unchanged. Lets finite differences check every other
/// derivative path of a composite that contains a reversal.
class TransparentGrlGuard {
public:
  TransparentGrlGuard() : previous_(detail::grl_transparent_flag()) { detail::grl_transparent_flag() = true; }
  ~TransparentGrlGuard() { detail::grl_transparent_flag() = previous_; }
  TransparentGrlGuard(const TransparentGrlGuard &) = delete;
  TransparentGrlGuard &operator=(const TransparentGrlGuard &) = delete;

private:
  bool previous_;
};

/// Forward identity; backward multiplies the incoming gradient by -lambda.
inline Tensor grl(const Tensor &x, double lambda) {
  if (lambda < 0.0)
    throw ContractError("grl: lambda must be nonnegative");
  const double factor = detail::grl_transparent_flag() ? 1.0 : -lambda;
  return detail::unary(
      "grl", x, [](double v) { return v; }, [factor](double g, double, double) { return factor * g; });
}

inline Tensor detach(const Tensor &x) { return x.clone(false); }

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor &x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  Tensor out(std::move(shape), x.values());
  auto &tape = Tape::current();
  if (tape.wants({&x})) {
    auto xi = x.impl();
    tape.record("reshape", {xi}, out, [xi](std::span<const double> g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        xi->grad[i] += g[i];
    });
  }
  return out;
}

/// out.flat[i] = x.flat[index[i]]; backward scatters (adds) into x.
inline Tensor gather(const Tensor &x, Shape out_shape, std::vector<std::size_t> index) {
  if (shape_numel(out_shape) != index.size())
    throw DimensionError("gather: index count does not match " + shape_str(out_shape));
  Tensor out = detail::make_output(std::move(out_shape));
  auto &o = out.values();
  const auto &xv = x.values();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.size())
      throw DimensionError("gather: index out of range for " + shape_str(x.shape()));
    o[i] = xv[index[i]];
  }
  auto &tape = Tape::current();
  if (tape.wants({&x})) {
    auto xi = x.impl();
    tape.record("gather", {xi}, out, [xi, index = std::move(index)](std::span<const double> g) {
      for (std::size_t i = 0; i < g.size(); ++i)
        xi->grad[index[i]] += g[i];
    });
  }
  return out;
}

inline Tensor permute(const Tensor &x, const std::vector<std::size_t> &axes) {
  const auto &in = x.shape();
  if (axes.size() != in.size())
    throw DimensionError("permute: axes do not match rank of " + shape_str(in));
  Shape out_shape(in.size());
  std::vector<bool> seen(in.size(), false);
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= in.size() || seen[axes[i]])
      throw DimensionError("permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = in[axes[i]];
  }
  const auto in_strides = detail::strides_of(in);
  std::vector<std::size_t> mapped(in.size());
  for (std::size_t i = 0; i < axes.size(); ++i)
    mapped[i] = in_strides[axes[i]];
  std::vector<std::size_t> index(x.numel());
  std::vector<std::size_t> zero(in.size(), 0);
  detail::for_each_broadcast(out_shape, mapped, zero,
                             [&](std::size_t o, std::size_t src, std::size_t) { index[o] = src; });
  return gather(x, std::move(out_shape), std::move(index));
}

/// Swap the last two axes.
inline Tensor transpose(const Tensor &x) {
  if (x.rank() < 2)
    throw DimensionError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

inline Tensor concat(const std::vector<Tensor> &parts, std::size_t axis) {
  if (parts.empty())
    throw ContractError("concat of zero tensors");
  const auto &first = parts.front().shape();
  if (axis >= first.size())
    throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto &p : parts) {
    const auto &s = p.shape();
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s.size() != first.size() || (i != axis && s[i] != first[i]))
        throw DimensionError("concat: " + shape_str(first) + " vs " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i)
    outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i)
    inner *= first[i];

  Tensor out = detail::make_output(out_shape);
  auto &o = out.values();
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto &p : parts) {
    const std::size_t row = p.shape()[axis] * inner;
    for (std::size_t r = 0; r < outer; ++r)
      std::copy_n(p.values().begin() + r * row, row, o.begin() + r * out_row + offset);
    offset += row;
  }

  auto &tape = Tape::current();
  bool wants = false;
  for (const auto &p : parts)
    wants = wants || tape.wants({&p});
  if (wants) {
    std::vector<ImplPtr> inputs;
    for (const auto &p : parts)
      inputs.push_back(p.impl());
    tape.record("concat", inputs, out, [inputs, outer, inner, axis, out_row](std::span<const double> g) {
      std::size_t offset = 0;
      for (const auto &in : inputs) {
        const std::size_t row = in->shape[axis] * inner;
        if (in->requires_grad)
          for (std::size_t r = 0; r < outer; ++r)
            for (std::size_t j = 0; j < row; ++j)
              in->grad[r * row + j] += g[r * out_row + offset + j];
        offset += row;
      }
    });
  }
  return out;
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor &x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto &in = x.shape();
  if (axis >= in.size() || begin >= end || end > in[axis])
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(in));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i)
    outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i)
    inner *= in[i];
  Shape out_shape = in;
  out_shape[axis] = end - begin;
  std::vector<std::size_t> index;
  index.reserve(shape_numel(out_shape));
  for (std::size_t r = 0; r < outer; ++r)
    for (std::size_t a = begin; a < end; ++a)
      for (std::size_t j = 0; j < inner; ++j)
        index.push_back((r * in[axis] + a) * inner + j);
  return gather(x, std::move(out_shape), std::move(index));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor &x) {
  double total = 0.0;
  for (double v : x.values())
    total += v;
  Tensor out = Tensor::scalar(total);
  auto &tape = Tape::current();
  if (tape.wants({&x})) {
    auto xi = x.impl();
    tape.record("sum", {xi}, out, [xi](std::span<const double> g) {
      for (auto &v : xi->grad)
        v += g[0];
    });
  }
  return out;
}

inline Tensor mean(const Tensor &x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

inline Tensor sum_axis(const Tensor &x, std::size_t axis, bool keepdim = false) {
  const auto &in = x.shape();
  if (axis >= in.size())
    throw DimensionError("sum_axis: axis out of range for " + shape_str(in));
  std::size_t outer = 1, inner = 1;
  const std::size_t extent = in[axis];
  for (std::size_t i = 0; i < axis; ++i)
    outer *= in[i];
  for (std::size_t i = axis + 1; i < in.size(); ++i)
    inner *= in[i];
  Shape out_shape = in;
  if (keepdim || in.size() == 1)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out = detail::make_output(out_shape);
  auto &o = out.values();
  const auto &xv = x.values();
  for (std::size_t r = 0; r < outer; ++r)
    for (std::size_t a = 0; a < extent; ++a)
      for (std::size_t j = 0; j < inner; ++j)
        o[r * inner + j] += xv[(r * extent + a) * inner + j];
  auto &tape = Tape::current();
  if (tape.wants({&x})) {
    auto xi = x.impl();
    tape.record("sum_axis", {xi}, out, [xi, outer, inner, extent](std::span<const double> g) {
      for (std::size_t r = 0; r < outer; ++r)
        for (std::size_t a = 0; a < extent; ++a)
          for (std::size_t j = 0; j < inner; ++j)
            xi->grad[(r * extent + a) * inner + j] += g[r * inner + j];
    });
  }
  return out;
}

inline Tensor mean_axis(const Tensor &x, std::size_t axis, bool keepdim = false) {
  return scale(sum_axis(x, axis, keepdim), 1.0 / static_cast<double>(x.shape().at(axis)));
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

/// Batched product over the last two axes. Leading axes must be equal or 1.
inline Tensor matmul(const Tensor &a, const Tensor &b) {
  const auto &sa = a.shape();
  const auto &sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || sa[sa.size() - 1] != sb[sb.size() - 2])
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  const std::size_t rank = sa.size();
  const std::size_t m = sa[rank - 2], k = sa[rank - 1], n = sb[rank - 1];
  Shape lead_a(sa.begin(), sa.end() - 2), lead_b(sb.begin(), sb.end() - 2);
  Shape lead_out;
  try {
    lead_out = detail::broadcast_shape(lead_a, lead_b, "matmul");
  } catch (const DimensionError &) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t batches = shape_numel(lead_out);
  std::vector<std::size_t> ia(batches), ib(batches);
  if (lead_out.empty()) {
    ia[0] = ib[0] = 0;
  } else {
    detail::for_each_broadcast(lead_out, detail::broadcast_strides(lead_a, lead_out),
                               detail::broadcast_strides(lead_b, lead_out),
                               [&](std::size_t o, std::size_t x, std::size_t y) {
                                 ia[o] = x;
                                 ib[o] = y;
                               });
  }
  Shape out_shape = lead_out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out = detail::make_output(out_shape);
  const double *ap = a.values().data();
  const double *bp = b.values().data();
  double *op = out.values().data();
  for (std::size_t t = 0; t < batches; ++t)
    detail::gemm_nn(ap + ia[t] * m * k, bp + ib[t] * k * n, op + t * m * n, m, k, n);

  auto &tape = Tape::current();
  if (tape.wants({&a, &b})) {
    auto ai = a.impl(), bi = b.impl();
    tape.record("matmul", {ai, bi}, out, [ai, bi, ia, ib, m, k, n](std::span<const double> g) {
      std::vector<double> scratch;
      for (std::size_t t = 0; t < ia.size(); ++t) {
        const double *gt = g.data() + t * m * n;
        if (ai->requires_grad)
          detail::gemm_nt(gt, bi->data.data() + ib[t] * k * n, ai->grad.data() + ia[t] * m * k, m,
                          n, k, scratch);
        if (bi->requires_grad)
          detail::gemm_tn(ai->data.data() + ia[t] * m * k, gt, bi->grad.data() + ib[t] * k * n, m,
                          k, n, scratch);
      }
    });
  }
  return out;
}

/// Applies x[..., in] * weight[in, out] (+ bias[out]) over all leading axes.
inline Tensor linear(const Tensor &x, const Tensor &weight, const Tensor *bias = nullptr) {
  const auto &sx = x.shape();
  const auto &sw = weight.shape();
  if (sw.size() != 2 || sx.empty() || sx.back() != sw[0])
    throw DimensionError("linear: input " + shape_str(sx) + " incompatible with weight " +
                         shape_str(sw));
  if (bias && (bias->rank() != 1 || bias->dim(0) != sw[1]))
    throw DimensionError("linear: bias " + shape_str(bias->shape()) + " does not match weight " +
                         shape_str(sw));
  const std::size_t k = sw[0], n = sw[1];
  const std::size_t rows = x.numel() / k;
  Shape out_shape = sx;
  out_shape.back() = n;
  Tensor out = detail::make_output(out_shape);
  auto &o = out.values();
  if (bias)
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(bias->values().begin(), bias->values().end(), o.begin() + r * n);
  detail::gemm_nn(x.values().data(), weight.values().data(), o.data(), rows, k, n);

  auto &tape = Tape::current();
  const bool bias_grad = bias && bias->requires_grad();
  if (tape.wants({&x, &weight}) || (tape.enabled() && bias_grad)) {
    auto xi = x.impl(), wi = weight.impl();
    ImplPtr bi = bias ? bias->impl() : nullptr;
    std::vector<ImplPtr> inputs{xi, wi};
    if (bi)
      inputs.push_back(bi);
    tape.record("linear", inputs, out, [xi, wi, bi, rows, k, n](std::span<const double> g) {
      if (xi->requires_grad) {
        std::vector<double> scratch;
        detail::gemm_nt(g.data(), wi->data.data(), xi->grad.data(), rows, n, k, scratch);
      }
      if (wi->requires_grad) {
        std::vector<double> scratch;
        detail::gemm_tn(xi->data.data(), g.data(), wi->grad.data(), rows, k, n, scratch);
      }
      if (bi && bi->requires_grad)
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < n; ++j)
            bi->grad[j] += g[r * n + j];
    });
  }
  return out;
}

inline Tensor linear(const Tensor &x, const Tensor &weight, const Tensor &bias) {
  return linear(x, weight, &bias);
}

// ---------------------------------------------------------------------------
// Normalizations
// ---------------------------------------------------------------------------

namespace detail {
struct AxisLayout {
  std::size_t outer, extent, inner;
};
inline AxisLayout axis_layout(const Shape &s, std::size_t axis) {
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisLayout l{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i)
    l.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i)
    l.inner *= s[i];
  return l;
}
} // namespace detail

/// Max-shifted softmax along `axis`.
inline Tensor softmax(const Tensor &x, std::size_t axis) {
  detail::check_finite(x.values(), "softmax");
  const auto l = detail::axis_layout(x.shape(), axis);
  Tensor out = detail::make_output(x.shape());
  auto &o = out.values();
  const auto &xv = x.values();
  for (std::size_t r = 0; r < l.outer; ++r)
    for (std::size_t j = 0; j < l.inner; ++j) {
      const std::size_t base = r * l.extent * l.inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < l.extent; ++a)
        mx = std::max(mx, xv[base + a * l.inner]);
      double total = 0.0;
      for (std::size_t a = 0; a < l.extent; ++a) {
        const double e = std::exp(xv[base + a * l.inner] - mx);
        o[base + a * l.inner] = e;
        total += e;
      }
      for (std::size_t a = 0; a < l.extent; ++a)
        o[base + a * l.inner] /= total;
    }
  auto &tape = Tape::current();
  if (tape.wants({&x})) {
    auto xi = x.impl(), oi = out.impl();
    tape.record("softmax", {xi}, out, [xi, oi, l](std::span<const double> g) {
      const auto &y = oi->data;
      for (std::size_t r = 0; r < l.outer; ++r)
        for (std::size_t j = 0; j < l.inner; ++j) {
          const std::size_t base = r * l.extent * l.inner + j;
          double dot = 0.0;
          for (std::size_t a = 0; a < l.extent; ++a)
            dot += g[base + a * l.inner] * y[base + a * l.inner];
          for (std::size_t a = 0; a < l.extent; ++a) {
            const std::size_t idx = base + a * l.inner;
            xi->grad[idx] += y[idx] * (g[idx] - dot);
          }
        }
    });
  }
  return out;
}

inline Tensor log_softmax(const Tensor &x, std::size_t axis) {
  detail::check_finite(x.values(), "log_softmax");
  const auto l = detail::axis_layout(x.shape(), axis);
  Tensor out = detail::make_output(x.shape());
  auto &o = out.values();
  const auto &xv = x.values();
  for (std::size_t r = 0; r < l.outer; ++r)
    for (std::size_t j = 0; j < l.inner; ++j) {
      const std::size_t base = r * l.extent * l.inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < l.extent; ++a)
        mx = std::max(mx, xv[base + a * l.inner]);
      double total = 0.0;
      for (std::size_t a = 0; a < l.extent; ++a)
        total += std::exp(xv[base + a * l.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t a = 0; a < l.extent; ++a)
        o[base + a * l.inner] = xv[base + a * l.inner] - lse;
    }
  auto &tape = Tape::current();
  if (tape.wants({&x})) {
    auto xi = x.impl(), oi = out.impl();
    tape.record("log_softmax", {xi}, out, [xi, oi, l](std::span<const double> g) {
      const auto &y = oi->data;
      for (std::size_t r = 0; r < l.outer; ++r)
        for (std::size_t j = 0; j < l.inner; ++j) {
          const std::size_t base = r * l.extent * l.inner + j;
          double gsum = 0.0;
          for (std::size_t a = 0; a < l.extent; ++a)
            gsum += g[base + a * l.inner];
          for (std::size_t a = 0; a < l.extent; ++a) {
            const std::size_t idx = base + a * l.inner;
            xi->grad[idx] += g[idx] - std::exp(y[idx]) * gsum;
          }
        }
    });
  }
  return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes over the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor &x, const Tensor &gain, const Tensor &bias,
                         double eps = kLayerNormEps) {
  if (x.rank() == 0)
    throw DimensionError("layer_norm on rank-0 tensor");
  const std::size_t c = x.shape().back();
  if (gain.shape() != Shape{c} || bias.shape() != Shape{c})
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match channels of " +
                         shape_str(x.shape()));
  if (!(eps > 0.0))
    throw ContractError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / c;
  Tensor out = detail::make_output(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto &xv = x.values();
  const auto &gv = gain.values();
  const auto &bv = bias.values();
  auto &o = out.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double *row = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * c + j] = h;
      o[r * c + j] = h * gv[j] + bv[j];
    }
  }
  auto &tape = Tape::current();
  if (tape.wants({&x, &gain, &bias})) {
    auto xi = x.impl(), gi = gain.impl(), bi = bias.impl();
    tape.record("layer_norm", {xi, gi, bi}, out,
                [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
                 c](std::span<const double> g) {
                  const double inv_c = 1.0 / static_cast<double>(c);
                  for (std::size_t r = 0; r < rows; ++r) {
                    const double *gr = g.data() + r * c;
                    const double *hr = xhat.data() + r * c;
                    if (gi->requires_grad)
                      for (std::size_t j = 0; j < c; ++j)
                        gi->grad[j] += gr[j] * hr[j];
                    if (bi->requires_grad)
                      for (std::size_t j = 0; j < c; ++j)
                        bi->grad[j] += gr[j];
                    if (!xi->requires_grad)
                      continue;
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                      const double dh = gr[j] * gi->data[j];
                      sum_dh += dh;
                      sum_dh_h += dh * hr[j];
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                      const double dh = gr[j] * gi->data[j];
                      xi->grad[r * c + j] +=
                          inv_std[r] * (dh - inv_c * sum_dh - hr[j] * inv_c * sum_dh_h);
                    }
                  }
                });
  }
  return out;
}

/// Max over non-overlapping pairs along the last axis: (.., c) -> (.., c/2).
/// Ties go to the first element of the pair.
inline Tensor pairwise_max_pool(const Tensor &x) {
  if (x.rank() == 0 || x.shape().back() % 2 != 0)
    throw ContractError("pairwise_max_pool needs an even last extent, got " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape.back() /= 2;
  std::vector<std::size_t> index(x.numel() / 2);
  const auto &xv = x.values();
  for (std::size_t i = 0; i < index.size(); ++i)
    index[i] = xv[2 * i + 1] > xv[2 * i] ? 2 * i + 1 : 2 * i;
  return gather(x, std::move(out_shape), std::move(index));
}

} // namespace transadapter
