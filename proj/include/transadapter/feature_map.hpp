#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "transadapter/ops.hpp"

namespace transadapter {

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t window = 4;
  std::size_t shift = 2;
  std::size_t num_classes = 3;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t patch_features() const { return patch_size * patch_size * 3; }

  void validate() const {
    auto fail = [](const std::string &why) { throw ContractError("BackboneConfig: " + why); };
    if (image_size == 0 || patch_size == 0 || embed_dim == 0 || depth == 0 || heads == 0 ||
        window == 0 || num_classes == 0)
      fail("all sizes must be positive");
    if (image_size % patch_size != 0)
      fail("image_size must be divisible by patch_size");
    if (grid() % window != 0)
      fail("token grid side must be divisible by window");
    if (shift >= window)
      fail("shift must be smaller than window");
    if (embed_dim % heads != 0)
      fail("embed_dim must be divisible by heads");
    if (embed_dim % 2 != 0)
      fail("embed_dim must be even (discriminator pooling)");
  }
};

enum class Stream : std::uint8_t { source = 0, target = 1 };

/// Token features (batch, rows*cols, channels) laid out row-major on the grid.
struct FeatureMap {
  Tensor data;
  std::size_t rows = 0;
  std::size_t cols = 0;
  Stream stream = Stream::source;

  std::size_t batch() const { return data.dim(0); }
  std::size_t tokens() const { return data.dim(1); }
  std::size_t channels() const { return data.dim(2); }

  void check() const {
    if (data.rank() != 3 || data.dim(1) != rows * cols)
      throw DimensionError("FeatureMap: data " + shape_str(data.shape()) + " does not match grid " +
                           std::to_string(rows) + "x" + std::to_string(cols));
  }
};

namespace detail {
inline std::size_t wrap(long long v, std::size_t n) {
  const auto m = static_cast<long long>(n);
  return static_cast<std::size_t>(((v % m) + m) % m);
}
} // namespace detail

/// For every (window, local slot) of a grid rolled by (-shift, -shift), the
/// token index in the unrolled grid. Windows are row-major, then slots.
inline std::vector<std::size_t> window_token_index(std::size_t rows, std::size_t cols,
                                                   std::size_t window, long long shift = 0) {
  if (window == 0 || rows % window != 0 || cols % window != 0)
    throw DimensionError("window " + std::to_string(window) + " does not divide grid " +
                         std::to_string(rows) + "x" + std::to_string(cols));
  std::vector<std::size_t> index;
  index.reserve(rows * cols);
  for (std::size_t wr = 0; wr < rows / window; ++wr)
    for (std::size_t wc = 0; wc < cols / window; ++wc)
      for (std::size_t lr = 0; lr < window; ++lr)
        for (std::size_t lc = 0; lc < window; ++lc) {
          const auto r = detail::wrap(static_cast<long long>(wr * window + lr) + shift, rows);
          const auto c = detail::wrap(static_cast<long long>(wc * window + lc) + shift, cols);
          index.push_back(r * cols + c);
        }
  return index;
}

/// (B, T, C) -> (B*num_windows, window^2, C), optionally on the rolled grid.
inline Tensor partition_windows(const FeatureMap &f, std::size_t window, long long shift = 0) {
  f.check();
  const auto tok = window_token_index(f.rows, f.cols, window, shift);
  const std::size_t B = f.batch(), T = f.tokens(), C = f.channels();
  const std::size_t n = window * window;
  const std::size_t nw = T / n;
  std::vector<std::size_t> index;
  index.reserve(B * T * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < T; ++s)
      for (std::size_t c = 0; c < C; ++c)
        index.push_back((b * T + tok[s]) * C + c);
  return gather(f.data, {B * nw, n, C}, std::move(index));
}

inline Tensor window_partition(const FeatureMap &f, std::size_t window) {
  return partition_windows(f, window, 0);
}

/// Inverse of partition_windows.
inline FeatureMap window_reverse(const Tensor &windows, std::size_t rows, std::size_t cols,
                                 std::size_t window, Stream stream, long long shift = 0) {
  if (windows.rank() != 3 || windows.dim(1) != window * window)
    throw DimensionError("window_reverse: unexpected shape " + shape_str(windows.shape()));
  const auto tok = window_token_index(rows, cols, window, shift);
  const std::size_t T = rows * cols;
  const std::size_t C = windows.dim(2);
  if (windows.numel() % (T * C) != 0)
    throw DimensionError("window_reverse: " + shape_str(windows.shape()) + " not a whole batch");
  const std::size_t B = windows.numel() / (T * C);
  std::vector<std::size_t> inverse(T);
  for (std::size_t s = 0; s < T; ++s)
    inverse[tok[s]] = s;
  std::vector<std::size_t> index;
  index.reserve(B * T * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c)
        index.push_back((b * T + inverse[t]) * C + c);
  return FeatureMap{gather(windows, {B, T, C}, std::move(index)), rows, cols, stream};
}

/// Toroidal roll of the token grid by (-shift, -shift): out(r, c) = in(r+shift, c+shift).
inline FeatureMap cyclic_shift(const FeatureMap &f, long long shift) {
  f.check();
  const std::size_t B = f.batch(), T = f.tokens(), C = f.channels();
  std::vector<std::size_t> index;
  index.reserve(B * T * C);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < f.rows; ++r)
      for (std::size_t col = 0; col < f.cols; ++col) {
        const auto sr = detail::wrap(static_cast<long long>(r) + shift, f.rows);
        const auto sc = detail::wrap(static_cast<long long>(col) + shift, f.cols);
        for (std::size_t c = 0; c < C; ++c)
          index.push_back((b * T + sr * f.cols + sc) * C + c);
      }
  return FeatureMap{gather(f.data, f.data.shape(), std::move(index)), f.rows, f.cols, f.stream};
}

/// (B, T, C) -> (B*num_windows, heads, window^2, C/heads) on the rolled grid.
inline Tensor split_window_heads(const Tensor &x, std::size_t rows, std::size_t cols,
                                 std::size_t window, std::size_t heads, long long shift) {
  const auto tok = window_token_index(rows, cols, window, shift);
  const std::size_t T = rows * cols, C = x.dim(2), B = x.dim(0);
  const std::size_t n = window * window, nw = T / n, dh = C / heads;
  std::vector<std::size_t> index;
  index.reserve(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t w = 0; w < nw; ++w)
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t d = 0; d < dh; ++d)
            index.push_back((b * T + tok[w * n + i]) * C + h * dh + d);
  return gather(x, {B * nw, heads, n, dh}, std::move(index));
}

/// Inverse of split_window_heads.
inline Tensor merge_window_heads(const Tensor &x, std::size_t rows, std::size_t cols,
                                 std::size_t window, long long shift) {
  const auto tok = window_token_index(rows, cols, window, shift);
  const std::size_t T = rows * cols, n = window * window, nw = T / n;
  const std::size_t heads = x.dim(1), dh = x.dim(3), C = heads * dh;
  const std::size_t B = x.dim(0) / nw;
  std::vector<std::size_t> slot_of(T);
  for (std::size_t s = 0; s < T; ++s)
    slot_of[tok[s]] = s;
  std::vector<std::size_t> index;
  index.reserve(x.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t w = slot_of[t] / n, i = slot_of[t] % n;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t h = c / dh, d = c % dh;
        index.push_back((((b * nw + w) * heads + h) * n + i) * dh + d);
      }
    }
  return gather(x, {B, T, C}, std::move(index));
}

} // namespace transadapter
