#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "movl/error.hpp"
#include "movl/tensor.hpp"

namespace movl {

/// Per-channel normalization constants applied as (x - mean) / std.
struct Normalization {
  std::vector<double> mean{0.5, 0.5, 0.5};
  std::vector<double> std{0.5, 0.5, 0.5};
};

namespace detail {

struct ResizeTap {
  Index lo;
  Index hi;
  double frac;
};

// align_corners=false source coordinates, clamped at the low edge.
inline std::vector<ResizeTap> resize_taps(Index in, Index out) {
  std::vector<ResizeTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<Index>(std::floor(src));
    lo = std::min(lo, in - 1);
    const Index hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize, no antialiasing, align_corners=false.
template <typename Scalar>
Tensor4<Scalar> resize_bilinear(const Tensor4<Scalar>& x, Index out_h, Index out_w) {
  if (out_h < 1 || out_w < 1) throw ConfigError("resize: output size must be >= 1");
  if (out_h == x.height && out_w == x.width) return x;
  Tensor4<Scalar> y(x.batch, x.channels, out_h, out_w);
  const auto ty = detail::resize_taps(x.height, out_h);
  const auto tx = detail::resize_taps(x.width, out_w);
  for (Index b = 0; b < x.batch; ++b) {
    for (Index c = 0; c < x.channels; ++c) {
      for (Index oy = 0; oy < out_h; ++oy) {
        const auto& ry = ty[static_cast<std::size_t>(oy)];
        const auto fy = static_cast<Scalar>(ry.frac);
        for (Index ox = 0; ox < out_w; ++ox) {
          const auto& rx = tx[static_cast<std::size_t>(ox)];
          const auto fx = static_cast<Scalar>(rx.frac);
          const Scalar top = (Scalar(1) - fx) * x(b, c, ry.lo, rx.lo) + fx * x(b, c, ry.lo, rx.hi);
          const Scalar bot = (Scalar(1) - fx) * x(b, c, ry.hi, rx.lo) + fx * x(b, c, ry.hi, rx.hi);
          y(b, c, oy, ox) = (Scalar(1) - fy) * top + fy * bot;
        }
      }
    }
  }
  return y;
}

template <typename Scalar>
void check_normalization(const Tensor4<Scalar>& x, const Normalization& norm) {
  if (norm.mean.size() != static_cast<std::size_t>(x.channels) ||
      norm.std.size() != static_cast<std::size_t>(x.channels)) {
    throw ConfigError("normalization: mean/std length must equal channel count");
  }
  for (double s : norm.std) {
    if (!(s > 0.0)) throw ConfigError("normalization: std entries must be > 0");
  }
}

/// In-place (x - mean_c) / std_c.
template <typename Scalar>
void normalize_inplace(Tensor4<Scalar>& x, const Normalization& norm) {
  check_normalization(x, norm);
  for (Index c = 0; c < x.channels; ++c) {
    const auto m = static_cast<Scalar>(norm.mean[static_cast<std::size_t>(c)]);
    const auto inv = static_cast<Scalar>(1.0 / norm.std[static_cast<std::size_t>(c)]);
    x.data.row(c) = (x.data.row(c).array() - m) * inv;
  }
}

/// Backward of normalize_inplace: scales each channel's gradient by 1/std_c.
template <typename Scalar>
void normalize_backward_inplace(Tensor4<Scalar>& grad, const Normalization& norm) {
  check_normalization(grad, norm);
  for (Index c = 0; c < grad.channels; ++c) {
    grad.data.row(c) *= static_cast<Scalar>(1.0 / norm.std[static_cast<std::size_t>(c)]);
  }
}

/// Bilinear resize to out_size x out_size, then per-channel normalization.
template <typename Scalar>
Tensor4<Scalar> preprocess(const Tensor4<Scalar>& batch, const Normalization& norm, Index out_size) {
  if (out_size < 1) throw ConfigError("preprocess: out_size must be >= 1");
  check_normalization(batch, norm);
  Tensor4<Scalar> y = resize_bilinear(batch, out_size, out_size);
  normalize_inplace(y, norm);
  return y;
}

}  // namespace movl
