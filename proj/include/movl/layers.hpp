#pragma once

#include <cmath>

#include "movl/error.hpp"
#include "movl/random.hpp"
#include "movl/tensor.hpp"

namespace movl {

/// Unfolds x into a (C*k*k) x (B*Ho*Wo) row-major patch matrix.
template <typename Scalar>
Planes<Scalar> im2col(const Tensor4<Scalar>& x, Index kernel, Index stride, Index pad, Index out_h,
                      Index out_w) {
  Planes<Scalar> col(x.channels * kernel * kernel, x.batch * out_h * out_w);
  for (Index c = 0; c < x.channels; ++c) {
    for (Index ky = 0; ky < kernel; ++ky) {
      for (Index kx = 0; kx < kernel; ++kx) {
        Scalar* row = col.row((c * kernel + ky) * kernel + kx).data();
        for (Index b = 0; b < x.batch; ++b) {
          const Scalar* src = x.data.row(c).data() + b * x.plane();
          for (Index oy = 0; oy < out_h; ++oy) {
            const Index iy = oy * stride - pad + ky;
            Scalar* dst = row + (b * out_h + oy) * out_w;
            if (iy < 0 || iy >= x.height) {
              std::fill(dst, dst + out_w, Scalar(0));
              continue;
            }
            for (Index ox = 0; ox < out_w; ++ox) {
              const Index ix = ox * stride - pad + kx;
              dst[ox] = (ix < 0 || ix >= x.width) ? Scalar(0) : src[iy * x.width + ix];
            }
          }
        }
      }
    }
  }
  return col;
}

/// Adjoint of im2col: scatters patch gradients back onto the input grid.
template <typename Scalar>
void col2im(const Planes<Scalar>& col, Index kernel, Index stride, Index pad, Index out_h, Index out_w,
            Tensor4<Scalar>& grad_x) {
  grad_x.data.setZero();
  for (Index c = 0; c < grad_x.channels; ++c) {
    for (Index ky = 0; ky < kernel; ++ky) {
      for (Index kx = 0; kx < kernel; ++kx) {
        const Scalar* row = col.row((c * kernel + ky) * kernel + kx).data();
        for (Index b = 0; b < grad_x.batch; ++b) {
          Scalar* dst = grad_x.data.row(c).data() + b * grad_x.plane();
          for (Index oy = 0; oy < out_h; ++oy) {
            const Index iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= grad_x.height) continue;
            const Scalar* src = row + (b * out_h + oy) * out_w;
            for (Index ox = 0; ox < out_w; ++ox) {
              const Index ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < grad_x.width) dst[iy * grad_x.width + ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

/// Conv(3x3, stride 2, pad 1, no bias) -> GroupNorm -> SiLU.
template <typename Scalar>
struct ConvBlock {
  inline static constexpr Index kKernel = 3;
  inline static constexpr Index kStride = 2;
  inline static constexpr Index kPad = 1;
  inline static constexpr double kEps = 1e-5;

  Index in_channels = 0;
  Index out_channels = 0;
  Index groups = 1;
  Matrix<Scalar> weight;  // [out, in*3*3]
  Vector<Scalar> gamma;   // [out]
  Vector<Scalar> beta;    // [out]

  struct Cache {
    Planes<Scalar> col;  // empty unless weight gradients were requested
    Planes<Scalar> xhat;
    Planes<Scalar> z;    // GroupNorm output, SiLU input
    Matrix<Scalar> inv_std;  // [B, groups]
    Index in_h = 0;
    Index in_w = 0;
  };

  struct Grads {
    Matrix<Scalar> weight;
    Vector<Scalar> gamma;
    Vector<Scalar> beta;
  };

  static Index out_extent(Index in) { return (in + 2 * kPad - kKernel) / kStride + 1; }

  static ConvBlock random(Index in_c, Index out_c, Index groups, Rng& rng) {
    if (out_c % groups != 0) throw ConfigError("conv block: channels must divide into groups");
    ConvBlock blk;
    blk.in_channels = in_c;
    blk.out_channels = out_c;
    blk.groups = groups;
    const double std = std::sqrt(2.0 / static_cast<double>(in_c * kKernel * kKernel));
    blk.weight.resize(out_c, in_c * kKernel * kKernel);
    for (Index i = 0; i < blk.weight.size(); ++i) blk.weight.data()[i] = static_cast<Scalar>(std * rng.normal());
    blk.gamma = Vector<Scalar>::Ones(out_c);
    blk.beta = Vector<Scalar>::Zero(out_c);
    return blk;
  }

  Tensor4<Scalar> forward(const Tensor4<Scalar>& x, Cache* cache, bool keep_columns) const {
    if (x.channels != in_channels) throw ContractError("conv block: input channel mismatch");
    const Index oh = out_extent(x.height);
    const Index ow = out_extent(x.width);
    Planes<Scalar> col = im2col(x, kKernel, kStride, kPad, oh, ow);
    Tensor4<Scalar> y;
    y.batch = x.batch;
    y.channels = out_channels;
    y.height = oh;
    y.width = ow;
    y.data.noalias() = weight * col;

    // GroupNorm with per-sample statistics.
    const Index cg = out_channels / groups;
    const Index plane = oh * ow;
    const auto count = static_cast<Scalar>(cg * plane);
    Matrix<Scalar> inv_std(x.batch, groups);
    for (Index b = 0; b < x.batch; ++b) {
      for (Index g = 0; g < groups; ++g) {
        auto blk = y.data.block(g * cg, b * plane, cg, plane);
        const Scalar mean = blk.sum() / count;
        blk.array() -= mean;
        const Scalar var = blk.squaredNorm() / count;
        const Scalar is = Scalar(1) / std::sqrt(var + static_cast<Scalar>(kEps));
        blk *= is;
        inv_std(b, g) = is;
      }
    }
    if (cache) {
      cache->xhat = y.data;
      cache->inv_std = std::move(inv_std);
      cache->in_h = x.height;
      cache->in_w = x.width;
      if (keep_columns) cache->col = std::move(col);
      else cache->col.resize(0, 0);
    }
    for (Index c = 0; c < out_channels; ++c) {
      y.data.row(c) = y.data.row(c).array() * gamma(c) + beta(c);
    }
    if (cache) cache->z = y.data;
    y.data = y.data.array() / (Scalar(1) + (-y.data.array()).exp());
    return y;
  }

  /// Returns the gradient w.r.t. the block input; fills grads when non-null
  /// (requires a cache built with keep_columns).
  Tensor4<Scalar> backward(const Cache& cache, const Tensor4<Scalar>& grad_y, Index batch,
                           Grads* grads) const {
    const Index oh = grad_y.height;
    const Index ow = grad_y.width;
    const Index plane = oh * ow;
    // SiLU'
    const auto sig = (Scalar(1) / (Scalar(1) + (-cache.z.array()).exp())).eval();
    Planes<Scalar> dz = grad_y.data.array() * sig * (Scalar(1) + cache.z.array() * (Scalar(1) - sig));

    if (grads) {
      grads->gamma = (dz.array() * cache.xhat.array()).rowwise().sum().matrix();
      grads->beta = dz.rowwise().sum();
    }
    for (Index c = 0; c < out_channels; ++c) dz.row(c) *= gamma(c);

    const Index cg = out_channels / groups;
    const auto count = static_cast<Scalar>(cg * plane);
    for (Index b = 0; b < batch; ++b) {
      for (Index g = 0; g < groups; ++g) {
        auto d = dz.block(g * cg, b * plane, cg, plane);
        const auto xh = cache.xhat.block(g * cg, b * plane, cg, plane);
        const Scalar mean_d = d.sum() / count;
        const Scalar mean_dx = (d.array() * xh.array()).sum() / count;
        d = (cache.inv_std(b, g) * (d.array() - mean_d - xh.array() * mean_dx)).matrix();
      }
    }

    if (grads) {
      if (cache.col.size() == 0) throw ContractError("conv block: weight gradients need cached columns");
      grads->weight.noalias() = dz * cache.col.transpose();
    }
    Planes<Scalar> dcol = weight.transpose() * dz;
    Tensor4<Scalar> grad_x(batch, in_channels, cache.in_h, cache.in_w);
    col2im(dcol, kKernel, kStride, kPad, oh, ow, grad_x);
    return grad_x;
  }
};

/// Fully connected layer computing features * W^T + b.
template <typename Scalar>
struct Linear {
  Matrix<Scalar> weight;  // [out, in]
  Vector<Scalar> bias;    // [out]
  bool trainable = true;

  static Linear zeros(Index out, Index in) {
    return {Matrix<Scalar>::Zero(out, in), Vector<Scalar>::Zero(out), true};
  }

  static Linear random(Index out, Index in, Rng& rng) {
    Linear l = zeros(out, in);
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (Index i = 0; i < l.weight.size(); ++i) {
      l.weight.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
    }
    return l;
  }

  Index in_features() const { return weight.cols(); }
  Index out_features() const { return weight.rows(); }

  Matrix<Scalar> forward(const Matrix<Scalar>& features) const {
    if (features.cols() != weight.cols()) {
      throw ContractError("linear: feature dim " + std::to_string(features.cols()) + " != " +
                          std::to_string(weight.cols()));
    }
    Matrix<Scalar> out = features * weight.transpose();
    out.rowwise() += bias.transpose();
    return out;
  }

  template <typename To>
  Linear<To> cast() const {
    return {weight.template cast<To>(), bias.template cast<To>(), trainable};
  }
};

}  // namespace movl
