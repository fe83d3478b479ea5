#pragma once

#include <Eigen/Dense>

#include <cstdint>

namespace movl {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Row-major matrix; one row per channel so every channel plane is contiguous.
template <typename Scalar>
using Planes = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// A [B, C, H, W] batch stored channel-major: `data` has C rows and
/// B*H*W columns, column index (b*H + y)*W + x.
template <typename Scalar>
struct Tensor4 {
  Index batch = 0;
  Index channels = 0;
  Index height = 0;
  Index width = 0;
  Planes<Scalar> data;

  Tensor4() = default;
  Tensor4(Index b, Index c, Index h, Index w)
      : batch(b), channels(c), height(h), width(w), data(Planes<Scalar>::Zero(c, b * h * w)) {}

  Index plane() const { return height * width; }

  Scalar& operator()(Index b, Index c, Index y, Index x) {
    return data(c, (b * height + y) * width + x);
  }
  Scalar operator()(Index b, Index c, Index y, Index x) const {
    return data(c, (b * height + y) * width + x);
  }

  /// Columns belonging to sample b for channel c, as a contiguous segment.
  auto sample_plane(Index b, Index c) { return data.row(c).segment(b * plane(), plane()); }
  auto sample_plane(Index b, Index c) const {
    return data.row(c).segment(b * plane(), plane());
  }

  bool same_shape(const Tensor4& other) const {
    return batch == other.batch && channels == other.channels && height == other.height &&
           width == other.width;
  }

  template <typename To>
  Tensor4<To> cast() const {
    Tensor4<To> out;
    out.batch = batch;
    out.channels = channels;
    out.height = height;
    out.width = width;
    out.data = data.template cast<To>();
    return out;
  }
};

}  // namespace movl
