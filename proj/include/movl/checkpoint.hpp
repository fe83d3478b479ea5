#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "movl/tensor.hpp"

namespace movl {

struct NamedTensor {
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  std::int64_t numel() const;
};

/// Named float32 tensors; iteration order (sorted by name) is the
/// serialization order.
using ParameterMap = std::map<std::string, NamedTensor>;

/// Checkpoint container: "MOVLCKPT", u64 little-endian header length,
/// UTF-8 header JSON, then the raw little-endian float32 data region.
struct Checkpoint {
  inline static constexpr int kFormatVersion = 1;

  ParameterMap tensors;
  /// Free-form header entries (prompt geometry, class names, provenance).
  nlohmann::json attributes = nlohmann::json::object();
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

/// Reads and verifies the data-region SHA-256. Throws CheckpointError.
Checkpoint read_checkpoint(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

/// Serialized data region exactly as it appears in a checkpoint file.
std::vector<std::uint8_t> serialize_data(const ParameterMap& params);

/// SHA-256 of serialize_data(params).
std::string parameters_hash(const ParameterMap& params);

template <typename Derived>
NamedTensor to_named(const Eigen::DenseBase<Derived>& m, std::vector<std::int64_t> shape) {
  NamedTensor t;
  t.shape = std::move(shape);
  t.values.reserve(static_cast<std::size_t>(m.size()));
  // Row-major flattening regardless of the source storage order.
  for (Index r = 0; r < m.rows(); ++r) {
    for (Index c = 0; c < m.cols(); ++c) t.values.push_back(static_cast<float>(m(r, c)));
  }
  return t;
}

/// Copies a named tensor into a rows x cols matrix (row-major flattening).
template <typename Scalar>
Matrix<Scalar> from_named(const NamedTensor& t, Index rows, Index cols) {
  if (static_cast<Index>(t.values.size()) != rows * cols) {
    throw std::invalid_argument("tensor size does not match requested shape");
  }
  Matrix<Scalar> m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      m(r, c) = static_cast<Scalar>(t.values[static_cast<std::size_t>(r * cols + c)]);
    }
  }
  return m;
}

const NamedTensor& require_tensor(const ParameterMap& params, const std::string& name);

}  // namespace movl
