#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "movl/tensor.hpp"

namespace movl {

struct SplitRange {
  std::size_t offset = 0;
  std::size_t length = 0;
};

struct DatasetMeta {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;
  std::size_t num_classes = 0;
  std::map<std::string, SplitRange> splits;
  std::vector<std::string> class_names;

  std::size_t image_bytes() const { return h * w * c; }
};

/// Validates meta invariants (K >= 2, C in {1,3}, disjoint in-range splits).
void validate_meta(const DatasetMeta& meta);

/// Read-only in-memory sample store. Pixels are kept as uint8 (HWC per
/// sample) and scaled to [0,1] on access.
class Dataset {
 public:
  Dataset(DatasetMeta meta, std::vector<std::uint8_t> images, std::vector<std::uint16_t> labels);

  const DatasetMeta& meta() const { return meta_; }
  std::size_t size() const { return meta_.n; }
  std::size_t num_classes() const { return meta_.num_classes; }
  int label(std::size_t i) const { return labels_[i]; }

  std::span<const std::uint8_t> raw_images() const { return images_; }
  std::span<const std::uint16_t> raw_labels() const { return labels_; }

  /// Indices of a named split; throws ContractError when absent.
  std::vector<std::size_t> split(const std::string& name) const;
  bool has_split(const std::string& name) const { return meta_.splits.count(name) != 0; }

  std::vector<int> labels(std::span<const std::size_t> indices) const;

  /// [B, C, H, W] batch in [0,1].
  template <typename Scalar>
  Tensor4<Scalar> images(std::span<const std::size_t> indices) const {
    const auto b = static_cast<Index>(indices.size());
    const auto c = static_cast<Index>(meta_.c);
    const auto h = static_cast<Index>(meta_.h);
    const auto w = static_cast<Index>(meta_.w);
    Tensor4<Scalar> out(b, c, h, w);
    const Scalar inv = Scalar(1) / Scalar(255);
    for (Index i = 0; i < b; ++i) {
      const std::uint8_t* px = images_.data() + indices[static_cast<std::size_t>(i)] * meta_.image_bytes();
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          for (Index ch = 0; ch < c; ++ch) {
            out(i, ch, y, x) = static_cast<Scalar>(*px++) * inv;
          }
        }
      }
    }
    return out;
  }

  /// Single sample as a [1, C, H, W] tensor.
  Tensor4<float> sample(std::size_t i) const {
    const std::size_t idx[] = {i};
    return images<float>(idx);
  }

 private:
  DatasetMeta meta_;
  std::vector<std::uint8_t> images_;
  std::vector<std::uint16_t> labels_;
};

/// Reads `meta.json`, `images.u8`, `labels.u16` from root.
Dataset load_dataset(const std::filesystem::path& root);

/// Writes the dataset container into root (created if needed).
void save_dataset(const Dataset& data, const std::filesystem::path& root);

enum class Domain { kSource, kTarget };

struct SyntheticDomainSpec {
  Domain domain = Domain::kSource;
  std::size_t num_classes = 10;
  std::size_t image_size = 64;
  std::uint64_t seed = 0;
  bool grayscale = false;
  bool invert = false;
  double noise_sigma = 0.0;
  /// Background grating frequency in cycles per pixel.
  double texture_frequency = 0.08;
  std::size_t val_per_class = 20;
  std::size_t test_per_class = 20;

  /// Defaults for the colored source domain.
  static SyntheticDomainSpec source(std::size_t num_classes, std::uint64_t seed);
  /// Defaults for the shifted target domain: grayscale, inverted, noisy.
  static SyntheticDomainSpec target(std::size_t num_classes, std::uint64_t seed);
};

/// Number of distinct shape classes the renderer knows.
inline constexpr std::size_t kMaxShapeClasses = 10;

/// Renders K * n_per_class images, label i % K for sample i. Splits are
/// contiguous ranges "train", "val", "test" (each a multiple of K long so
/// classes stay exactly balanced).
Dataset make_synthetic(const SyntheticDomainSpec& spec, std::size_t n_per_class);

/// make_synthetic followed by save_dataset.
Dataset generate_synthetic(const SyntheticDomainSpec& spec, std::size_t n_per_class,
                           const std::filesystem::path& root);

const char* shape_name(std::size_t cls);

}  // namespace movl
