#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "movl/checkpoint.hpp"
#include "movl/image.hpp"
#include "movl/layers.hpp"

namespace movl {

class Dataset;

struct BackboneConfig {
  Index in_channels = 3;
  std::vector<Index> widths{16, 32, 64, 128};
  Index groups = 4;
  Index input_size = 64;
};

/// Frozen-by-default feature encoder: stride-2 conv blocks followed by a
/// global average pool. Normalization uses per-sample statistics only, so
/// forward is batch-size invariant and deterministic.
template <typename Scalar>
class ToyCnn {
 public:
  struct Cache {
    std::vector<typename ConvBlock<Scalar>::Cache> blocks;
    Index batch = 0;
    Index last_h = 0;
    Index last_w = 0;
  };
  using Grads = std::vector<typename ConvBlock<Scalar>::Grads>;

  ToyCnn() = default;

  static ToyCnn random(const BackboneConfig& cfg, std::uint64_t seed) {
    ToyCnn net;
    net.cfg_ = cfg;
    Rng rng(seed);
    Index in = cfg.in_channels;
    for (Index w : cfg.widths) {
      net.blocks_.push_back(ConvBlock<Scalar>::random(in, w, cfg.groups, rng));
      in = w;
    }
    return net;
  }

  const BackboneConfig& config() const { return cfg_; }
  Index feature_dim() const { return cfg_.widths.back(); }
  Index input_size() const { return cfg_.input_size; }
  bool frozen() const { return frozen_; }
  void set_frozen(bool f) { frozen_ = f; }

  std::vector<ConvBlock<Scalar>>& blocks() { return blocks_; }
  const std::vector<ConvBlock<Scalar>>& blocks() const { return blocks_; }

  /// images [B, C, S, S] (normalized) -> features [B, D]. With a cache the
  /// pass can be differentiated w.r.t. its input; keep_columns additionally
  /// enables parameter gradients.
  Matrix<Scalar> forward(const Tensor4<Scalar>& images, Cache* cache = nullptr,
                         bool keep_columns = false) const {
    if (images.height != cfg_.input_size || images.width != cfg_.input_size ||
        images.channels != cfg_.in_channels) {
      throw ContractError("backbone: expected input [B," + std::to_string(cfg_.in_channels) + "," +
                          std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) +
                          "], got [" + std::to_string(images.batch) + "," +
                          std::to_string(images.channels) + "," + std::to_string(images.height) + "," +
                          std::to_string(images.width) + "]");
    }
    if (cache) {
      cache->blocks.assign(blocks_.size(), {});
      cache->batch = images.batch;
    }
    Tensor4<Scalar> h = blocks_.front().forward(images, cache ? &cache->blocks[0] : nullptr, keep_columns);
    for (std::size_t i = 1; i < blocks_.size(); ++i) {
      h = blocks_[i].forward(h, cache ? &cache->blocks[i] : nullptr, keep_columns);
    }
    if (cache) {
      cache->last_h = h.height;
      cache->last_w = h.width;
    }
    // Global average pool.
    Matrix<Scalar> features(h.batch, h.channels);
    const auto inv = Scalar(1) / static_cast<Scalar>(h.plane());
    for (Index b = 0; b < h.batch; ++b) {
      for (Index c = 0; c < h.channels; ++c) features(b, c) = h.sample_plane(b, c).sum() * inv;
    }
    return features;
  }

  /// Gradient of a scalar w.r.t. the input images given its gradient w.r.t.
  /// the features. Parameter gradients are written when grads != nullptr.
  Tensor4<Scalar> backward(const Cache& cache, const Matrix<Scalar>& grad_features, Grads* grads) const {
    const Index d = feature_dim();
    if (grad_features.rows() != cache.batch || grad_features.cols() != d) {
      throw ContractError("backbone: gradient shape mismatch");
    }
    Tensor4<Scalar> g(cache.batch, d, cache.last_h, cache.last_w);
    const auto inv = Scalar(1) / static_cast<Scalar>(g.plane());
    for (Index b = 0; b < cache.batch; ++b) {
      for (Index c = 0; c < d; ++c) g.sample_plane(b, c).setConstant(grad_features(b, c) * inv);
    }
    if (grads) grads->assign(blocks_.size(), {});
    for (std::size_t i = blocks_.size(); i-- > 0;) {
      g = blocks_[i].backward(cache.blocks[i], g, cache.batch, grads ? &(*grads)[i] : nullptr);
    }
    return g;
  }

  /// Forward in fixed-size chunks without caches.
  Matrix<Scalar> features_chunked(const Tensor4<Scalar>& images, Index chunk = 128) const {
    Matrix<Scalar> out(images.batch, feature_dim());
    for (Index start = 0; start < images.batch; start += chunk) {
      const Index n = std::min(chunk, images.batch - start);
      Tensor4<Scalar> part(n, images.channels, images.height, images.width);
      part.data = images.data.middleCols(start * images.plane(), n * images.plane());
      out.middleRows(start, n) = forward(part);
    }
    return out;
  }

  ParameterMap parameters() const {
    ParameterMap p;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const auto& b = blocks_[i];
      const std::string pre = "backbone.block" + std::to_string(i) + ".";
      p[pre + "conv.weight"] = to_named(b.weight, {b.out_channels, b.in_channels, 3, 3});
      p[pre + "norm.weight"] = to_named(b.gamma, {b.out_channels});
      p[pre + "norm.bias"] = to_named(b.beta, {b.out_channels});
    }
    return p;
  }

  static ToyCnn from_parameters(const BackboneConfig& cfg, const ParameterMap& p) {
    ToyCnn net;
    net.cfg_ = cfg;
    Index in = cfg.in_channels;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      const Index out = cfg.widths[i];
      const std::string pre = "backbone.block" + std::to_string(i) + ".";
      ConvBlock<Scalar> b;
      b.in_channels = in;
      b.out_channels = out;
      b.groups = cfg.groups;
      b.weight = from_named<Scalar>(require_tensor(p, pre + "conv.weight"), out, in * 9);
      b.gamma = from_named<Scalar>(require_tensor(p, pre + "norm.weight"), out, 1);
      b.beta = from_named<Scalar>(require_tensor(p, pre + "norm.bias"), out, 1);
      net.blocks_.push_back(std::move(b));
      in = out;
    }
    return net;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& b : blocks_) n += b.weight.size() + b.gamma.size() + b.beta.size();
    return n;
  }

  template <typename To>
  ToyCnn<To> cast() const {
    ToyCnn<To> out;
    out.cfg_ = cfg_;
    out.frozen_ = frozen_;
    for (const auto& b : blocks_) {
      ConvBlock<To> c;
      c.in_channels = b.in_channels;
      c.out_channels = b.out_channels;
      c.groups = b.groups;
      c.weight = b.weight.template cast<To>();
      c.gamma = b.gamma.template cast<To>();
      c.beta = b.beta.template cast<To>();
      out.blocks_.push_back(std::move(c));
    }
    return out;
  }

 private:
  template <typename>
  friend class ToyCnn;

  BackboneConfig cfg_;
  std::vector<ConvBlock<Scalar>> blocks_;
  bool frozen_ = true;
};

using Backbone = ToyCnn<float>;
using SourceHead = Linear<float>;

nlohmann::json backbone_config_to_json(const BackboneConfig& cfg);
BackboneConfig backbone_config_from_json(const nlohmann::json& j);

/// SHA-256 of the serialized encoder parameters.
std::string backbone_hash(const Backbone& backbone);

struct PretrainConfig {
  std::size_t epochs = 12;
  std::size_t batch_size = 64;
  double lr = 3e-3;
  std::size_t warmup_steps = 10;
  std::uint64_t seed = 0;
  double min_accuracy = 0.90;
  Normalization norm;
};

struct PretrainResult {
  Backbone backbone;
  SourceHead head;
  double val_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

/// Supervised pretraining of encoder + source head on the source split
/// "train", gated on "val" accuracy (gate skipped when epochs == 0).
PretrainResult pretrain_backbone(const Dataset& source, const BackboneConfig& arch,
                                 const PretrainConfig& cfg);

/// Accuracy of encoder + source head on a split (clean images).
double source_accuracy(const Backbone& backbone, const SourceHead& head, const Dataset& data,
                       const std::string& split, const Normalization& norm);

/// Checkpoint with "backbone.*" and "source_head.*" tensors.
void save_backbone(const std::filesystem::path& path, const Backbone& backbone, const SourceHead* head,
                   const nlohmann::json& extra = nlohmann::json::object());

struct LoadedBackbone {
  Backbone backbone;
  std::optional<SourceHead> head;
  nlohmann::json attributes;
};

LoadedBackbone load_backbone(const std::filesystem::path& path);

}  // namespace movl
