#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "movl/checkpoint.hpp"
#include "movl/error.hpp"
#include "movl/image.hpp"
#include "movl/random.hpp"
#include "movl/tensor.hpp"

namespace movl {

enum class PromptMode { kPad, kOverlay };

struct PromptConfig {
  PromptMode mode = PromptMode::kPad;
  Index pad_width = 8;
  Index image_size = 64;
  Index channels = 3;
  double init_value = 1e-3;
};

inline const char* to_string(PromptMode m) { return m == PromptMode::kPad ? "pad" : "overlay"; }

inline PromptMode prompt_mode_from_string(const std::string& s) {
  if (s == "pad") return PromptMode::kPad;
  if (s == "overlay") return PromptMode::kOverlay;
  throw ConfigError("prompt mode must be 'pad' or 'overlay', got '" + s + "'");
}

inline void validate(const PromptConfig& cfg) {
  if (cfg.image_size < 1) throw GeometryError("prompt: image_size must be >= 1");
  if (cfg.channels < 1) throw GeometryError("prompt: channels must be >= 1");
  if (cfg.mode == PromptMode::kPad) {
    if (cfg.pad_width < 1) throw GeometryError("prompt: pad_width must be >= 1");
    if (2 * cfg.pad_width >= cfg.image_size) {
      throw GeometryError("prompt: pad geometry needs 2*pad_width < image_size (pad_width=" +
                          std::to_string(cfg.pad_width) + ", image_size=" + std::to_string(cfg.image_size) +
                          ")");
    }
  }
}

/// C * (H^2 - (H - 2p)^2) for pad mode, C * H^2 for overlay.
inline std::int64_t prompt_parameter_count(const PromptConfig& cfg) {
  validate(cfg);
  const std::int64_t h = cfg.image_size;
  if (cfg.mode == PromptMode::kOverlay) return cfg.channels * h * h;
  const std::int64_t inner = h - 2 * cfg.pad_width;
  return cfg.channels * (h * h - inner * inner);
}

/// Learnable pixel-space perturbation. delta is [C, H*W]; in pad mode only
/// the border ring (mask == 1) is trainable and the interior stays zero.
template <typename Scalar>
class VisualPrompt {
 public:
  VisualPrompt() = default;

  /// Every trainable entry set to cfg.init_value.
  static VisualPrompt constant(const PromptConfig& cfg) {
    VisualPrompt p(cfg);
    p.delta_ = p.mask_ * static_cast<Scalar>(cfg.init_value);
    return p;
  }

  /// Trainable entries drawn from uniform(-half_width, half_width).
  static VisualPrompt uniform(const PromptConfig& cfg, double half_width, std::uint64_t seed) {
    VisualPrompt p(cfg);
    Rng rng(seed);
    for (Index i = 0; i < p.delta_.size(); ++i) {
      if (p.mask_.data()[i] != Scalar(0)) {
        p.delta_.data()[i] = static_cast<Scalar>(rng.uniform(-half_width, half_width));
      }
    }
    return p;
  }

  const PromptConfig& config() const { return cfg_; }
  PromptMode mode() const { return cfg_.mode; }
  Index size() const { return cfg_.image_size; }
  Index inner_size() const {
    return cfg_.mode == PromptMode::kPad ? cfg_.image_size - 2 * cfg_.pad_width : cfg_.image_size;
  }

  Planes<Scalar>& delta() { return delta_; }
  const Planes<Scalar>& delta() const { return delta_; }
  const Planes<Scalar>& mask() const { return mask_; }

  std::int64_t trainable_count() const { return static_cast<std::int64_t>(mask_.sum()); }

  /// Gradient of a loss w.r.t. delta given its gradient w.r.t. the prompted
  /// batch: summed over the batch, zero outside the trainable mask.
  Planes<Scalar> grad_delta(const Tensor4<Scalar>& grad_out) const {
    const Index plane = cfg_.image_size * cfg_.image_size;
    if (grad_out.channels != cfg_.channels || grad_out.height != cfg_.image_size ||
        grad_out.width != cfg_.image_size) {
      throw ContractError("prompt: gradient shape mismatch");
    }
    Planes<Scalar> g = Planes<Scalar>::Zero(cfg_.channels, plane);
    for (Index b = 0; b < grad_out.batch; ++b) {
      g += grad_out.data.middleCols(b * plane, plane);
    }
    return g.cwiseProduct(mask_);
  }

  ParameterMap parameters() const {
    ParameterMap p;
    p["prompt.delta"] = to_named(delta_, {cfg_.channels, cfg_.image_size, cfg_.image_size});
    return p;
  }

  nlohmann::json attributes() const {
    return {{"mode", to_string(cfg_.mode)},
            {"pad_width", cfg_.pad_width},
            {"image_size", cfg_.image_size},
            {"channels", cfg_.channels},
            {"init_value", cfg_.init_value}};
  }

  static VisualPrompt from_checkpoint(const nlohmann::json& attrs, const ParameterMap& params) {
    PromptConfig cfg;
    cfg.mode = prompt_mode_from_string(attrs.at("mode").get<std::string>());
    cfg.pad_width = attrs.at("pad_width").get<Index>();
    cfg.image_size = attrs.at("image_size").get<Index>();
    cfg.channels = attrs.at("channels").get<Index>();
    cfg.init_value = attrs.value("init_value", 1e-3);
    VisualPrompt p(cfg);
    const Index plane = cfg.image_size * cfg.image_size;
    p.delta_ = from_named<Scalar>(require_tensor(params, "prompt.delta"), cfg.channels, plane);
    p.delta_ = p.delta_.cwiseProduct(p.mask_);
    return p;
  }

  template <typename To>
  VisualPrompt<To> cast() const {
    VisualPrompt<To> out;
    out.cfg_ = cfg_;
    out.delta_ = delta_.template cast<To>();
    out.mask_ = mask_.template cast<To>();
    return out;
  }

 private:
  template <typename>
  friend class VisualPrompt;

  explicit VisualPrompt(const PromptConfig& cfg) : cfg_(cfg) {
    validate(cfg);
    const Index h = cfg.image_size;
    delta_ = Planes<Scalar>::Zero(cfg.channels, h * h);
    mask_ = Planes<Scalar>::Ones(cfg.channels, h * h);
    if (cfg.mode == PromptMode::kPad) {
      const Index p = cfg.pad_width;
      for (Index c = 0; c < cfg.channels; ++c) {
        for (Index y = p; y < h - p; ++y) {
          for (Index x = p; x < h - p; ++x) mask_(c, y * h + x) = Scalar(0);
        }
      }
    }
  }

  PromptConfig cfg_;
  Planes<Scalar> delta_;
  Planes<Scalar> mask_;
};

/// Resize x into the (H-2p)^2 interior and frame it with the prompt's border ring.
template <typename Scalar>
Tensor4<Scalar> attach_pad(const Tensor4<Scalar>& x, const VisualPrompt<Scalar>& prompt) {
  if (prompt.mode() != PromptMode::kPad) throw ContractError("attach_pad: prompt is not in pad mode");
  const auto& cfg = prompt.config();
  if (x.channels != cfg.channels) throw ContractError("attach_pad: channel mismatch");
  const Index h = cfg.image_size;
  const Index p = cfg.pad_width;
  const Index inner = prompt.inner_size();
  const Tensor4<Scalar> resized = resize_bilinear(x, inner, inner);
  Tensor4<Scalar> out(x.batch, x.channels, h, h);
  const Index plane = h * h;
  for (Index b = 0; b < x.batch; ++b) {
    out.data.middleCols(b * plane, plane) = prompt.delta();
    for (Index c = 0; c < x.channels; ++c) {
      for (Index y = 0; y < inner; ++y) {
        for (Index xx = 0; xx < inner; ++xx) out(b, c, y + p, xx + p) = resized(b, c, y, xx);
      }
    }
  }
  return out;
}

/// x + delta elementwise, no clipping.
template <typename Scalar>
Tensor4<Scalar> attach_overlay(const Tensor4<Scalar>& x, const VisualPrompt<Scalar>& prompt) {
  if (prompt.mode() != PromptMode::kOverlay) {
    throw ContractError("attach_overlay: prompt is not in overlay mode");
  }
  const auto& cfg = prompt.config();
  if (x.channels != cfg.channels || x.height != cfg.image_size || x.width != cfg.image_size) {
    throw ContractError("attach_overlay: image shape must equal prompt shape [" +
                        std::to_string(cfg.channels) + "," + std::to_string(cfg.image_size) + "," +
                        std::to_string(cfg.image_size) + "]");
  }
  Tensor4<Scalar> out = x;
  const Index plane = cfg.image_size * cfg.image_size;
  for (Index b = 0; b < x.batch; ++b) out.data.middleCols(b * plane, plane) += prompt.delta();
  return out;
}

template <typename Scalar>
Tensor4<Scalar> attach(const Tensor4<Scalar>& x, const VisualPrompt<Scalar>& prompt) {
  return prompt.mode() == PromptMode::kPad ? attach_pad(x, prompt) : attach_overlay(x, prompt);
}

}  // namespace movl
