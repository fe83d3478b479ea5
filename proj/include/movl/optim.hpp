#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "movl/error.hpp"
#include "movl/tensor.hpp"

namespace movl {

struct OptimConfig {
  double lr = 0.01;
  double weight_decay = 0.0;
  std::size_t warmup_steps = 10;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Linear warmup over the first warmup_steps, then cosine decay to zero.
inline double lr_at(std::size_t step, std::size_t total_steps, const OptimConfig& cfg) {
  const std::size_t w = cfg.warmup_steps;
  if (total_steps <= w) {
    throw ConfigError("lr schedule: total steps (" + std::to_string(total_steps) +
                      ") must exceed warmup steps (" + std::to_string(w) + ")");
  }
  if (step >= total_steps) throw ContractError("lr schedule: step out of range");
  if (step < w) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(w);
  const double progress = static_cast<double>(step - w) / static_cast<double>(total_steps - w);
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

/// A contiguous parameter block and its gradient.
template <typename Scalar>
struct ParamRef {
  Scalar* value;
  const Scalar* grad;
  Index size;
};

template <typename Scalar, typename Value, typename Grad>
ParamRef<Scalar> param_ref(Value& value, const Grad& grad) {
  if (value.size() != grad.size()) throw ContractError("optimizer: parameter/gradient size mismatch");
  return {value.data(), grad.data(), static_cast<Index>(value.size())};
}

/// AdamW with decoupled weight decay and bias correction.
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}

  void step(std::span<const ParamRef<Scalar>> params, double lr) {
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.push_back(Vector<Scalar>::Zero(p.size));
        v_.push_back(Vector<Scalar>::Zero(p.size));
      }
    }
    if (m_.size() != params.size()) throw ContractError("optimizer: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<Scalar>(cfg_.beta1);
    const auto b2 = static_cast<Scalar>(cfg_.beta2);
    const auto step_size = static_cast<Scalar>(lr / bc1);
    const auto inv_bc2 = static_cast<Scalar>(1.0 / bc2);
    const auto eps = static_cast<Scalar>(cfg_.eps);
    const auto decay = static_cast<Scalar>(1.0 - lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      Eigen::Map<Vector<Scalar>> value(p.value, p.size);
      Eigen::Map<const Vector<Scalar>> grad(p.grad, p.size);
      if (m_[i].size() != p.size) throw ContractError("optimizer: parameter size changed");
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * grad;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * grad.cwiseAbs2();
      value *= decay;
      value.array() -= step_size * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
    }
  }

  std::size_t steps_taken() const { return t_; }

 private:
  OptimConfig cfg_;
  std::vector<Vector<Scalar>> m_;
  std::vector<Vector<Scalar>> v_;
  std::size_t t_ = 0;
};

}  // namespace movl
