#pragma once

#include <cmath>
#include <span>
#include <string>

#include "movl/error.hpp"
#include "movl/tensor.hpp"

namespace movl {

/// Joint loss l_i = (1 - alpha * (p_plus_i - p_minus_i)) * CE_i, averaged.
struct LossSpec {
  double alpha = 0.5;
  /// Sever the clean branch from gradient flow. Turning this off is only
  /// meant for the detach certifier's mutation check.
  bool detach_clean = true;
  /// Treat the discrepancy factor as a per-sample constant weight.
  bool factor_stop_gradient = false;
};

inline void validate(const LossSpec& spec) {
  if (!(spec.alpha >= 0.0 && spec.alpha <= 1.0)) {
    throw ConfigError("loss: alpha must lie in [0,1], got " + std::to_string(spec.alpha));
  }
}

namespace detail {

template <typename Scalar>
void check_labels(const Matrix<Scalar>& logits, std::span<const int> labels) {
  if (static_cast<Index>(labels.size()) != logits.rows()) {
    throw ContractError("loss: label count does not match batch size");
  }
  for (int y : labels) {
    if (y < 0 || y >= logits.cols()) throw ContractError("loss: label out of range");
  }
}

/// Row-wise log-sum-exp.
template <typename Scalar>
Vector<Scalar> logsumexp(const Matrix<Scalar>& logits) {
  const Vector<Scalar> m = logits.rowwise().maxCoeff();
  return m.array() + (logits.colwise() - m).array().exp().rowwise().sum().log();
}

}  // namespace detail

/// Softmax probability of the true label, per sample.
template <typename Scalar>
Vector<Scalar> label_confidence(const Matrix<Scalar>& logits, std::span<const int> labels) {
  detail::check_labels(logits, labels);
  const Vector<Scalar> lse = detail::logsumexp(logits);
  Vector<Scalar> p(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) p(i) = std::exp(logits(i, labels[static_cast<std::size_t>(i)]) - lse(i));
  return p;
}

/// Per-sample cross entropy -log softmax(logits)[y].
template <typename Scalar>
Vector<Scalar> cross_entropy(const Matrix<Scalar>& logits, std::span<const int> labels) {
  detail::check_labels(logits, labels);
  const Vector<Scalar> lse = detail::logsumexp(logits);
  Vector<Scalar> ce(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) ce(i) = lse(i) - logits(i, labels[static_cast<std::size_t>(i)]);
  return ce;
}

template <typename Scalar>
struct JointLossResult {
  Scalar loss = 0;
  Vector<Scalar> per_sample;
  Vector<Scalar> ce;
  Vector<Scalar> p_plus;
  Vector<Scalar> p_minus;  // empty when the clean branch is inert
  Matrix<Scalar> grad_prompted;
  Matrix<Scalar> grad_clean;  // all zeros when detached; empty when inert
};

/// Joint loss and its gradients. `clean` may be null: the clean branch is
/// then inert and the loss reduces to mean cross entropy.
template <typename Scalar>
JointLossResult<Scalar> joint_loss(const Matrix<Scalar>& prompted, const Matrix<Scalar>* clean,
                                   std::span<const int> labels, const LossSpec& spec) {
  validate(spec);
  detail::check_labels(prompted, labels);
  if (clean && (clean->rows() != prompted.rows() || clean->cols() != prompted.cols())) {
    throw ContractError("joint_loss: clean and prompted logits differ in shape");
  }
  const Index b = prompted.rows();
  const auto alpha = static_cast<Scalar>(spec.alpha);
  const auto inv_b = Scalar(1) / static_cast<Scalar>(b);

  JointLossResult<Scalar> r;
  const Vector<Scalar> lse = detail::logsumexp(prompted);
  Matrix<Scalar> soft = (prompted.colwise() - lse).array().exp().matrix();
  r.ce.resize(b);
  r.p_plus.resize(b);
  for (Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    r.ce(i) = lse(i) - prompted(i, y);
    r.p_plus(i) = std::exp(-r.ce(i));
  }

  Matrix<Scalar> clean_soft;
  if (clean) {
    const Vector<Scalar> lse_c = detail::logsumexp(*clean);
    clean_soft = (clean->colwise() - lse_c).array().exp().matrix();
    r.p_minus.resize(b);
    for (Index i = 0; i < b; ++i) {
      r.p_minus(i) = std::exp((*clean)(i, labels[static_cast<std::size_t>(i)]) - lse_c(i));
    }
  }

  r.per_sample.resize(b);
  r.grad_prompted = soft;
  if (clean) r.grad_clean = Matrix<Scalar>::Zero(b, prompted.cols());
  for (Index i = 0; i < b; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    const Scalar gap = clean ? r.p_plus(i) - r.p_minus(i) : Scalar(0);
    const Scalar factor = Scalar(1) - alpha * gap;
    r.per_sample(i) = factor * r.ce(i);
    // d l_i / d z = (factor + alpha * CE * p_plus) * (softmax - onehot)
    Scalar coeff = factor;
    if (clean && !spec.factor_stop_gradient) coeff += alpha * r.ce(i) * r.p_plus(i);
    r.grad_prompted.row(i) *= coeff * inv_b;
    r.grad_prompted(i, y) -= coeff * inv_b;
    if (clean && !spec.detach_clean) {
      // d l_i / d z_clean = alpha * CE * p_minus * (onehot - softmax_clean)
      const Scalar cc = alpha * r.ce(i) * r.p_minus(i) * inv_b;
      r.grad_clean.row(i) = -cc * clean_soft.row(i);
      r.grad_clean(i, y) += cc;
    }
  }
  r.loss = r.per_sample.mean();
  return r;
}

}  // namespace movl
