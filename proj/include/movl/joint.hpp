#pragma once

#include <span>

#include "movl/backbone.hpp"
#include "movl/heads.hpp"
#include "movl/loss.hpp"
#include "movl/prompt.hpp"

namespace movl {

/// Loss with the clean-branch confidence supplied as a constant:
/// mean_i (1 - alpha * (p_plus_i - reference_i)) * CE_i.
template <typename Scalar>
Scalar joint_loss_with_reference(const Matrix<Scalar>& prompted, const Vector<Scalar>& reference,
                                 std::span<const int> labels, const LossSpec& spec) {
  validate(spec);
  const Vector<Scalar> ce = cross_entropy(prompted, labels);
  const Vector<Scalar> p = (-ce.array()).exp();
  const auto alpha = static_cast<Scalar>(spec.alpha);
  return ((Scalar(1) - alpha * (p - reference).array()) * ce.array()).mean();
}

/// Raw [0,1] images -> prompted, normalized encoder input.
template <typename Scalar>
Tensor4<Scalar> prompted_input(const Tensor4<Scalar>& raw, const VisualPrompt<Scalar>& prompt,
                               const Normalization& norm) {
  Tensor4<Scalar> x;
  if (prompt.mode() == PromptMode::kOverlay && raw.height != prompt.size()) {
    x = attach_overlay(resize_bilinear(raw, prompt.size(), prompt.size()), prompt);
  } else {
    x = attach(raw, prompt);
  }
  normalize_inplace(x, norm);
  return x;
}

template <typename Scalar>
struct JointStep {
  JointLossResult<Scalar> loss;
  Matrix<Scalar> features;        // prompted-branch features
  Planes<Scalar> grad_delta;      // empty unless requested
  Matrix<Scalar> grad_probe_w;    // empty unless requested
  Vector<Scalar> grad_probe_b;
};

/// d(loss)/d(probe) from both branches: the clean branch contributes only
/// when the loss spec does not sever it.
template <typename Scalar>
void accumulate_probe_grad(const JointLossResult<Scalar>& r, const Matrix<Scalar>& features,
                           const Matrix<Scalar>* clean_features, Matrix<Scalar>& gw, Vector<Scalar>& gb) {
  gw = r.grad_prompted.transpose() * features;
  gb = r.grad_prompted.colwise().sum().transpose();
  if (clean_features && r.grad_clean.size() != 0 && !r.grad_clean.isZero(0)) {
    gw.noalias() += r.grad_clean.transpose() * (*clean_features);
    gb += r.grad_clean.colwise().sum().transpose();
  }
}

/// One forward/backward pass of the prompted branch through the frozen
/// encoder. `clean_features` (may be null) feed the reference branch
/// through the same head.
template <typename Scalar>
JointStep<Scalar> joint_forward_backward(const ToyCnn<Scalar>& backbone, const VisualPrompt<Scalar>& prompt,
                                         const Head<Scalar>& head, const Tensor4<Scalar>& raw,
                                         const Matrix<Scalar>* clean_features, std::span<const int> labels,
                                         const Normalization& norm, const LossSpec& spec, bool want_prompt_grad,
                                         bool want_probe_grad) {
  JointStep<Scalar> step;
  const Tensor4<Scalar> x = prompted_input(raw, prompt, norm);
  typename ToyCnn<Scalar>::Cache cache;
  step.features = backbone.forward(x, want_prompt_grad ? &cache : nullptr);
  const Matrix<Scalar> logits = head_logits(head, step.features);
  const bool clean_active = clean_features != nullptr && spec.alpha > 0.0;
  Matrix<Scalar> clean_logits;
  if (clean_active) clean_logits = head_logits(head, *clean_features);
  step.loss = joint_loss(logits, clean_active ? &clean_logits : nullptr, labels, spec);

  if (want_probe_grad) {
    const auto* probe = std::get_if<LinearProbe<Scalar>>(&head);
    if (!probe) throw ContractError("joint step: probe gradient requested for a non-probe head");
    accumulate_probe_grad(step.loss, step.features, clean_active ? clean_features : nullptr, step.grad_probe_w,
                          step.grad_probe_b);
  }
  if (want_prompt_grad) {
    const Matrix<Scalar> gf = head_input_grad(head, step.features, step.loss.grad_prompted);
    Tensor4<Scalar> gx = backbone.backward(cache, gf, nullptr);
    normalize_backward_inplace(gx, norm);
    step.grad_delta = prompt.grad_delta(gx);
  }
  return step;
}

/// Loss value only (no caches), same pipeline as joint_forward_backward.
template <typename Scalar>
Scalar joint_loss_value(const ToyCnn<Scalar>& backbone, const VisualPrompt<Scalar>& prompt, const Head<Scalar>& head,
                        const Tensor4<Scalar>& raw, const Matrix<Scalar>* clean_features, std::span<const int> labels,
                        const Normalization& norm, const LossSpec& spec) {
  const Matrix<Scalar> feats = backbone.forward(prompted_input(raw, prompt, norm));
  const Matrix<Scalar> logits = head_logits(head, feats);
  if (clean_features && spec.alpha > 0.0) {
    const Matrix<Scalar> clean_logits = head_logits(head, *clean_features);
    return joint_loss(logits, &clean_logits, labels, spec).loss;
  }
  return joint_loss<Scalar>(logits, nullptr, labels, spec).loss;
}

}  // namespace movl
