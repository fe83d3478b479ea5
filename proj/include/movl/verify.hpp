#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "movl/backbone.hpp"
#include "movl/heads.hpp"
#include "movl/joint.hpp"
#include "movl/loss.hpp"
#include "movl/prompt.hpp"

namespace movl {

/// |a - b| / max(|a|, |b|, 1e-12)
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

struct FiniteDiffResult {
  std::vector<double> grad;
  std::vector<bool> skipped;  // probe point produced a non-finite loss
};

/// Central differences (L(theta + h e_i) - L(theta - h e_i)) / 2h for the
/// selected entries, evaluated in the parameter vector's scalar type.
/// `loss` reads the current contents of `params`, which are restored after
/// each probe.
template <typename LossFn, typename Params>
FiniteDiffResult finite_diff_grad(LossFn&& loss, Params&& params, std::span<const Index> entries, double h) {
  using Real = typename std::decay_t<Params>::Scalar;
  if (!(h > 0.0)) throw ConfigError("finite differences: h must be > 0");
  FiniteDiffResult r;
  r.grad.reserve(entries.size());
  r.skipped.reserve(entries.size());
  const Real step = static_cast<Real>(h);
  for (Index e : entries) {
    if (e < 0 || e >= params.size()) throw ContractError("finite differences: entry out of range");
    const Real saved = params(e);
    params(e) = saved + step;
    const Real up = loss();
    params(e) = saved - step;
    const Real down = loss();
    params(e) = saved;
    const bool bad = !std::isfinite(static_cast<double>(up)) || !std::isfinite(static_cast<double>(down));
    r.skipped.push_back(bad);
    r.grad.push_back(bad ? std::numeric_limits<double>::quiet_NaN() : static_cast<double>((up - down) / (2 * step)));
  }
  return r;
}

struct GroupCheck {
  std::string name;
  double max_rel_err = 0.0;
  double mean_rel_err = 0.0;
  std::size_t entries = 0;
  std::size_t skipped = 0;
};

struct GradCheckReport {
  std::vector<GroupCheck> groups;
  double h = 0.0;
  std::string dtype;

  double max_rel_err() const;
  nlohmann::json to_json() const;
};

/// Compares autodiff values at the sampled entries with a finite-difference result.
GroupCheck compare_gradients(const std::string& name, std::span<const double> autodiff, const FiniteDiffResult& fd);

/// `count` distinct entries drawn (seeded) from positions where mask != 0.
std::vector<Index> sample_entries(const Eigen::Ref<const Eigen::VectorXd>& mask, std::size_t count, std::uint64_t seed);

/// Everything needed to evaluate the joint loss through the frozen encoder.
struct JointProblem {
  Backbone backbone;
  VisualPrompt<float> prompt;
  LinearProbe<float> probe;
  Tensor4<float> raw;  // [B, C, H, W] in [0,1]
  std::vector<int> labels;
  Normalization norm;
  LossSpec loss;
};

/// Random problem: random encoder (or the given one), random probe and
/// prompt values, random images and labels.
JointProblem make_joint_problem(const Backbone& backbone, const PromptConfig& prompt, Index num_classes,
                                Index batch, const LossSpec& loss, std::uint64_t seed);

/// Autodiff (in Scalar) vs central differences (in long double) of the joint loss
/// for the prompt and the probe. h is 1e-3 for float, 1e-5 for double.
template <typename Scalar>
GradCheckReport gradcheck_joint(const JointProblem& problem, std::size_t entries, std::uint64_t seed);

struct DetachEvidence {
  bool pass = false;
  bool criterion_a = false;
  bool criterion_b = false;
  bool trivial = false;  // alpha == 0, clean branch inert
  double a_max_rel_err = 0.0;
  double b_dummy_grad = 0.0;
  double tolerance = 1e-3;
  std::size_t entries = 0;

  nlohmann::json to_json() const;
};

/// (a) probe autodiff gradient matches central differences of the
/// surrogate with p_minus frozen; (b) a dummy offset on the clean branch's
/// true-class logit receives zero gradient.
DetachEvidence certify_detach(const LinearProbe<float>& probe, const Matrix<float>& prompted_features,
                              const Matrix<float>& clean_features, std::span<const int> labels, const LossSpec& spec,
                              std::size_t entries = 64, std::uint64_t seed = 0, double tolerance = 1e-3);

/// Runs the encoder on the problem's batch (prompted and clean) and certifies.
DetachEvidence certify_detach(const JointProblem& problem, std::size_t entries = 64, std::uint64_t seed = 0,
                              double tolerance = 1e-3);

struct BruteForceMatch {
  LabelMap map;
  long matched = 0;
};

inline constexpr Index kBruteForceMaxTargets = 8;
inline constexpr Index kBruteForceMaxSources = 10;

/// Exhaustive maximization of sum_k counts(k, map(k)) over injective maps;
/// ties resolve to the lexicographically smallest map.
BruteForceMatch brute_force_label_map(const Eigen::MatrixXi& counts);

}  // namespace movl
