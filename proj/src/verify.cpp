#include "movl/verify.hpp"

#include <algorithm>
#include <numeric>

#include "movl/random.hpp"

namespace movl {

using json = nlohmann::json;

double GradCheckReport::max_rel_err() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.max_rel_err);
  return m;
}

json GradCheckReport::to_json() const {
  json groups_json = json::array();
  for (const auto& g : groups) {
    groups_json.push_back({{"name", g.name},
                           {"max_rel_err", g.max_rel_err},
                           {"mean_rel_err", g.mean_rel_err},
                           {"entries", g.entries},
                           {"skipped", g.skipped}});
  }
  return {{"dtype", dtype}, {"h", h}, {"max_rel_err", max_rel_err()}, {"groups", groups_json}};
}

GroupCheck compare_gradients(const std::string& name, std::span<const double> autodiff, const FiniteDiffResult& fd) {
  if (autodiff.size() != fd.grad.size()) throw ContractError("gradcheck: entry count mismatch");
  GroupCheck g;
  g.name = name;
  double sum = 0.0;
  for (std::size_t i = 0; i < autodiff.size(); ++i) {
    if (fd.skipped[i]) {
      ++g.skipped;
      continue;
    }
    const double e = relative_error(autodiff[i], fd.grad[i]);
    g.max_rel_err = std::max(g.max_rel_err, e);
    sum += e;
    ++g.entries;
  }
  g.mean_rel_err = g.entries ? sum / static_cast<double>(g.entries) : 0.0;
  return g;
}

std::vector<Index> sample_entries(const Eigen::Ref<const Eigen::VectorXd>& mask, std::size_t count,
                                  std::uint64_t seed) {
  std::vector<Index> pool;
  for (Index i = 0; i < mask.size(); ++i) {
    if (mask(i) != 0.0) pool.push_back(i);
  }
  Rng rng(seed);
  rng.shuffle(pool.begin(), pool.end());
  if (pool.size() > count) pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

JointProblem make_joint_problem(const Backbone& backbone, const PromptConfig& prompt, Index num_classes, Index batch,
                                const LossSpec& loss, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck/problem"));
  Rng head_rng(derive_seed(seed, "gradcheck/probe"));
  JointProblem p{backbone,
                 VisualPrompt<float>::uniform(prompt, 0.1, derive_seed(seed, "gradcheck/prompt")),
                 LinearProbe<float>::random(num_classes, backbone.feature_dim(), head_rng),
                 Tensor4<float>(batch, prompt.channels, prompt.image_size, prompt.image_size),
                 {},
                 Normalization{},
                 loss};
  p.norm.mean.assign(static_cast<std::size_t>(prompt.channels), 0.5);
  p.norm.std.assign(static_cast<std::size_t>(prompt.channels), 0.5);
  for (Index i = 0; i < p.raw.data.size(); ++i) p.raw.data.data()[i] = static_cast<float>(rng.uniform());
  for (Index i = 0; i < batch; ++i) p.labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes))));
  return p;
}

namespace {

template <typename Derived>
std::vector<double> pick(const Eigen::DenseBase<Derived>& m, std::span<const Index> entries) {
  std::vector<double> out;
  out.reserve(entries.size());
  for (Index e : entries) out.push_back(static_cast<double>(m.derived().data()[e]));
  return out;
}

template <typename Scalar>
constexpr double default_step() {
  return std::is_same_v<Scalar, float> ? 1e-3 : 1e-5;
}

}  // namespace

template <typename Scalar>
GradCheckReport gradcheck_joint(const JointProblem& problem, std::size_t entries, std::uint64_t seed) {
  const double h = default_step<Scalar>();
  GradCheckReport report;
  report.h = h;
  report.dtype = std::is_same_v<Scalar, float> ? "float32" : "float64";

  // Autodiff route in Scalar.
  const ToyCnn<Scalar> bb = problem.backbone.template cast<Scalar>();
  const VisualPrompt<Scalar> prompt = problem.prompt.template cast<Scalar>();
  const Head<Scalar> head = problem.probe.template cast<Scalar>();
  const Tensor4<Scalar> raw = problem.raw.template cast<Scalar>();
  const Matrix<Scalar> clean = bb.forward(preprocess(raw, problem.norm, bb.input_size()));
  const JointStep<Scalar> step = joint_forward_backward(bb, prompt, head, raw, &clean, problem.labels, problem.norm,
                                                        problem.loss, true, true);

  using Real = long double;
  // Finite-difference route, in extended precision.
  const ToyCnn<Real> bb_d = problem.backbone.template cast<Real>();
  VisualPrompt<Real> prompt_d = problem.prompt.template cast<Real>();
  LinearProbe<Real> probe_d = problem.probe.template cast<Real>();
  const Tensor4<Real> raw_d = problem.raw.template cast<Real>();
  const Matrix<Real> clean_d = bb_d.forward(preprocess(raw_d, problem.norm, bb_d.input_size()));

  {
    const Eigen::VectorXd mask =
        Eigen::Map<const Vector<Real>>(prompt_d.mask().data(), prompt_d.mask().size()).template cast<double>();
    const auto idx = sample_entries(mask, entries, derive_seed(seed, "gradcheck/delta"));
    const Head<Real> head_d = probe_d;
    Eigen::Map<Vector<Real>> theta(prompt_d.delta().data(), prompt_d.delta().size());
    const auto fd = finite_diff_grad(
        [&] {
          return joint_loss_value(bb_d, prompt_d, head_d, raw_d, &clean_d, problem.labels, problem.norm,
                                  problem.loss);
        },
        theta, idx, h);
    report.groups.push_back(compare_gradients(std::string("prompt.delta[") + to_string(prompt_d.mode()) + "]",
                                              pick(step.grad_delta, idx), fd));
  }
  {
    // Probe: the clean branch enters only through the frozen reference.
    const Matrix<Real> feats_d = bb_d.forward(prompted_input(raw_d, prompt_d, problem.norm));
    const Vector<Real> reference = label_confidence(probe_d.forward(clean_d), std::span<const int>(problem.labels));
    auto surrogate = [&] {
      const Matrix<Real> logits = probe_d.forward(feats_d);
      return problem.loss.alpha > 0.0
                 ? joint_loss_with_reference(logits, reference, problem.labels, problem.loss)
                 : cross_entropy(logits, std::span<const int>(problem.labels)).mean();
    };
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(probe_d.weight.size());
    const auto idx = sample_entries(ones, entries, derive_seed(seed, "gradcheck/probe_w"));
    Eigen::Map<Vector<Real>> w(probe_d.weight.data(), probe_d.weight.size());
    report.groups.push_back(compare_gradients("probe.weight", pick(step.grad_probe_w, idx),
                                              finite_diff_grad(surrogate, w, idx, h)));
    std::vector<Index> all_b(static_cast<std::size_t>(probe_d.bias.size()));
    std::iota(all_b.begin(), all_b.end(), Index{0});
    Eigen::Map<Vector<Real>> b(probe_d.bias.data(), probe_d.bias.size());
    report.groups.push_back(compare_gradients("probe.bias", pick(step.grad_probe_b, all_b),
                                              finite_diff_grad(surrogate, b, all_b, h)));
  }
  return report;
}

template GradCheckReport gradcheck_joint<float>(const JointProblem&, std::size_t, std::uint64_t);
template GradCheckReport gradcheck_joint<double>(const JointProblem&, std::size_t, std::uint64_t);

json DetachEvidence::to_json() const {
  return {{"pass", pass},
          {"criterion_a", criterion_a},
          {"criterion_b", criterion_b},
          {"trivial", trivial},
          {"a_max_rel_err", a_max_rel_err},
          {"b_dummy_grad", b_dummy_grad},
          {"tolerance", tolerance},
          {"entries", entries}};
}

DetachEvidence certify_detach(const LinearProbe<float>& probe, const Matrix<float>& prompted_features,
                              const Matrix<float>& clean_features, std::span<const int> labels, const LossSpec& spec,
                              std::size_t entries, std::uint64_t seed, double tolerance) {
  DetachEvidence ev;
  ev.tolerance = tolerance;
  ev.trivial = spec.alpha == 0.0;

  // Implementation route: exactly the trainer's gradient assembly.
  const Matrix<float> lp = probe.forward(prompted_features);
  const Matrix<float> lc = probe.forward(clean_features);
  const auto r = joint_loss(lp, &lc, labels, spec);
  Matrix<float> gw;
  Vector<float> gb;
  accumulate_probe_grad(r, prompted_features, &clean_features, gw, gb);

  // (b) dummy offset eta on the clean true-class logit: dL/deta.
  double eta_grad = 0.0;
  for (Index i = 0; i < r.grad_clean.rows(); ++i) eta_grad += r.grad_clean(i, labels[static_cast<std::size_t>(i)]);
  ev.b_dummy_grad = eta_grad;
  ev.criterion_b = eta_grad == 0.0;

  // (a) surrogate with p_minus frozen, differentiated numerically in double.
  LinearProbe<double> probe_d = probe.cast<double>();
  const Matrix<double> pf = prompted_features.cast<double>();
  const Vector<double> reference = label_confidence(probe_d.forward(clean_features.cast<double>()), labels);
  LossSpec frozen = spec;
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(probe_d.weight.size());
  const auto idx = sample_entries(ones, entries, derive_seed(seed, "certify/probe_w"));
  Eigen::Map<Eigen::VectorXd> w(probe_d.weight.data(), probe_d.weight.size());
  const auto fd = finite_diff_grad(
      [&] { return joint_loss_with_reference(probe_d.forward(pf), reference, labels, frozen); }, w, idx, 1e-3);
  const GroupCheck g = compare_gradients("probe.weight", pick(gw, idx), fd);
  ev.entries = g.entries;
  ev.a_max_rel_err = g.max_rel_err;
  ev.criterion_a = g.skipped == 0 && g.max_rel_err <= tolerance;
  ev.pass = ev.criterion_a && ev.criterion_b;
  return ev;
}

DetachEvidence certify_detach(const JointProblem& problem, std::size_t entries, std::uint64_t seed, double tolerance) {
  const Matrix<float> pf = problem.backbone.forward(prompted_input(problem.raw, problem.prompt, problem.norm));
  const Matrix<float> cf =
      problem.backbone.forward(preprocess(problem.raw, problem.norm, problem.backbone.input_size()));
  return certify_detach(problem.probe, pf, cf, problem.labels, problem.loss, entries, seed, tolerance);
}

namespace {

void search(const Eigen::MatrixXi& counts, Index k, std::vector<Index>& current, std::vector<bool>& used, long score,
            BruteForceMatch& best, bool& have_best) {
  if (k == counts.rows()) {
    if (!have_best || score > best.matched) {
      best.matched = score;
      best.map.mapping = current;
      have_best = true;
    }
    return;
  }
  for (Index s = 0; s < counts.cols(); ++s) {
    if (used[static_cast<std::size_t>(s)]) continue;
    used[static_cast<std::size_t>(s)] = true;
    current.push_back(s);
    search(counts, k + 1, current, used, score + counts(k, s), best, have_best);
    current.pop_back();
    used[static_cast<std::size_t>(s)] = false;
  }
}

}  // namespace

BruteForceMatch brute_force_label_map(const Eigen::MatrixXi& counts) {
  if (counts.rows() > kBruteForceMaxTargets || counts.cols() > kBruteForceMaxSources) {
    throw SizeError("brute force label map: limited to K <= " + std::to_string(kBruteForceMaxTargets) +
                    " and S <= " + std::to_string(kBruteForceMaxSources));
  }
  if (counts.cols() < counts.rows()) {
    throw InfeasibleError("brute force label map: fewer source than target classes");
  }
  BruteForceMatch best;
  best.map.source_classes = counts.cols();
  best.map.method = LabelMapMethod::kFrequency;
  std::vector<Index> current;
  std::vector<bool> used(static_cast<std::size_t>(counts.cols()), false);
  bool have_best = false;
  search(counts, 0, current, used, 0, best, have_best);
  return best;
}

}  // namespace movl
