#include "movl/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "movl/joint.hpp"
#include "movl/random.hpp"

namespace movl {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::kLP: return "lp";
    case Strategy::kVP: return "vp";
    case Strategy::kLPThenVP: return "lp_then_vp";
    case Strategy::kLPThenMix: return "lp_then_mix";
    case Strategy::kMix: return "mix";
    case Strategy::kFF: return "ff";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "lp") return Strategy::kLP;
  if (s == "vp") return Strategy::kVP;
  if (s == "lp_then_vp" || s == "lp-vp") return Strategy::kLPThenVP;
  if (s == "lp_then_mix" || s == "lp-mix") return Strategy::kLPThenMix;
  if (s == "mix") return Strategy::kMix;
  if (s == "ff") return Strategy::kFF;
  throw ConfigError("unknown strategy '" + s + "' (expected lp, vp, lp_then_vp, lp_then_mix, mix, ff)");
}

std::string to_string(PromptInit p) { return p == PromptInit::kConstant ? "epsilon" : "random"; }

PromptInit prompt_init_from_string(const std::string& s) {
  if (s == "epsilon" || s == "constant") return PromptInit::kConstant;
  if (s == "random" || s == "uniform") return PromptInit::kUniform;
  throw ConfigError("unknown prompt init '" + s + "' (expected epsilon or random)");
}

std::string to_string(VpHeadKind k) {
  switch (k) {
    case VpHeadKind::kFlm: return "flm";
    case VpHeadKind::kRlm: return "rlm";
    case VpHeadKind::kEmbedding: return "embedding";
  }
  return "unknown";
}

VpHeadKind vp_head_from_string(const std::string& s) {
  if (s == "flm") return VpHeadKind::kFlm;
  if (s == "rlm") return VpHeadKind::kRlm;
  if (s == "embedding") return VpHeadKind::kEmbedding;
  throw ConfigError("unknown vp head '" + s + "' (expected flm, rlm or embedding)");
}

std::vector<Phase> StrategyPlan::phases() const {
  if (total_epochs == 0) throw ConfigError("plan: total_epochs must be >= 1");
  const bool two_stage = strategy == Strategy::kLPThenVP || strategy == Strategy::kLPThenMix;
  if (two_stage && (phase_boundary == 0 || phase_boundary >= total_epochs)) {
    throw ConfigError("plan: phase boundary must lie strictly inside (0, total_epochs)");
  }
  const Phase lp{"lp", two_stage ? phase_boundary : total_epochs, true, false, false, false};
  switch (strategy) {
    case Strategy::kLP: return {lp};
    case Strategy::kVP: return {{"vp", total_epochs, false, true, false, true}};
    case Strategy::kLPThenVP: return {lp, {"vp", total_epochs - phase_boundary, false, true, false, true}};
    case Strategy::kLPThenMix: return {lp, {"mix", total_epochs - phase_boundary, true, true, false, true}};
    case Strategy::kMix: return {{"mix", total_epochs, true, true, false, true}};
    case Strategy::kFF: return {{"ff", total_epochs, true, false, true, false}};
  }
  return {};
}

bool StrategyPlan::uses_prompt() const {
  return strategy == Strategy::kVP || strategy == Strategy::kLPThenVP || strategy == Strategy::kLPThenMix ||
         strategy == Strategy::kMix;
}

ParamCounts count_trainable(const StrategyPlan& plan, const PromptConfig& prompt, Index num_classes,
                            Index feature_dim, std::int64_t backbone_params) {
  ParamCounts counts;
  for (const auto& ph : plan.phases()) {
    if (ph.train_prompt) counts.prompt = prompt_parameter_count(prompt);
    if (ph.train_probe) counts.probe = num_classes * feature_dim + num_classes;
    if (ph.train_backbone) counts.backbone = backbone_params;
  }
  return counts;
}

EvalResult evaluate_logits(const Matrix<float>& logits, std::span<const int> labels, Index num_classes) {
  if (logits.rows() == 0) throw ContractError("evaluate: empty split");
  if (static_cast<Index>(labels.size()) != logits.rows()) throw ContractError("evaluate: label count mismatch");
  EvalResult r;
  r.confusion = Eigen::MatrixXi::Zero(num_classes, logits.cols());
  long correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    Index pred = 0;
    logits.row(i).maxCoeff(&pred);
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= num_classes) throw ContractError("evaluate: label out of range");
    r.confusion(y, pred) += 1;
    if (pred == y) ++correct;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(logits.rows());
  r.per_class.resize(static_cast<std::size_t>(num_classes));
  for (Index k = 0; k < num_classes; ++k) {
    const int total = r.confusion.row(k).sum();
    r.per_class[static_cast<std::size_t>(k)] =
        total == 0 ? 0.0 : static_cast<double>(k < r.confusion.cols() ? r.confusion(k, k) : 0) / total;
  }
  return r;
}

Matrix<float> clean_features(const Backbone& backbone, const Dataset& data, std::span<const std::size_t> indices,
                             const Normalization& norm) {
  constexpr std::size_t kChunk = 128;
  Matrix<float> out(static_cast<Index>(indices.size()), backbone.feature_dim());
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const auto part = indices.subspan(start, std::min(kChunk, indices.size() - start));
    const auto x = preprocess(data.images<float>(part), norm, backbone.input_size());
    out.middleRows(static_cast<Index>(start), static_cast<Index>(part.size())) = backbone.forward(x);
  }
  return out;
}

namespace {

Matrix<float> prompted_features(const Backbone& backbone, const VisualPrompt<float>& prompt, const Dataset& data,
                                std::span<const std::size_t> indices, const Normalization& norm) {
  constexpr std::size_t kChunk = 128;
  Matrix<float> out(static_cast<Index>(indices.size()), backbone.feature_dim());
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const auto part = indices.subspan(start, std::min(kChunk, indices.size() - start));
    const auto x = prompted_input(data.images<float>(part), prompt, norm);
    out.middleRows(static_cast<Index>(start), static_cast<Index>(part.size())) = backbone.forward(x);
  }
  return out;
}

Matrix<float> gather_rows(const Matrix<float>& m, std::span<const std::size_t> rows) {
  Matrix<float> out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(static_cast<Index>(rows[i]));
  return out;
}

}  // namespace

EvalResult evaluate(const Backbone& backbone, const VisualPrompt<float>* prompt, const Head<float>& head,
                    const Dataset& data, const std::string& split, const Normalization& norm) {
  const auto idx = data.split(split);
  if (idx.empty()) throw ContractError("evaluate: split '" + split + "' is empty");
  const Matrix<float> feats =
      prompt ? prompted_features(backbone, *prompt, data, idx, norm) : clean_features(backbone, data, idx, norm);
  const auto labels = data.labels(idx);
  return evaluate_logits(head_logits(head, feats), labels, static_cast<Index>(data.num_classes()));
}

Eigen::MatrixXi label_count_matrix(const Matrix<float>& source_logits, std::span<const int> labels,
                                   Index num_classes) {
  Eigen::MatrixXi counts = Eigen::MatrixXi::Zero(num_classes, source_logits.cols());
  for (Index i = 0; i < source_logits.rows(); ++i) {
    Index pred = 0;
    source_logits.row(i).maxCoeff(&pred);
    counts(labels[static_cast<std::size_t>(i)], pred) += 1;
  }
  return counts;
}

LabelMap fit_flm(const Backbone& backbone, const SourceHead& head, const Dataset& data, const Normalization& norm) {
  const auto k = static_cast<Index>(data.num_classes());
  if (head.out_features() < k) {
    throw InfeasibleError("label matching infeasible: " + std::to_string(k) + " target classes but only " +
                          std::to_string(head.out_features()) + " source classes");
  }
  const auto idx = data.split("train");
  const Matrix<float> logits = head.forward(clean_features(backbone, data, idx, norm));
  return flm_from_counts(label_count_matrix(logits, data.labels(idx), k));
}

namespace {

struct Trainer {
  const TrainSpec& spec;
  const TrainInputs& in;
  const Dataset& data;
  const Backbone& backbone;
  Index num_classes;

  std::vector<std::size_t> train_idx, val_idx, test_idx;
  std::vector<int> val_labels, test_labels;
  Matrix<float> clean_all;  // clean features for every sample, frozen encoder
  bool have_clean = false;

  Trainer(const TrainSpec& s, const TrainInputs& i)
      : spec(s), in(i), data(*i.data), backbone(*i.backbone), num_classes(static_cast<Index>(i.data->num_classes())) {
    train_idx = data.split("train");
    val_idx = data.split("val");
    test_idx = data.split("test");
    if (train_idx.empty() || val_idx.empty() || test_idx.empty()) {
      throw ContractError("train: dataset needs non-empty train/val/test splits");
    }
    val_labels = data.labels(val_idx);
    test_labels = data.labels(test_idx);
  }

  void ensure_clean() {
    if (have_clean) return;
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    clean_all = clean_features(backbone, data, all, spec.norm);
    have_clean = true;
  }

  Head<float> make_vp_head() {
    const Index k = num_classes;
    switch (spec.vp_head) {
      case VpHeadKind::kEmbedding: {
        if (!in.embedding_head) throw ConfigError("train: VP strategy with embedding head needs class embeddings");
        if (in.embedding_head->embeddings.rows() != k) {
          throw ConfigError("train: class embedding count does not match num_classes");
        }
        return *in.embedding_head;
      }
      case VpHeadKind::kFlm:
      case VpHeadKind::kRlm: {
        if (!in.source_head) throw ConfigError("train: VP strategy needs a source head for label matching");
        LabelMap map;
        if (in.label_map) {
          map = *in.label_map;
        } else if (spec.vp_head == VpHeadKind::kRlm) {
          map = fit_rlm(k, in.source_head->out_features(), derive_seed(spec.optim.seed, "rlm"));
        } else {
          ensure_clean();
          const Matrix<float> logits = in.source_head->forward(gather_rows(clean_all, train_idx));
          map = flm_from_counts(label_count_matrix(logits, data.labels(train_idx), k));
        }
        if (map.target_classes() != k || !map.injective()) throw ConfigError("train: label map is not injective over K classes");
        SourceHead frozen = *in.source_head;
        frozen.trainable = false;
        return MappedHead<float>{frozen, map};
      }
    }
    throw ConfigError("train: unknown VP head");
  }

  Matrix<float> split_features(const ModelState& st, bool with_prompt, std::span<const std::size_t> idx) {
    if (st.backbone) return clean_features(*st.backbone, data, idx, spec.norm);
    if (with_prompt) return prompted_features(backbone, *st.prompt, data, idx, spec.norm);
    return gather_rows(clean_all, idx);
  }

  TrainResult run(const EpochCallback& on_epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    validate(spec.loss);
    const auto phases = spec.plan.phases();
    if (spec.optim.batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (spec.prompt_init == PromptInit::kUniform && !(spec.random_init_half_width > 0.0)) {
      throw ConfigError("train: random prompt init needs a positive half width");
    }

    TrainResult result;
    RunRecord& rec = result.record;
    rec.backbone_hash_before = backbone_hash(backbone);
    rec.counts = count_trainable(spec.plan, spec.prompt, num_classes, backbone.feature_dim(), backbone.parameter_count());

    ModelState st;
    if (spec.plan.strategy == Strategy::kVP) {
      st.head = make_vp_head();
    } else {
      st.head = make_probe<float>(num_classes, backbone.feature_dim());
    }
    if (spec.plan.uses_prompt()) {
      if (spec.prompt.image_size != backbone.input_size()) {
        throw ConfigError("train: prompt image_size must equal the encoder input size");
      }
      if (spec.prompt.channels != static_cast<Index>(data.meta().c)) {
        throw ConfigError("train: prompt channels must equal dataset channels");
      }
      st.prompt = spec.prompt_init == PromptInit::kConstant
                      ? VisualPrompt<float>::constant(spec.prompt)
                      : VisualPrompt<float>::uniform(spec.prompt, spec.random_init_half_width,
                                                     derive_seed(spec.optim.seed, "prompt_init"));
    }
    if (spec.plan.strategy == Strategy::kFF) {
      st.backbone = backbone;
      st.backbone->set_frozen(false);
    } else {
      ensure_clean();
    }

    Rng shuffle_rng(derive_seed(spec.optim.seed, "shuffle"));
    std::size_t global_step = 0;
    std::size_t epoch_counter = 0;
    const std::size_t bs = spec.optim.batch_size;
    const std::size_t steps_per_epoch = (train_idx.size() + bs - 1) / bs;

    for (const auto& phase : phases) {
      if (phase.train_probe && !std::holds_alternative<LinearProbe<float>>(st.head)) {
        throw ContractError("train: probe phase without a linear probe head");
      }
      AdamW<float> opt(spec.optim);
      const std::size_t total_steps = phase.epochs * steps_per_epoch;
      std::size_t phase_step = 0;
      const bool clean_branch = phase.use_prompt && spec.loss.alpha > 0.0;

      for (std::size_t e = 0; e < phase.epochs; ++e) {
        std::vector<std::size_t> order = train_idx;
        shuffle_rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0, pp_sum = 0.0, pm_sum = 0.0;
        std::size_t correct = 0, seen = 0;
        double lr = 0.0;

        for (std::size_t start = 0; start < order.size(); start += bs) {
          const std::span<const std::size_t> batch(order.data() + start, std::min(bs, order.size() - start));
          const auto labels = data.labels(batch);
          lr = lr_at(phase_step, total_steps, spec.optim);

          JointLossResult<float> loss;
          Matrix<float> logits_for_acc;
          Matrix<float> gw;
          Vector<float> gb;
          Planes<float> gdelta;
          typename Backbone::Grads bgrads;

          if (phase.use_prompt) {
            const Matrix<float> clean = clean_branch ? gather_rows(clean_all, batch) : Matrix<float>();
            JointStep<float> step = joint_forward_backward(backbone, *st.prompt, st.head, data.images<float>(batch),
                                                           clean_branch ? &clean : nullptr, labels, spec.norm,
                                                           spec.loss, phase.train_prompt, phase.train_probe);
            loss = std::move(step.loss);
            gw = std::move(step.grad_probe_w);
            gb = std::move(step.grad_probe_b);
            gdelta = std::move(step.grad_delta);
            logits_for_acc = head_logits(st.head, step.features);
          } else if (phase.train_backbone) {
            const auto x = preprocess(data.images<float>(batch), spec.norm, backbone.input_size());
            typename Backbone::Cache cache;
            const Matrix<float> feats = st.backbone->forward(x, &cache, true);
            logits_for_acc = head_logits(st.head, feats);
            loss = joint_loss<float>(logits_for_acc, nullptr, labels, spec.loss);
            accumulate_probe_grad<float>(loss, feats, nullptr, gw, gb);
            const Matrix<float> gf = head_input_grad(st.head, feats, loss.grad_prompted);
            st.backbone->backward(cache, gf, &bgrads);
          } else {
            const Matrix<float> feats = gather_rows(clean_all, batch);
            logits_for_acc = head_logits(st.head, feats);
            loss = joint_loss<float>(logits_for_acc, nullptr, labels, spec.loss);
            accumulate_probe_grad<float>(loss, feats, nullptr, gw, gb);
          }

          if (!std::isfinite(loss.loss)) {
            throw DivergenceError("train: non-finite loss at step " + std::to_string(global_step) + " (phase " +
                                  phase.name + ")", global_step);
          }

          std::vector<ParamRef<float>> params;
          if (phase.train_probe) {
            auto& probe = std::get<LinearProbe<float>>(st.head);
            params.push_back(param_ref<float>(probe.weight, gw));
            params.push_back(param_ref<float>(probe.bias, gb));
          }
          if (phase.train_prompt) params.push_back(param_ref<float>(st.prompt->delta(), gdelta));
          if (phase.train_backbone) {
            auto& blocks = st.backbone->blocks();
            for (std::size_t i = 0; i < blocks.size(); ++i) {
              params.push_back(param_ref<float>(blocks[i].weight, bgrads[i].weight));
              params.push_back(param_ref<float>(blocks[i].gamma, bgrads[i].gamma));
              params.push_back(param_ref<float>(blocks[i].beta, bgrads[i].beta));
            }
          }
          opt.step(params, lr);

          loss_sum += static_cast<double>(loss.per_sample.sum());
          pp_sum += static_cast<double>(loss.p_plus.sum());
          if (loss.p_minus.size() != 0) pm_sum += static_cast<double>(loss.p_minus.sum());
          for (Index i = 0; i < logits_for_acc.rows(); ++i) {
            Index pred = 0;
            logits_for_acc.row(i).maxCoeff(&pred);
            if (pred == labels[static_cast<std::size_t>(i)]) ++correct;
          }
          seen += batch.size();
          ++phase_step;
          ++global_step;
        }

        const bool with_prompt = phase.use_prompt;
        const auto head_val = head_logits(st.head, split_features(st, with_prompt, val_idx));
        const auto head_test = head_logits(st.head, split_features(st, with_prompt, test_idx));
        const double val_acc = evaluate_logits(head_val, val_labels, num_classes).accuracy;
        const double test_acc = evaluate_logits(head_test, test_labels, num_classes).accuracy;

        EpochMetrics m;
        m.epoch = epoch_counter++;
        m.phase = phase.name;
        m.loss = loss_sum / static_cast<double>(seen);
        m.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
        m.val_acc = val_acc;
        m.test_acc = test_acc;
        m.lr = lr;
        m.p_plus_mean = pp_sum / static_cast<double>(seen);
        if (clean_branch) m.p_minus_mean = pm_sum / static_cast<double>(seen);
        rec.epochs.push_back(m);
        if (on_epoch) on_epoch(m);

        if (val_acc > rec.best_val_acc) {
          rec.best_val_acc = val_acc;
          rec.best_test_acc = test_acc;
          rec.best_epoch = m.epoch;
          result.best_state = st;
          if (!with_prompt) result.best_state.prompt.reset();
        }
        rec.final_val_acc = val_acc;
        rec.final_test_acc = test_acc;
      }
    }

    result.final_state = std::move(st);
    rec.backbone_hash_after = result.final_state.backbone ? backbone_hash(*result.final_state.backbone)
                                                          : backbone_hash(backbone);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
  }
};

}  // namespace

TrainResult train(const TrainSpec& spec, const TrainInputs& inputs, const EpochCallback& on_epoch) {
  if (!inputs.data || !inputs.backbone) throw ContractError("train: dataset and backbone are required");
  Trainer t(spec, inputs);
  return t.run(on_epoch);
}

}  // namespace movl
