#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "movl/backbone.hpp"
#include "movl/data.hpp"
#include "movl/heads.hpp"
#include "movl/loss.hpp"
#include "movl/optim.hpp"
#include "movl/prompt.hpp"

namespace movl {

enum class Strategy { kLP, kVP, kLPThenVP, kLPThenMix, kMix, kFF };

std::string to_string(Strategy s);
/// Accepts lp, vp, lp_then_vp, lp_then_mix, mix, ff (also "lp-vp"/"lp-mix").
Strategy strategy_from_string(const std::string& s);

/// Parameter groups a phase updates.
struct Phase {
  std::string name;
  std::size_t epochs = 0;
  bool train_probe = false;
  bool train_prompt = false;
  bool train_backbone = false;
  bool use_prompt = false;
};

struct StrategyPlan {
  Strategy strategy = Strategy::kMix;
  std::size_t total_epochs = 20;
  /// Epochs in the first stage of two-stage strategies.
  std::size_t phase_boundary = 10;

  std::vector<Phase> phases() const;
  bool uses_prompt() const;
};

enum class PromptInit { kConstant, kUniform };
enum class VpHeadKind { kFlm, kRlm, kEmbedding };

std::string to_string(PromptInit p);
PromptInit prompt_init_from_string(const std::string& s);
std::string to_string(VpHeadKind k);
VpHeadKind vp_head_from_string(const std::string& s);

struct TrainSpec {
  StrategyPlan plan;
  LossSpec loss;
  PromptConfig prompt;
  PromptInit prompt_init = PromptInit::kConstant;
  double random_init_half_width = 0.03;
  OptimConfig optim;
  Normalization norm;
  VpHeadKind vp_head = VpHeadKind::kFlm;
};

struct TrainInputs {
  const Dataset* data = nullptr;
  const Backbone* backbone = nullptr;
  const SourceHead* source_head = nullptr;
  const EmbeddingHead<float>* embedding_head = nullptr;
  /// Overrides FLM/RLM fitting for the VP strategy when set.
  std::optional<LabelMap> label_map;
};

struct ParamCounts {
  std::int64_t prompt = 0;
  std::int64_t probe = 0;
  std::int64_t backbone = 0;
  std::int64_t total() const { return prompt + probe + backbone; }
};

/// VP pad count C*(H^2-(H-2p)^2), LP count K*D+K, FF adds the encoder.
ParamCounts count_trainable(const StrategyPlan& plan, const PromptConfig& prompt, Index num_classes,
                            Index feature_dim, std::int64_t backbone_params);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string phase;
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double test_acc = 0.0;
  double lr = 0.0;
  std::optional<double> p_plus_mean;
  std::optional<double> p_minus_mean;
};

struct RunRecord {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  double best_val_acc = -1.0;
  /// Test accuracy of the best-validation checkpoint.
  double best_test_acc = 0.0;
  double final_val_acc = 0.0;
  double final_test_acc = 0.0;
  ParamCounts counts;
  std::string backbone_hash_before;
  std::string backbone_hash_after;
  double wall_seconds = 0.0;
};

struct ModelState {
  std::optional<VisualPrompt<float>> prompt;
  Head<float> head;
  /// Present only for full finetuning.
  std::optional<Backbone> backbone;
};

struct TrainResult {
  RunRecord record;
  ModelState final_state;
  ModelState best_state;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Runs a strategy end to end. The input encoder is never modified; full
/// finetuning trains a copy held in the returned states.
TrainResult train(const TrainSpec& spec, const TrainInputs& inputs, const EpochCallback& on_epoch = {});

struct EvalResult {
  double accuracy = 0.0;
  std::vector<double> per_class;
  Eigen::MatrixXi confusion;  // [true, predicted]
};

/// Metrics from precomputed logits.
EvalResult evaluate_logits(const Matrix<float>& logits, std::span<const int> labels, Index num_classes);

/// Accuracy, per-class accuracy and confusion of encoder (+ prompt) + head on a split.
EvalResult evaluate(const Backbone& backbone, const VisualPrompt<float>* prompt, const Head<float>& head,
                    const Dataset& data, const std::string& split, const Normalization& norm);

/// Clean (unprompted) features of the given samples.
Matrix<float> clean_features(const Backbone& backbone, const Dataset& data, std::span<const std::size_t> indices,
                             const Normalization& norm);

/// K x S matrix of frozen source-head predictions per target class.
Eigen::MatrixXi label_count_matrix(const Matrix<float>& source_logits, std::span<const int> labels,
                                   Index num_classes);

/// Frequency label matching on the "train" split, no prompt attached.
LabelMap fit_flm(const Backbone& backbone, const SourceHead& head, const Dataset& data, const Normalization& norm);

}  // namespace movl
