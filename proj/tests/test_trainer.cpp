#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <numeric>

#include "movl/backbone.hpp"
#include "movl/data.hpp"
#include "movl/error.hpp"
#include "movl/experiment.hpp"
#include "movl/random.hpp"
#include "movl/trainer.hpp"

using namespace movl;

TEST(LrSchedule, Fixtures) {
  OptimConfig cfg;
  cfg.lr = 0.01;
  cfg.warmup_steps = 10;
  EXPECT_DOUBLE_EQ(lr_at(0, 100, cfg), 0.001);
  EXPECT_EQ(lr_at(9, 100, cfg), 0.01);
  EXPECT_EQ(lr_at(99, 100, cfg), 0.01 * 0.5 * (1 + std::cos(M_PI * 89.0 / 90.0)));
  EXPECT_LT(lr_at(9999, 10000, cfg), 1e-8);
}

TEST(LrSchedule, Errors) {
  OptimConfig cfg;
  EXPECT_THROW(lr_at(0, 10, cfg), ConfigError);
  EXPECT_THROW(lr_at(0, 5, cfg), ConfigError);
  EXPECT_THROW(lr_at(20, 20, cfg), ContractError);
}

TEST(LrSchedule, WarmupRisesThenNonIncreasing) {
  OptimConfig cfg;
  for (std::size_t total : {11u, 37u, 120u, 2000u}) {
    for (std::size_t s = 1; s < total; ++s) {
      if (s < cfg.warmup_steps) {
        ASSERT_GT(lr_at(s, total, cfg), lr_at(s - 1, total, cfg));
      } else {
        ASSERT_LE(lr_at(s, total, cfg), lr_at(s - 1, total, cfg));
      }
    }
  }
}

TEST(Evaluate, ConstantPredictorOnBalancedSplit) {
  Matrix<float> logits = Matrix<float>::Zero(10, 2);
  logits.col(0).setOnes();
  std::vector<int> labels{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  const EvalResult r = evaluate_logits(logits, labels, 2);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[0], 1.0);
  EXPECT_DOUBLE_EQ(r.per_class[1], 0.0);
}

TEST(Evaluate, OracleLogits) {
  std::vector<int> labels{2, 0, 1, 1, 2, 0};
  Matrix<float> logits = Matrix<float>::Zero(6, 3);
  for (Index i = 0; i < 6; ++i) logits(i, labels[static_cast<std::size_t>(i)]) = 5.0f;
  const EvalResult r = evaluate_logits(logits, labels, 3);
  EXPECT_DOUBLE_EQ(r.accuracy, 1.0);
  Eigen::MatrixXi diag = Eigen::MatrixXi::Zero(3, 3);
  diag.diagonal().setConstant(2);
  EXPECT_EQ(r.confusion, diag);
}

TEST(Evaluate, OrderInvariant) {
  Rng rng(3);
  Matrix<float> logits(40, 4);
  std::vector<int> labels;
  for (Index i = 0; i < logits.size(); ++i) logits.data()[i] = static_cast<float>(rng.uniform());
  for (int i = 0; i < 40; ++i) labels.push_back(static_cast<int>(rng.below(4)));
  std::vector<Index> perm(40);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm.begin(), perm.end());
  Matrix<float> pl(40, 4);
  std::vector<int> plab(40);
  for (Index i = 0; i < 40; ++i) {
    pl.row(i) = logits.row(perm[static_cast<std::size_t>(i)]);
    plab[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  const EvalResult a = evaluate_logits(logits, labels, 4);
  const EvalResult b = evaluate_logits(pl, plab, 4);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_EQ(a.per_class, b.per_class);
  EXPECT_EQ(a.confusion, b.confusion);
}

TEST(Evaluate, EmptySplitIsContractError) {
  EXPECT_THROW(evaluate_logits(Matrix<float>(0, 3), {}, 3), ContractError);
}

TEST(CountTrainable, Formulas) {
  PromptConfig full_scale;
  full_scale.image_size = 224;
  full_scale.pad_width = 30;
  StrategyPlan plan;
  plan.strategy = Strategy::kVP;
  EXPECT_EQ(count_trainable(plan, full_scale, 7, 512, 0).prompt, 69840);
  EXPECT_EQ(count_trainable(plan, full_scale, 7, 512, 0).probe, 0);
  plan.strategy = Strategy::kLP;
  EXPECT_EQ(count_trainable(plan, full_scale, 7, 512, 0).total(), 3591);
  plan.strategy = Strategy::kMix;
  const ParamCounts mix = count_trainable(plan, full_scale, 7, 512, 0);
  EXPECT_EQ(mix.total(), 69840 + 3591);
  EXPECT_EQ(mix.prompt + mix.probe, mix.total());
  plan.strategy = Strategy::kFF;
  const ParamCounts ff = count_trainable(plan, full_scale, 7, 512, 1000);
  EXPECT_EQ(ff.total(), 1000 + 3591);
  EXPECT_EQ(ff.prompt, 0);
}

TEST(StrategyPlan, PhaseTable) {
  StrategyPlan plan;
  plan.strategy = Strategy::kLPThenVP;
  auto ph = plan.phases();
  ASSERT_EQ(ph.size(), 2u);
  EXPECT_TRUE(ph[0].train_probe && !ph[0].train_prompt && !ph[0].use_prompt);
  EXPECT_TRUE(!ph[1].train_probe && ph[1].train_prompt);
  EXPECT_EQ(ph[0].epochs + ph[1].epochs, 20u);
  plan.strategy = Strategy::kLPThenMix;
  ph = plan.phases();
  EXPECT_TRUE(ph[1].train_probe && ph[1].train_prompt);
  for (auto s : {Strategy::kLP, Strategy::kVP, Strategy::kLPThenVP, Strategy::kLPThenMix, Strategy::kMix}) {
    plan.strategy = s;
    for (const auto& p : plan.phases()) EXPECT_FALSE(p.train_backbone) << to_string(s);
  }
  plan.strategy = Strategy::kFF;
  EXPECT_TRUE(plan.phases()[0].train_backbone);
  EXPECT_THROW(strategy_from_string("lp+vp"), ConfigError);
  EXPECT_EQ(strategy_from_string("lp-mix"), Strategy::kLPThenMix);
}

// Small end-to-end problem: K=3 target at 32 px over a random encoder.
class TrainerRuns : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    auto spec = SyntheticDomainSpec::target(3, 4);
    spec.image_size = 32;
    spec.val_per_class = 10;
    spec.test_per_class = 10;
    data_ = std::make_unique<Dataset>(make_synthetic(spec, 50));
    BackboneConfig bc;
    bc.input_size = 32;
    backbone_ = std::make_unique<Backbone>(Backbone::random(bc, 7));
    Rng rng(1);
    head_ = std::make_unique<SourceHead>(SourceHead::random(5, backbone_->feature_dim(), rng));
  }

  static TrainSpec spec(Strategy s, std::size_t epochs = 4) {
    TrainSpec t;
    t.plan.strategy = s;
    t.plan.total_epochs = epochs;
    t.plan.phase_boundary = epochs / 2;
    t.prompt.image_size = 32;
    t.prompt.pad_width = 4;
    t.optim.batch_size = 32;
    t.optim.warmup_steps = 2;
    t.optim.seed = 5;
    return t;
  }

  static TrainInputs inputs() {
    TrainInputs in;
    in.data = data_.get();
    in.backbone = backbone_.get();
    in.source_head = head_.get();
    return in;
  }

  static std::vector<std::string> lines(const RunRecord& r) {
    std::vector<std::string> out;
    for (const auto& m : r.epochs) out.push_back(metrics_line(m));
    return out;
  }

  static std::unique_ptr<Dataset> data_;
  static std::unique_ptr<Backbone> backbone_;
  static std::unique_ptr<SourceHead> head_;
};

std::unique_ptr<Dataset> TrainerRuns::data_;
std::unique_ptr<Backbone> TrainerRuns::backbone_;
std::unique_ptr<SourceHead> TrainerRuns::head_;

TEST_F(TrainerRuns, LpIgnoresAlpha) {
  TrainSpec a = spec(Strategy::kLP);
  a.loss.alpha = 0.0;
  TrainSpec b = spec(Strategy::kLP);
  b.loss.alpha = 1.0;
  const auto ra = train(a, inputs());
  const auto rb = train(b, inputs());
  EXPECT_EQ(lines(ra.record), lines(rb.record));
  for (const auto& m : ra.record.epochs) EXPECT_FALSE(m.p_minus_mean.has_value());
}

TEST_F(TrainerRuns, Deterministic) {
  const auto a = train(spec(Strategy::kMix), inputs());
  const auto b = train(spec(Strategy::kMix), inputs());
  EXPECT_EQ(lines(a.record), lines(b.record));
  EXPECT_EQ(a.final_state.prompt->delta(), b.final_state.prompt->delta());
}

TEST_F(TrainerRuns, FrozenEncoderUnchangedExceptFullFinetune) {
  const std::string before = backbone_hash(*backbone_);
  for (auto s : {Strategy::kLP, Strategy::kVP, Strategy::kLPThenVP, Strategy::kLPThenMix, Strategy::kMix}) {
    const auto r = train(spec(s), inputs());
    EXPECT_EQ(r.record.backbone_hash_before, before) << to_string(s);
    EXPECT_EQ(r.record.backbone_hash_after, before) << to_string(s);
    EXPECT_FALSE(r.final_state.backbone.has_value());
  }
  const auto ff = train(spec(Strategy::kFF, 2), inputs());
  EXPECT_NE(ff.record.backbone_hash_after, before);
  EXPECT_EQ(backbone_hash(*backbone_), before);
  ASSERT_TRUE(ff.final_state.backbone.has_value());
  EXPECT_EQ(ff.record.counts.backbone, backbone_->parameter_count());
}

TEST_F(TrainerRuns, PromptReceivesGradientInBothGeometries) {
  for (auto mode : {PromptMode::kPad, PromptMode::kOverlay}) {
    TrainSpec t = spec(Strategy::kMix, 3);
    t.prompt.mode = mode;
    const auto r = train(t, inputs());
    const auto init = VisualPrompt<float>::constant(r.final_state.prompt->config());
    EXPECT_GT((r.final_state.prompt->delta() - init.delta()).cwiseAbs().maxCoeff(), 0.0f) << to_string(mode);
  }
}

TEST_F(TrainerRuns, TwoStagePhases) {
  const auto r = train(spec(Strategy::kLPThenVP), inputs());
  ASSERT_EQ(r.record.epochs.size(), 4u);
  EXPECT_EQ(r.record.epochs[0].phase, "lp");
  EXPECT_EQ(r.record.epochs[3].phase, "vp");
  // The schedule restarts at the boundary: warmup again from lr / W.
  EXPECT_GT(r.record.epochs[2].lr, r.record.epochs[1].lr);
}

TEST_F(TrainerRuns, MetricsWellFormed) {
  const auto r = train(spec(Strategy::kMix), inputs());
  ASSERT_EQ(r.record.epochs.size(), 4u);
  for (const auto& m : r.record.epochs) {
    EXPECT_GE(m.test_acc, 0.0);
    EXPECT_LE(m.test_acc, 1.0);
    EXPECT_TRUE(m.p_plus_mean.has_value());
    EXPECT_TRUE(m.p_minus_mean.has_value());
  }
  EXPECT_EQ(r.record.best_val_acc, r.record.epochs[r.record.best_epoch].val_acc);
  EXPECT_EQ(r.record.best_test_acc, r.record.epochs[r.record.best_epoch].test_acc);
  EXPECT_EQ(r.record.counts.prompt, prompt_parameter_count(spec(Strategy::kMix).prompt));
  EXPECT_EQ(r.record.counts.probe, 3 * 128 + 3);
}

TEST_F(TrainerRuns, VpHeads) {
  TrainSpec t = spec(Strategy::kVP, 2);
  t.vp_head = VpHeadKind::kRlm;
  EXPECT_NO_THROW(train(t, inputs()));
  t.vp_head = VpHeadKind::kEmbedding;
  EXPECT_THROW(train(t, inputs()), ConfigError);
  const auto emb = EmbeddingHead<float>::make(Matrix<float>::Random(3, 128), Matrix<float>(), 100.0);
  TrainInputs in = inputs();
  in.embedding_head = &emb;
  const auto r = train(t, in);
  EXPECT_EQ(r.record.counts.probe, 0);
  TrainInputs no_head = inputs();
  no_head.source_head = nullptr;
  t.vp_head = VpHeadKind::kFlm;
  EXPECT_THROW(train(t, no_head), ConfigError);
}

TEST_F(TrainerRuns, DivergenceReportsStep) {
  TrainSpec t = spec(Strategy::kMix, 2);
  t.optim.lr = 1e38;
  try {
    train(t, inputs());
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST_F(TrainerRuns, FlmUsesTrainSplit) {
  const LabelMap a = fit_flm(*backbone_, *head_, *data_, Normalization{});
  const LabelMap b = fit_flm(*backbone_, *head_, *data_, Normalization{});
  EXPECT_EQ(a.mapping, b.mapping);
  EXPECT_TRUE(a.injective());
  EXPECT_EQ(a.method, LabelMapMethod::kFrequency);
}
