#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "movl/error.hpp"
#include "movl/verify.hpp"

using namespace movl;

namespace {

std::vector<Index> all_entries(Index n) {
  std::vector<Index> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), Index{0});
  return v;
}

}  // namespace

TEST(FiniteDiff, Quadratic) {
  Eigen::VectorXd theta(2);
  theta << 1, -2;
  const auto fd = finite_diff_grad([&] { return 0.5 * theta.squaredNorm(); }, theta, all_entries(2), 1e-5);
  EXPECT_NEAR(fd.grad[0], 1.0, 1e-9);
  EXPECT_NEAR(fd.grad[1], -2.0, 1e-9);
  EXPECT_EQ(theta(0), 1.0);
  EXPECT_EQ(theta(1), -2.0);
}

TEST(FiniteDiff, LinearIsExactUpToRounding) {
  Eigen::VectorXd c(3), theta(3);
  c << 0.5, -3, 2;
  theta << 0.1, 0.2, 0.3;
  for (double h : {1e-1, 1e-3, 1e-6}) {
    const auto fd = finite_diff_grad([&] { return c.dot(theta); }, theta, all_entries(3), h);
    for (Index i = 0; i < 3; ++i) EXPECT_NEAR(fd.grad[static_cast<std::size_t>(i)], c(i), 1e-14 / h);
  }
}

TEST(FiniteDiff, LogSumExpMatchesSoftmax) {
  Eigen::VectorXd theta(5);
  theta << 0.3, -1.2, 2.0, 0.0, 0.7;
  const Eigen::VectorXd soft = theta.array().exp() / theta.array().exp().sum();
  const auto fd = finite_diff_grad([&] { return std::log(theta.array().exp().sum()); }, theta, all_entries(5), 1e-5);
  for (Index i = 0; i < 5; ++i) EXPECT_NEAR(fd.grad[static_cast<std::size_t>(i)], soft(i), 1e-9);
}

TEST(FiniteDiff, NonFiniteProbeIsSkipped) {
  Eigen::VectorXd theta(2);
  theta << 5e-4, 1.0;
  const auto fd = finite_diff_grad([&] { return std::log(theta(0)) + theta(1); }, theta, all_entries(2), 1e-3);
  EXPECT_TRUE(fd.skipped[0]);
  EXPECT_FALSE(fd.skipped[1]);
  const std::vector<double> ad{2000.0, 1.0};
  const GroupCheck g = compare_gradients("x", ad, fd);
  EXPECT_EQ(g.skipped, 1u);
  EXPECT_EQ(g.entries, 1u);
  EXPECT_THROW(finite_diff_grad([] { return 0.0; }, theta, all_entries(2), 0.0), ConfigError);
}

TEST(RelativeError, Definition) {
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-13, 0.0), 0.1);
}

TEST(BruteForce, DiagonalIsIdentity) {
  Eigen::MatrixXi c = Eigen::MatrixXi::Zero(4, 4);
  c.diagonal() << 3, 1, 4, 1;
  const auto r = brute_force_label_map(c);
  EXPECT_EQ(r.map.mapping, (std::vector<Index>{0, 1, 2, 3}));
  EXPECT_EQ(r.matched, 9);
}

TEST(BruteForce, TwoByTwoFixture) {
  Eigen::MatrixXi c(2, 2);
  c << 3, 3, 0, 6;
  const auto r = brute_force_label_map(c);
  EXPECT_EQ(r.map.mapping, (std::vector<Index>{0, 1}));
  EXPECT_EQ(r.matched, 9);
}

TEST(BruteForce, LexicographicTieBreak) {
  const auto r = brute_force_label_map(Eigen::MatrixXi::Ones(2, 3));
  EXPECT_EQ(r.map.mapping, (std::vector<Index>{0, 1}));
}

TEST(BruteForce, SizeBounds) {
  EXPECT_THROW(brute_force_label_map(Eigen::MatrixXi::Zero(9, 10)), SizeError);
  EXPECT_THROW(brute_force_label_map(Eigen::MatrixXi::Zero(3, 11)), SizeError);
  EXPECT_THROW(brute_force_label_map(Eigen::MatrixXi::Zero(3, 2)), InfeasibleError);
}

// Toy encoder (seed 11), 64 px pad prompt, K = 7, two samples, problem seed 5,
// entry seed 3. Observed maxima are pinned with a 10x band; the contractual
// bounds are 1e-3 (float32) and 1e-6 (float64).
TEST(GradCheck, JointFixture) {
  const Backbone bb = Backbone::random(BackboneConfig{}, 11);
  const JointProblem pad = make_joint_problem(bb, PromptConfig{}, 7, 2, LossSpec{}, 5);
  const auto rf = gradcheck_joint<float>(pad, 64, 3);
  const auto rd = gradcheck_joint<double>(pad, 64, 3);
  ASSERT_EQ(rf.groups.size(), 3u);
  EXPECT_EQ(rf.groups[0].name, "prompt.delta[pad]");
  EXPECT_EQ(rf.groups[0].entries, 64u);
  EXPECT_EQ(rf.groups[1].entries, 64u);
  EXPECT_EQ(rf.groups[2].entries, 7u);
  EXPECT_LE(rf.max_rel_err(), 1e-3);
  EXPECT_LE(rd.max_rel_err(), 1e-6);
  EXPECT_LE(rf.max_rel_err(), 9.6e-4);
  EXPECT_LE(rd.max_rel_err(), 1.1e-8);
  EXPECT_EQ(rf.h, 1e-3);
  EXPECT_EQ(rd.h, 1e-5);
}

TEST(CertifyDetach, PassesAndCatchesMutation) {
  const Backbone bb = Backbone::random(BackboneConfig{}, 11);
  JointProblem p = make_joint_problem(bb, PromptConfig{}, 7, 2, LossSpec{}, 5);
  const DetachEvidence ok = certify_detach(p);
  EXPECT_TRUE(ok.pass);
  EXPECT_EQ(ok.b_dummy_grad, 0.0);
  p.loss.detach_clean = false;
  const DetachEvidence bad = certify_detach(p);
  EXPECT_FALSE(bad.pass);
  EXPECT_FALSE(bad.criterion_a);
  EXPECT_NE(bad.b_dummy_grad, 0.0);
}

TEST(CertifyDetach, AlphaZeroIsTrivial) {
  const Backbone bb = Backbone::random(BackboneConfig{}, 11);
  LossSpec ce;
  ce.alpha = 0.0;
  ce.detach_clean = false;
  const DetachEvidence ev = certify_detach(make_joint_problem(bb, PromptConfig{}, 7, 2, ce, 5));
  EXPECT_TRUE(ev.trivial);
  EXPECT_TRUE(ev.pass);
}

// Implemented loss vs p_minus-frozen surrogate on head parameters shared by
// both branches: autodiff matches the surrogate and not the full loss.
TEST(CertifyDetach, AsymmetryOnSharedHead) {
  const Backbone bb = Backbone::random(BackboneConfig{}, 11);
  const JointProblem p = make_joint_problem(bb, PromptConfig{}, 7, 2, LossSpec{0.5, true, false}, 5);
  const Matrix<double> pf = bb.forward(prompted_input(p.raw, p.prompt, p.norm)).cast<double>();
  const Matrix<double> cf = bb.forward(preprocess(p.raw, p.norm, bb.input_size())).cast<double>();
  LinearProbe<double> probe = p.probe.cast<double>();
  const Matrix<double> lp = probe.forward(pf);
  const Matrix<double> lc = probe.forward(cf);
  const auto r = joint_loss(lp, &lc, p.labels, p.loss);
  Matrix<double> gw;
  Vector<double> gb;
  accumulate_probe_grad(r, pf, &cf, gw, gb);
  const auto idx = all_entries(probe.bias.size());
  Eigen::Map<Eigen::VectorXd> b(probe.bias.data(), probe.bias.size());
  const auto full = finite_diff_grad(
      [&] {
        const Matrix<double> clean = probe.forward(cf);
        return joint_loss(Matrix<double>(probe.forward(pf)), &clean, p.labels, p.loss).loss;
      },
      b, idx, 1e-5);
  const std::vector<double> ad(gb.data(), gb.data() + gb.size());
  EXPECT_GT(compare_gradients("bias", ad, full).max_rel_err, 1e-3);
}
