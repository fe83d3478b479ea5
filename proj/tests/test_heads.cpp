#include <gtest/gtest.h>

#include <set>

#include "movl/error.hpp"
#include "movl/heads.hpp"
#include "movl/random.hpp"
#include "movl/verify.hpp"

using namespace movl;

TEST(Probe, ZeroInitIsUniform) {
  const auto probe = make_probe<double>(4, 8);
  const Matrix<double> f = Matrix<double>::Random(3, 8);
  const Matrix<double> logits = probe_logits(probe, f);
  EXPECT_EQ(logits, Matrix<double>::Zero(3, 4));
  const std::vector<int> labels{0, 1, 3};
  const Vector<double> p = label_confidence(logits, labels);
  for (Index i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(p(i), 0.25);
}

TEST(Probe, OneHotWeights) {
  auto probe = make_probe<double>(3, 3);
  probe.weight << 1, 0, 0, 0, 2, 0, 0, 0, 3;
  Matrix<double> e = Matrix<double>::Zero(1, 3);
  e(0, 1) = 1.0;
  const Matrix<double> logits = probe_logits(probe, e);
  for (Index k = 0; k < 3; ++k) EXPECT_EQ(logits(0, k), probe.weight(k, 1));
}

TEST(Probe, ArithmeticFixture) {
  auto probe = make_probe<double>(2, 2);
  probe.weight << 1, 0, 0, 1;
  Matrix<double> f(1, 2);
  f << 0.3, 0.7;
  const Matrix<double> logits = probe_logits(probe, f);
  EXPECT_DOUBLE_EQ(logits(0, 0), 0.3);
  EXPECT_DOUBLE_EQ(logits(0, 1), 0.7);
}

TEST(Probe, DimensionMismatch) {
  const auto probe = make_probe<float>(2, 4);
  EXPECT_THROW(probe_logits(probe, Matrix<float>(Matrix<float>::Zero(1, 5))), ContractError);
}

TEST(Flm, DiagonalDominance) {
  Eigen::MatrixXi c(2, 2);
  c << 5, 0, 0, 5;
  EXPECT_EQ(flm_from_counts(c).mapping, (std::vector<Index>{0, 1}));
}

TEST(Flm, MaxCountOrderFixture) {
  Eigen::MatrixXi c(2, 2);
  c << 3, 3, 0, 6;
  const LabelMap m = flm_from_counts(c);
  EXPECT_EQ(m.mapping, (std::vector<Index>{0, 1}));
  EXPECT_EQ(matched_count(c, m), 9);
  EXPECT_EQ(brute_force_label_map(c).matched, 9);
}

TEST(Flm, TiesGoToLowerIndex) {
  Eigen::MatrixXi c(2, 3);
  c << 4, 4, 1, 4, 4, 0;
  // Both rows have max 4: row 0 first, takes source 0; row 1 takes source 1.
  EXPECT_EQ(flm_from_counts(c).mapping, (std::vector<Index>{0, 1}));
}

TEST(Flm, Infeasible) {
  EXPECT_THROW(flm_from_counts(Eigen::MatrixXi::Zero(3, 2)), InfeasibleError);
  EXPECT_THROW(fit_rlm(3, 2, 0), InfeasibleError);
}

TEST(Flm, InjectiveAndNeverBeatsOptimum) {
  Rng rng(11);
  for (int t = 0; t < 300; ++t) {
    const Index k = 1 + static_cast<Index>(rng.below(5));
    const Index s = k + static_cast<Index>(rng.below(static_cast<std::uint64_t>(8 - k)));
    Eigen::MatrixXi c(k, s);
    for (Index i = 0; i < c.size(); ++i) c.data()[i] = static_cast<int>(rng.below(10));
    const LabelMap m = flm_from_counts(c);
    ASSERT_TRUE(m.injective());
    ASSERT_LE(matched_count(c, m), brute_force_label_map(c).matched);
  }
}

TEST(Rlm, PermutationAndDeterminism) {
  const LabelMap a = fit_rlm(6, 6, 42);
  const LabelMap b = fit_rlm(6, 6, 42);
  EXPECT_EQ(a.mapping, b.mapping);
  EXPECT_TRUE(a.injective());
  std::set<Index> seen(a.mapping.begin(), a.mapping.end());
  EXPECT_EQ(seen.size(), 6u);
}

TEST(Rlm, SingleClass) {
  const LabelMap m = fit_rlm(1, 5, 3);
  ASSERT_EQ(m.mapping.size(), 1u);
  EXPECT_GE(m.mapping[0], 0);
  EXPECT_LT(m.mapping[0], 5);
}

TEST(Rlm, UniformOverSeeds) {
  std::vector<int> hits(10, 0);
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const LabelMap m = fit_rlm(2, 10, seed);
    ASSERT_TRUE(m.injective());
    ++hits[static_cast<std::size_t>(m.mapping[0])];
  }
  for (int h : hits) EXPECT_NEAR(h / 10000.0, 0.1, 0.01);
}

TEST(MappedLogits, IdentityAndSelection) {
  const Matrix<double> logits = Matrix<double>::Random(4, 3);
  LabelMap id;
  id.mapping = {0, 1, 2};
  id.source_classes = 3;
  EXPECT_EQ(mapped_logits(logits, id), logits);

  LabelMap one;
  one.mapping = {2};
  one.source_classes = 3;
  Matrix<double> abc(1, 3);
  abc << 1.5, -2.0, 7.25;
  const Matrix<double> out = mapped_logits(abc, one);
  ASSERT_EQ(out.cols(), 1);
  EXPECT_EQ(out(0, 0), 7.25);
}

TEST(MappedLogits, ArgmaxFollowsMappedSource) {
  Rng rng(2);
  for (int t = 0; t < 50; ++t) {
    Matrix<double> logits(1, 6);
    for (Index i = 0; i < 6; ++i) logits(0, i) = rng.uniform(-3, 3);
    const LabelMap m = fit_rlm(4, 6, static_cast<std::uint64_t>(t));
    Index arg = 0;
    mapped_logits(logits, m).row(0).maxCoeff(&arg);
    for (Index k = 0; k < 4; ++k) {
      EXPECT_LE(logits(0, m.mapping[static_cast<std::size_t>(k)]),
                logits(0, m.mapping[static_cast<std::size_t>(arg)]));
    }
  }
}

TEST(EmbeddingHead, ScaleInvarianceAndTemperature) {
  const auto head = EmbeddingHead<double>::make(Matrix<double>::Random(5, 8), Matrix<double>::Random(8, 16), 100.0);
  for (Index k = 0; k < 5; ++k) EXPECT_NEAR(head.embeddings.row(k).norm(), 1.0, 1e-12);
  const Matrix<double> f = Matrix<double>::Random(3, 16);
  const Matrix<double> a = head_logits(head, f);
  const Matrix<double> b = head_logits(head, Matrix<double>(f * 7.5));
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE(a.cwiseAbs().maxCoeff(), 100.0 + 1e-9);
  auto cold = head;
  cold.temperature = 25.0;
  EXPECT_LE((head_logits(cold, f) * 4.0 - a).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(EmbeddingHead, RejectsBadInputs) {
  EXPECT_THROW(EmbeddingHead<double>::make(Matrix<double>::Ones(2, 4), Matrix<double>(), 0.0), ConfigError);
  EXPECT_THROW(EmbeddingHead<double>::make(Matrix<double>::Zero(2, 4), Matrix<double>(), 1.0), ConfigError);
}

TEST(EmbeddingHead, InputGradientMatchesFiniteDifferences) {
  const auto head = EmbeddingHead<double>::make(Matrix<double>::Random(4, 6), Matrix<double>::Random(6, 10), 10.0);
  Matrix<double> f = Matrix<double>::Random(2, 10);
  const Matrix<double> g = Matrix<double>::Random(2, 4);
  const Matrix<double> ad = head_input_grad(head, f, g);
  std::vector<Index> all(20);
  for (Index i = 0; i < 20; ++i) all[static_cast<std::size_t>(i)] = i;
  Eigen::Map<Eigen::VectorXd> params(f.data(), f.size());
  const auto fd = finite_diff_grad([&] { return head_logits(head, f).cwiseProduct(g).sum(); }, params, all, 1e-5);
  std::vector<double> adv(ad.data(), ad.data() + ad.size());
  EXPECT_LE(compare_gradients("features", adv, fd).max_rel_err, 1e-6);
}
