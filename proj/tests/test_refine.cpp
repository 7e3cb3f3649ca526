#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "causalgaze/detector.hpp"
#include "causalgaze/refine.hpp"
#include "test_util.hpp"

using namespace causalgaze;
using refine::GateParams;

namespace {

GateParams random_gate(std::mt19937_64& rng, std::size_t inputs, std::size_t hidden, bool nonneg_scale) {
  GateParams g;
  g.w1 = cgtest::random_tensor(rng, inputs, hidden, -2, 2);
  g.b1 = cgtest::random_tensor(rng, 1, hidden, -1, 1);
  g.w2 = cgtest::random_tensor(rng, hidden, 1, -2, 2);
  g.b2 = cgtest::random_tensor(rng, 1, 1, -1, 1);
  std::uniform_real_distribution<double> u(nonneg_scale ? 0.0 : -1.0, 2.0);
  g.a = Tensor::scalar(u(rng));
  g.b = Tensor::scalar(u(rng));
  return g;
}

// Pass-1 loss as a plain function of A, for finite differences.
double pass1_loss(const Tensor& H, const Tensor& A, std::size_t target, const detector::DetectorParams& params) {
  engine::Tape t;
  const auto p = detector::bind(t, params, false);
  const auto masked = t.mul(t.constant(A), t.constant(refine::causal_mask(A.rows())));
  const auto logits = detector::encode(t, t.constant(H), masked, p).logits;
  return t.softmax_cross_entropy(logits, target).value()[0];
}

}  // namespace

TEST(Mask, LowerTriangularOnes) {
  const Tensor m = refine::causal_mask(3);
  EXPECT_EQ(m, Tensor(3, 3, {1, 0, 0, 1, 1, 0, 1, 1, 1}));
}

TEST(Gate, ZeroMlpWeightsGiveExactlyHalf) {
  std::mt19937_64 rng(1);
  GateParams g;
  g.w1 = Tensor(2, 16);
  g.b1 = Tensor(1, 16);
  g.w2 = Tensor(16, 1);
  g.b2 = Tensor(1, 1);
  const Tensor A = cgtest::random_attention(rng, 6);
  const Tensor S = cgtest::random_tensor(rng, 6, 6, 0, 3);
  const Tensor G = refine::gate(A, S, g);
  for (double v : G.data()) EXPECT_EQ(v, 0.5);
}

TEST(Gate, ZeroScaleGivesShift) {
  std::mt19937_64 rng(2);
  GateParams g = random_gate(rng, 2, 4, false);
  g.a = Tensor::scalar(0.0);
  g.b = Tensor::scalar(-0.375);
  const Tensor G = refine::gate(cgtest::random_attention(rng, 4), cgtest::random_tensor(rng, 4, 4, 0, 1), g);
  for (double v : G.data()) EXPECT_EQ(v, -0.375);
}

TEST(Gate, SingleEdgeMatchesScalarEvaluation) {
  GateParams g;
  g.w1 = Tensor(2, 2, {0.3, -1.2, 0.8, 0.5});
  g.b1 = Tensor(1, 2, {0.1, -0.05});
  g.w2 = Tensor(2, 1, {1.5, -0.7});
  g.b2 = Tensor::scalar(0.2);
  g.a = Tensor::scalar(1.3);
  g.b = Tensor::scalar(0.1);
  const double A = 0.7, S = 0.2;
  const double h0 = std::max(0.0, 0.3 * A + 0.8 * S + 0.1);
  const double h1 = std::max(0.0, -1.2 * A + 0.5 * S - 0.05);
  const double o = 1.5 * h0 - 0.7 * h1 + 0.2;
  const double expected = 1.3 / (1.0 + std::exp(-o)) + 0.1;
  const Tensor G = refine::gate(Tensor::scalar(A), Tensor::scalar(S), g);
  EXPECT_NEAR(G(0, 0), expected, 1e-15);
}

TEST(Gate, AttentionOnlyInputForMlpA) {
  GateParams g;
  g.w1 = Tensor(1, 1, {2.0});
  g.b1 = Tensor(1, 1, {-0.5});
  g.w2 = Tensor(1, 1, {1.0});
  g.b2 = Tensor::scalar(0.0);
  const Tensor G = refine::gate(Tensor::scalar(0.75), Tensor(), g);
  EXPECT_NEAR(G(0, 0), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
}

TEST(Gate, ShapeMismatchThrows) {
  std::mt19937_64 rng(3);
  const GateParams g = random_gate(rng, 2, 3, true);
  EXPECT_THROW(refine::gate(cgtest::random_attention(rng, 3), Tensor(2, 2), g), ShapeError);
  EXPECT_THROW(refine::gate(cgtest::random_attention(rng, 3), Tensor(), g), ShapeError);
}

TEST(Refine, IdentityGateKeepsAttention) {
  std::mt19937_64 rng(4);
  const Tensor A = cgtest::random_attention(rng, 5);
  EXPECT_EQ(refine::refine_edges(A, Tensor(5, 5, 1.0)), A);
}

TEST(Refine, NegativeGateClampsToZero) {
  std::mt19937_64 rng(5);
  const Tensor A = cgtest::random_attention(rng, 5);
  EXPECT_EQ(refine::refine_edges(A, Tensor(5, 5, -3.0)), Tensor(5, 5));
}

TEST(Refine, HandExample) {
  const Tensor A(2, 2, {1, 0, 0.4, 0.6});
  const Tensor G(2, 2, {0.5, 9, 0.25, 1});
  EXPECT_EQ(refine::refine_edges(A, G), Tensor(2, 2, {0.5, 0, 0.1, 0.6}));
}

TEST(Refine, MasksEvenWhenAttentionHasUpperEntries) {
  const Tensor A(2, 2, {0.5, 0.5, 0.4, 0.6});
  const Tensor R = refine::refine_edges(A, Tensor(2, 2, 2.0));
  EXPECT_EQ(R(0, 1), 0.0);
  EXPECT_EQ(R(0, 0), 1.0);
}

TEST(Refine, StructuralInvariantsOver1000Evaluations) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<std::size_t> len(1, 9), hid(1, 16);
  for (int k = 0; k < 1000; ++k) {
    const std::size_t L = len(rng);
    const GateParams g = random_gate(rng, 2, hid(rng), true);
    Tensor A = cgtest::random_attention(rng, L, 4.0);
    if (k % 5 == 0 && L > 1) A(L - 1, 0) = 0.0;
    const Tensor S = cgtest::random_tensor(rng, L, L, 0.0, 5.0);
    const Tensor R = refine::refine_edges(A, refine::gate(A, S, g));
    const double bound = g.a[0] + g.b[0];
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        if (j > i) {
          ASSERT_EQ(R(i, j), 0.0);
          continue;
        }
        ASSERT_GE(R(i, j), 0.0);
        ASSERT_LE(R(i, j), bound * A(i, j) * (1.0 + 1e-15));
        if (A(i, j) == 0.0) {
          ASSERT_EQ(R(i, j), 0.0);
        }
      }
  }
}

TEST(Target, Rules) {
  const Tensor up(1, 2, {0.0, 1.0}), down(1, 2, {1.0, 0.0}), tie(1, 2, {0.3, 0.3});
  EXPECT_EQ(refine::resolve_target(SensitivityTarget::Predicted, dataio::Label::Unknown, up), 1u);
  EXPECT_EQ(refine::resolve_target(SensitivityTarget::Predicted, dataio::Label::Unknown, down), 0u);
  EXPECT_EQ(refine::resolve_target(SensitivityTarget::Predicted, dataio::Label::Unknown, tie), 1u);
  EXPECT_EQ(refine::resolve_target(SensitivityTarget::Hallucination, dataio::Label::Fact, down), 1u);
  EXPECT_EQ(refine::resolve_target(SensitivityTarget::TrueLabel, dataio::Label::Fact, up), 0u);
  EXPECT_THROW(refine::resolve_target(SensitivityTarget::TrueLabel, dataio::Label::Unknown, up), ConfigError);
}

TEST(Sensitivity, MatchesFiniteDifferenceOracle) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> len(1, 5), dim(2, 6);
  for (int k = 0; k < 10; ++k) {
    const std::size_t L = k == 0 ? 3 : len(rng), d = k == 0 ? 4 : dim(rng);
    auto r = cgtest::random_record(rng, L, d);
    r.label = k % 2 ? dataio::Label::Hallucination : dataio::Label::Fact;
    const auto params = cgtest::jitter(detector::init_params(cgtest::small_config(d, 100 + k)), rng);
    const Tensor S = refine::compute_sensitivity(r, params, SensitivityTarget::TrueLabel);
    const std::size_t target = dataio::class_index(r.label);
    Tensor oracle(L, L);
    const double eps = 1e-6;
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        Tensor up = r.attention, down = r.attention;
        up(i, j) += eps;
        down(i, j) -= eps;
        const double g = (pass1_loss(r.hidden, up, target, params) - pass1_loss(r.hidden, down, target, params)) / (2 * eps);
        oracle(i, j) = std::abs(r.attention(i, j) * g);
      }
    double worst = 0.0;
    for (std::size_t i = 0; i < S.size(); ++i)
      worst = std::max(worst, std::abs(S[i] - oracle[i]) / std::max(std::abs(oracle[i]), 1e-6));
    EXPECT_LE(worst, 1e-4) << "record " << k << " L=" << L;
  }
}

TEST(Sensitivity, NonNegativeAndZeroAboveDiagonal) {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 10; ++k) {
    const auto r = cgtest::random_record(rng, 6, 3);
    const auto params = detector::init_params(cgtest::small_config(3, k));
    const Tensor S = refine::compute_sensitivity(r, params, SensitivityTarget::Predicted);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_GE(S(i, j), 0.0);
        if (j > i) {
          EXPECT_EQ(S(i, j), 0.0);
        }
      }
  }
}

TEST(Sensitivity, ZeroAttentionGivesZeroSensitivity) {
  std::mt19937_64 rng(9);
  auto r = cgtest::random_record(rng, 4, 3);
  r.attention(3, 1) = 0.0;
  r.attention(2, 0) = 0.0;
  const auto params = detector::init_params(cgtest::small_config(3));
  const Tensor S = refine::compute_sensitivity(r, params, SensitivityTarget::Hallucination);
  EXPECT_EQ(S(3, 1), 0.0);
  EXPECT_EQ(S(2, 0), 0.0);
}

TEST(Sensitivity, ZeroGatWeightsGiveZeroSensitivity) {
  std::mt19937_64 rng(10);
  for (std::size_t L : {1, 4}) {
    const auto r = cgtest::random_record(rng, L, 3);
    auto params = detector::init_params(cgtest::small_config(3));
    for (auto& layer : params.gat)
      for (auto& w : layer.head_w) w = Tensor(w.rows(), w.cols());
    const Tensor S = refine::compute_sensitivity(r, params, SensitivityTarget::Hallucination);
    EXPECT_EQ(S, Tensor(L, L));
  }
}

TEST(Sensitivity, IgnoresValuesAboveTheDiagonal) {
  std::mt19937_64 rng(11);
  const auto r = cgtest::random_record(rng, 5, 3);
  const auto params = cgtest::jitter(detector::init_params(cgtest::small_config(3)), rng);
  Tensor junk = r.attention;
  junk(0, 3) = 0.7;
  junk(2, 4) = 0.2;
  const Tensor a = refine::compute_sensitivity(r.hidden, r.attention, r.label, params, SensitivityTarget::Hallucination);
  const Tensor b = refine::compute_sensitivity(r.hidden, junk, r.label, params, SensitivityTarget::Hallucination);
  EXPECT_EQ(a, b);
}

TEST(Sensitivity, UnknownLabelWithTrueLabelTargetThrows) {
  std::mt19937_64 rng(12);
  auto r = cgtest::random_record(rng, 3, 3);
  r.label = dataio::Label::Unknown;
  const auto params = detector::init_params(cgtest::small_config(3));
  EXPECT_THROW(refine::compute_sensitivity(r, params, SensitivityTarget::TrueLabel), ConfigError);
  EXPECT_NO_THROW(refine::compute_sensitivity(r, params, SensitivityTarget::Predicted));
}

TEST(Sensitivity, ShapeMismatchThrows) {
  const auto params = detector::init_params(cgtest::small_config(3));
  EXPECT_THROW(refine::compute_sensitivity(Tensor(3, 3), Tensor(2, 2), dataio::Label::Fact, params,
                                           SensitivityTarget::TrueLabel),
               ShapeError);
}

TEST(RandomSensitivity, DeterministicPerSampleAndInUnitInterval) {
  const Tensor a = refine::random_sensitivity(5, "s1", 4);
  EXPECT_EQ(a, refine::random_sensitivity(5, "s1", 4));
  EXPECT_NE(a, refine::random_sensitivity(5, "s2", 4));
  EXPECT_NE(a, refine::random_sensitivity(6, "s1", 4));
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}
