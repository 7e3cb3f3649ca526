#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "causalgaze/metrics.hpp"

using namespace causalgaze;
using train::accuracy;
using train::auroc;
using train::f1;

namespace {

double brute_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  return pairs == 0.0 ? 0.5 : wins / pairs;
}

struct Set {
  std::vector<double> scores;
  std::vector<int> labels;
};

Set random_set(std::mt19937_64& rng, std::size_t n, bool coarse) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Set s;
  for (std::size_t i = 0; i < n; ++i) {
    const double v = u(rng);
    s.scores.push_back(coarse ? std::floor(v * 5.0) / 5.0 : v);
    s.labels.push_back(u(rng) < 0.5 ? 1 : 0);
  }
  return s;
}

}  // namespace

TEST(Auroc, Examples) {
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{0.9, 0.1}, std::vector<int>{0, 1}), 0.0);
  EXPECT_EQ(auroc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{0, 1, 1, 0}), 0.5);
  EXPECT_EQ(auroc(std::vector<double>{0.2, 0.7}, std::vector<int>{1, 1}), 0.5);
  EXPECT_EQ(auroc(std::vector<double>{0.2}, std::vector<int>{0}), 0.5);
}

TEST(Auroc, LengthMismatchThrows) {
  EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1}), ConfigError);
}

TEST(Auroc, MatchesBruteForcePairCount) {
  std::mt19937_64 rng(2024);
  for (int k = 0; k < 100; ++k) {
    const Set s = random_set(rng, 1 + rng() % 80, k % 2 == 0);
    EXPECT_NEAR(auroc(s.scores, s.labels), brute_auroc(s.scores, s.labels), 1e-12) << k;
  }
}

TEST(Auroc, FiftyRandomScores) {
  std::mt19937_64 rng(50);
  const Set s = random_set(rng, 50, false);
  EXPECT_NEAR(auroc(s.scores, s.labels), brute_auroc(s.scores, s.labels), 1e-12);
}

TEST(Auroc, InvariantUnderIncreasingTransforms) {
  std::mt19937_64 rng(7);
  for (int k = 0; k < 30; ++k) {
    Set s = random_set(rng, 40, k % 2 == 0);
    const double base = auroc(s.scores, s.labels);
    std::vector<double> e(s.scores.size()), a(s.scores.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
      e[i] = std::exp(s.scores[i]);
      a[i] = 3.0 * s.scores[i] - 2.0;
    }
    EXPECT_NEAR(auroc(e, s.labels), base, 1e-12);
    EXPECT_NEAR(auroc(a, s.labels), base, 1e-12);
  }
}

TEST(Auroc, ComplementUnderLabelFlip) {
  std::mt19937_64 rng(8);
  for (int k = 0; k < 20; ++k) {
    Set s = random_set(rng, 30, true);
    std::vector<int> flipped(s.labels.size());
    for (std::size_t i = 0; i < flipped.size(); ++i) flipped[i] = 1 - s.labels[i];
    EXPECT_NEAR(auroc(s.scores, s.labels) + auroc(s.scores, flipped), 1.0, 1e-12);
  }
}

TEST(F1, Examples) {
  EXPECT_EQ(f1(std::vector<int>{1, 0, 1}, std::vector<int>{1, 0, 1}), 1.0);
  EXPECT_EQ(f1(std::vector<int>{0, 0, 0}, std::vector<int>{1, 0, 1}), 0.0);
  // TP=2, FP=1, FN=1
  EXPECT_NEAR(f1(std::vector<int>{1, 1, 1, 0}, std::vector<int>{1, 1, 0, 1}), 2.0 / 3.0, 1e-15);
  EXPECT_THROW(f1(std::vector<int>{1}, std::vector<int>{1, 0}), ConfigError);
}

TEST(F1, ExhaustiveConfusionGrid) {
  for (int tp = 0; tp <= 5; ++tp)
    for (int fp = 0; fp <= 5; ++fp)
      for (int fn = 0; fn <= 5; ++fn)
        for (int tn = 0; tn <= 5; ++tn) {
          std::vector<int> pred, lab;
          auto add = [&](int n, int p, int l) {
            for (int i = 0; i < n; ++i) {
              pred.push_back(p);
              lab.push_back(l);
            }
          };
          add(tp, 1, 1);
          add(fp, 1, 0);
          add(fn, 0, 1);
          add(tn, 0, 0);
          if (pred.empty()) continue;
          const double expected = tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
          ASSERT_NEAR(f1(pred, lab), expected, 1e-15) << tp << " " << fp << " " << fn << " " << tn;
          ASSERT_NEAR(accuracy(pred, lab), static_cast<double>(tp + tn) / static_cast<double>(pred.size()), 1e-15);
        }
}

TEST(Metrics, ThresholdAtHalfIsPositive) {
  const auto m = train::compute_metrics(std::vector<double>{0.5, 0.49, 0.9, 0.1}, std::vector<int>{1, 0, 1, 0});
  EXPECT_EQ(m.f1, 1.0);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.auroc, 1.0);
  EXPECT_EQ(m.n, 4u);
  EXPECT_THROW(train::compute_metrics(std::vector<double>{}, std::vector<int>{}), ConfigError);
}
