#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "causalgaze/error.hpp"

namespace causalgaze::train {

/// Mann-Whitney AUROC: fraction of (positive, negative) pairs where the
/// positive scores higher, ties counted 0.5. Returns 0.5 when a class is empty.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ConfigError("auroc: " + std::to_string(scores.size()) + " scores for " +
                      std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of positive ranks with midranks over tie groups, in doubled units to stay integral.
  std::uint64_t n_pos = 0;
  std::uint64_t rank_sum_x2 = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const std::uint64_t mid_x2 = static_cast<std::uint64_t>(i + j + 2);  // 2 * average 1-based rank
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]] == 1) {
        ++n_pos;
        rank_sum_x2 += mid_x2;
      }
    }
    i = j + 1;
  }
  const std::uint64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return 0.5;
  const double u_x2 = static_cast<double>(rank_sum_x2) - static_cast<double>(n_pos * (n_pos + 1));
  return u_x2 / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// F1 with hallucination (1) as the positive class; 0 when precision + recall = 0.
inline double f1(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) {
    throw ConfigError("f1: " + std::to_string(predicted.size()) + " predictions for " +
                      std::to_string(labels.size()) + " labels");
  }
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predicted[i] == 1 && labels[i] == 1) ++tp;
    else if (predicted[i] == 1) ++fp;
    else if (labels[i] == 1) ++fn;
  }
  if (tp == 0) return 0.0;
  const double precision = tp / (tp + fp);
  const double recall = tp / (tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

inline double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) throw ConfigError("accuracy: length mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

struct Metrics {
  double auroc = 0.5;
  double f1 = 0.0;
  double accuracy = 0.0;
  std::size_t n = 0;
};

/// Metrics for hallucination probabilities, thresholded at 0.5 (p >= 0.5 is positive).
inline Metrics compute_metrics(std::span<const double> p_hallucination, std::span<const int> labels) {
  if (labels.empty()) throw ConfigError("metrics need at least one sample");
  std::vector<int> pred(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) pred[i] = p_hallucination[i] >= 0.5 ? 1 : 0;
  return {auroc(p_hallucination, labels), f1(pred, labels), accuracy(pred, labels), labels.size()};
}

}  // namespace causalgaze::train
