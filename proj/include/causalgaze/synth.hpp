#pragma once

// Synthetic graph datasets with planted factual structure.
//
// Each record has a question prefix of ceil(L/2) tokens whose features are a
// per-record context vector plus N(0, noise_sigma^2 I). Clean attention rows
// are a causal softmax over N(0, 1) logits. Answer token i >= ceil(L/2) gets
//     h_i = sum_{j<i} C_ij h_j + signal_strength * u_class + N(0, noise_sigma^2 I)
// over the clean attention C, with u_fact, u_hall fixed orthonormal directions.
// Hallucinated records then receive n_spurious distinct (answer row, question
// column) logit boosts of 0.5: the stored attention shifts mass onto
// label-irrelevant question tokens that played no part in forming h_i.

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalgaze/dataio.hpp"
#include "causalgaze/error.hpp"
#include "causalgaze/metrics.hpp"
#include "causalgaze/rng.hpp"
#include "causalgaze/tensor.hpp"

namespace causalgaze::synth {

inline constexpr double kLogitSigma = 1.0;
inline constexpr double kSpuriousBoost = 0.5;

struct SynthConfig {
  std::size_t n_samples = 1000;
  std::size_t l_min = 8;
  std::size_t l_max = 16;
  std::size_t d = 32;
  double signal_strength = 2.0;
  std::size_t n_spurious = 3;
  double noise_sigma = 1.0;
  std::uint64_t seed = 42;
  // Split sizes as fractions of n_samples; the remainder is the test split.
  double train_fraction = 0.4;
  double val_fraction = 0.2;

  void check() const {
    if (n_samples == 0) throw ConfigError("synth: n_samples must be positive");
    if (l_min < 2) throw ConfigError("synth: L_range.min must be >= 2");
    if (l_max < l_min) throw ConfigError("synth: L_range.max < L_range.min");
    if (d < 2) throw ConfigError("synth: d must be >= 2 (two class directions)");
    if (!(signal_strength >= 0.0) || !std::isfinite(signal_strength)) throw ConfigError("synth: signal_strength must be >= 0");
    if (n_spurious >= l_min) throw ConfigError("synth: n_spurious must be < L_range.min");
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma)) throw ConfigError("synth: noise_sigma must be >= 0");
    if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1.0) {
      throw ConfigError("synth: split fractions must be non-negative and sum to at most 1");
    }
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"generator", "causalgaze-synth"},
       {"n_samples", c.n_samples},
       {"l_min", c.l_min},
       {"l_max", c.l_max},
       {"d", c.d},
       {"signal_strength", c.signal_strength},
       {"n_spurious", c.n_spurious},
       {"noise_sigma", c.noise_sigma},
       {"seed", c.seed},
       {"train_fraction", c.train_fraction},
       {"val_fraction", c.val_fraction}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.n_samples = j.at("n_samples").get<std::size_t>();
  c.l_min = j.at("l_min").get<std::size_t>();
  c.l_max = j.at("l_max").get<std::size_t>();
  c.d = j.at("d").get<std::size_t>();
  c.signal_strength = j.at("signal_strength").get<double>();
  c.n_spurious = j.at("n_spurious").get<std::size_t>();
  c.noise_sigma = j.at("noise_sigma").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.train_fraction = j.value("train_fraction", 0.4);
  c.val_fraction = j.value("val_fraction", 0.2);
}

/// u_fact (row 0) and u_hall (row 1): orthonormal, derived from the seed only.
inline Tensor class_directions(const SynthConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, {hash_string("directions")}));
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor u(2, cfg.d);
  for (auto& v : u.data()) v = normal(rng);
  auto normalize = [&](std::size_t r) {
    double s = 0.0;
    for (double v : u.row(r)) s += v * v;
    const double inv = 1.0 / std::sqrt(s);
    for (auto& v : u.row(r)) v *= inv;
  };
  normalize(0);
  double dot = 0.0;
  for (std::size_t k = 0; k < cfg.d; ++k) dot += u(0, k) * u(1, k);
  for (std::size_t k = 0; k < cfg.d; ++k) u(1, k) -= dot * u(0, k);
  normalize(1);
  return u;
}

inline std::size_t prefix_length(std::size_t L) { return (L + 1) / 2; }

/// A generated record before f32 quantization, with its planted structure.
struct PlantedRecord {
  dataio::GraphRecord record;
  std::size_t prefix = 0;
  std::vector<std::pair<std::size_t, std::size_t>> spurious;  // (answer row, question column)
  Tensor clean_attention;                                      // before the spurious boosts
};

inline std::string sample_name(std::size_t index) {
  std::string s = std::to_string(index);
  return "s" + std::string(s.size() < 5 ? 5 - s.size() : 0, '0') + s;
}

inline PlantedRecord plant_record(const SynthConfig& cfg, std::size_t index, const Tensor& directions) {
  Rng rng(derive_seed(cfg.seed, {hash_string("record"), index}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> length(cfg.l_min, cfg.l_max);

  PlantedRecord out;
  auto& r = out.record;
  const std::size_t L = length(rng);
  const std::size_t q = prefix_length(L);
  const std::size_t d = cfg.d;
  out.prefix = q;
  r.sample_id = sample_name(index);
  r.label = index % 2 == 0 ? dataio::Label::Fact : dataio::Label::Hallucination;
  r.meta = {"synthetic", 0};
  for (std::size_t i = 0; i < L; ++i) r.tokens.push_back("t" + std::to_string(i));

  std::vector<double> context(d);
  for (auto& v : context) v = normal(rng);

  Tensor logits(L, L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j <= i; ++j) logits(i, j) = kLogitSigma * normal(rng);

  auto softmax_rows = [&](const Tensor& z) {
    Tensor a(L, L);
    for (std::size_t i = 0; i < L; ++i) {
      double mx = z(i, 0);
      for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, z(i, j));
      double s = 0.0;
      for (std::size_t j = 0; j <= i; ++j) s += (a(i, j) = std::exp(z(i, j) - mx));
      for (std::size_t j = 0; j <= i; ++j) a(i, j) /= s;
    }
    return a;
  };
  out.clean_attention = softmax_rows(logits);

  if (r.label == dataio::Label::Hallucination && cfg.n_spurious > 0) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = q; i < L; ++i)
      for (std::size_t t = 0; t < q; ++t) pairs.emplace_back(i, t);
    // Partial Fisher-Yates with explicit draws keeps the choice independent of the library's shuffle.
    for (std::size_t k = 0; k < cfg.n_spurious; ++k) {
      std::uniform_int_distribution<std::size_t> pick(k, pairs.size() - 1);
      std::swap(pairs[k], pairs[pick(rng)]);
      out.spurious.push_back(pairs[k]);
      logits(pairs[k].first, pairs[k].second) += kSpuriousBoost;
    }
  }
  r.attention = out.spurious.empty() ? out.clean_attention : softmax_rows(logits);

  const std::size_t cls = dataio::class_index(r.label);
  r.hidden = Tensor(L, d);
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double noise = cfg.noise_sigma * normal(rng);
      if (i < q) {
        r.hidden(i, k) = context[k] + noise;
      } else {
        double mix = 0.0;
        for (std::size_t j = 0; j < i; ++j) mix += out.clean_attention(i, j) * r.hidden(j, k);
        r.hidden(i, k) = mix + cfg.signal_strength * directions(cls, k) + noise;
      }
    }
  }
  return out;
}

/// Assigns the first n_train records to train, the next n_val to val, the rest to test.
inline void assign_splits(dataio::Dataset& ds, std::size_t n_train, std::size_t n_val) {
  ds.splits.clear();
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto s = i < n_train ? dataio::Split::Train : (i < n_train + n_val ? dataio::Split::Val : dataio::Split::Test);
    ds.splits[ds.records[i].sample_id] = s;
  }
}

inline dataio::Dataset generate_dataset(const SynthConfig& cfg) {
  cfg.check();
  const Tensor dirs = class_directions(cfg);
  dataio::Dataset ds;
  ds.records.reserve(cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    dataio::GraphRecord r = std::move(plant_record(cfg, i, dirs).record);
    r.hidden = dataio::quantize_f32(std::move(r.hidden));
    r.attention = dataio::quantize_f32(std::move(r.attention));
    ds.records.push_back(std::move(r));
  }
  const auto n = static_cast<double>(cfg.n_samples);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * n));
  const auto n_val = std::min(cfg.n_samples - n_train, static_cast<std::size_t>(std::llround(cfg.val_fraction * n)));
  assign_splits(ds, n_train, n_val);
  ds.generator = cfg;
  return ds;
}

namespace detail {

inline double log_add(double a, double b) {
  if (a == -INFINITY) return b;
  if (b == -INFINITY) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

/// Calls f(subset) for every subset of {0..q-1} with at most k elements.
template <class F>
void for_each_subset(std::size_t q, std::size_t k, std::vector<std::size_t>& cur, std::size_t from, F&& f) {
  f(cur);
  if (cur.size() == k) return;
  for (std::size_t t = from; t < q; ++t) {
    cur.push_back(t);
    for_each_subset(q, k, cur, t + 1, f);
    cur.pop_back();
  }
}

}  // namespace detail

/// Exact log p(record | hallucinated) - log p(record | fact), marginalizing
/// uniformly over which n_spurious (answer row, question column) pairs were
/// boosted. The boosts shift the observed attention logits, and the features
/// of the boosted rows were formed from the attention with the boost removed.
inline double log_likelihood_ratio(const SynthConfig& cfg, const Tensor& directions, const dataio::GraphRecord& r) {
  const std::size_t L = r.length();
  const std::size_t q = prefix_length(L);
  const std::size_t k = cfg.n_spurious;
  const double var = std::max(cfg.noise_sigma * cfg.noise_sigma, 1e-24);
  const double var_logit = kLogitSigma * kLogitSigma;
  const double beta = kSpuriousBoost;
  const double s = cfg.signal_strength;
  const std::size_t d = r.dim();

  auto resid_sq = [&](std::size_t i, const std::vector<double>& w, std::size_t cls) {
    double out = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double v = r.hidden(i, c) - s * directions(cls, c);
      for (std::size_t j = 0; j < i; ++j) v -= w[j] * r.hidden(j, c);
      out += v * v;
    }
    return out;
  };

  // poly[m]: log of the summed likelihood ratio over boost patterns with m boosts so far.
  std::vector<double> poly(k + 1, -INFINITY);
  poly[0] = 0.0;
  for (std::size_t i = q; i < L; ++i) {
    const std::size_t n = i + 1;
    std::vector<double> w(n);
    double mean_log = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean_log += std::log(r.attention(i, j));
    mean_log /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) w[j] = r.attention(i, j);
    const double log_fact = -resid_sq(i, w, 0) / (2.0 * var);

    std::vector<double> row(std::min(q, k) + 1, -INFINITY);
    std::vector<std::size_t> cur;
    detail::for_each_subset(q, k, cur, 0, [&](const std::vector<std::size_t>& T) {
      const double m = static_cast<double>(T.size());
      double log_attn = -beta * beta * (m - m * m / static_cast<double>(n)) / (2.0 * var_logit);
      std::vector<double> clean(n);
      for (std::size_t j = 0; j < n; ++j) clean[j] = r.attention(i, j);
      for (std::size_t t : T) {
        log_attn += beta * (std::log(r.attention(i, t)) - mean_log) / var_logit;
        clean[t] *= std::exp(-beta);
      }
      const double z = std::accumulate(clean.begin(), clean.end(), 0.0);
      for (auto& v : clean) v /= z;
      row[T.size()] = detail::log_add(row[T.size()], log_attn - resid_sq(i, clean, 1) / (2.0 * var) - log_fact);
    });
    std::vector<double> next(k + 1, -INFINITY);
    for (std::size_t a = 0; a <= k; ++a)
      for (std::size_t b = 0; b < row.size() && a + b <= k; ++b)
        next[a + b] = detail::log_add(next[a + b], poly[a] + row[b]);
    poly = std::move(next);
  }
  const double n_pairs = static_cast<double>(q * (L - q));
  const double log_choose = std::lgamma(n_pairs + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
                            std::lgamma(n_pairs - static_cast<double>(k) + 1.0);
  return poly[k] - log_choose;
}

/// AUROC of the generative likelihood-ratio score: the Bayes-optimal ranking.
inline double bayes_separability(const dataio::Dataset& ds) {
  if (ds.generator.is_null() || ds.generator.value("generator", "") != "causalgaze-synth") {
    throw ConfigError("bayes_separability: dataset is not tagged with a synthetic generating config");
  }
  const SynthConfig cfg = ds.generator.get<SynthConfig>();
  const Tensor dirs = class_directions(cfg);
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& r : ds.records) {
    if (!dataio::is_known(r.label)) continue;
    scores.push_back(log_likelihood_ratio(cfg, dirs, r));
    labels.push_back(static_cast<int>(dataio::class_index(r.label)));
  }
  return train::auroc(scores, labels);
}

}  // namespace causalgaze::synth
