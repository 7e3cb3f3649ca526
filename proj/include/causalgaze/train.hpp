#pragma once

// Training loop: per-sample gradient accumulation, AdamW, per-epoch cosine
// warm restarts, early stopping on a validation monitor.

#include <algorithm>
#include <cstdlib>
#include <functional>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalgaze/dataio.hpp"
#include "causalgaze/detector.hpp"
#include "causalgaze/error.hpp"
#include "causalgaze/layers.hpp"
#include "causalgaze/metrics.hpp"
#include "causalgaze/optim.hpp"
#include "causalgaze/params.hpp"
#include "causalgaze/rng.hpp"

namespace causalgaze::train {

enum class Monitor : std::uint8_t { Auroc, F1 };

inline std::string_view to_string(Monitor m) { return m == Monitor::Auroc ? "auroc" : "f1"; }
inline Monitor parse_monitor(std::string_view s) {
  if (s == "auroc") return Monitor::Auroc;
  if (s == "f1") return Monitor::F1;
  throw ConfigError("unknown monitor '" + std::string(s) + "' (expected auroc or f1)");
}

struct TrainConfig {
  double lr0 = 1e-4;
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  std::size_t patience = 20;
  SchedulerConfig scheduler;
  AdamWConfig adamw;
  std::uint64_t seed = 0;
  Monitor monitor = Monitor::Auroc;
  /// Architecture, lambda, reg mode and ablation. input_dim is taken from the data.
  detector::DetectorConfig model;

  void check() const {
    if (!(lr0 > scheduler.eta_min) || scheduler.eta_min < 0.0) throw ConfigError("train: need lr0 > eta_min >= 0");
    if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
    if (scheduler.t_mult == 0 || scheduler.t0 == 0) throw ConfigError("train: T0 and Tmult must be >= 1");
    if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0 && adamw.beta2 >= 0.0 && adamw.beta2 < 1.0)) {
      throw ConfigError("train: AdamW betas must lie in [0, 1)");
    }
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr0", c.lr0},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"patience", c.patience},
       {"scheduler", {{"T0", c.scheduler.t0}, {"Tmult", c.scheduler.t_mult}, {"eta_min", c.scheduler.eta_min}}},
       {"adamw",
        {{"beta1", c.adamw.beta1}, {"beta2", c.adamw.beta2}, {"eps", c.adamw.eps}, {"weight_decay", c.adamw.weight_decay}}},
       {"seed", c.seed},
       {"monitor", to_string(c.monitor)},
       {"model", c.model}};
}

/// Worker count: CAUSALGAZE_THREADS when set, else the hardware concurrency.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("CAUSALGAZE_THREADS"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != nullptr && *end == '\0' && v >= 1) return static_cast<std::size_t>(v);
    throw ConfigError("CAUSALGAZE_THREADS must be a positive integer, got '" + std::string(env) + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs f(i) for i in [0, n) on up to `threads` workers. Each index is handled
/// exactly once; callers store results by index so reduction order is fixed.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& f) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) f(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct SampleGradient {
  double loss = 0.0;
  double p_hallucination = 0.5;
  std::vector<Tensor> grads;  // trainable tensors in declaration order
};

inline SampleGradient sample_gradient(const dataio::GraphRecord& r, const detector::DetectorParams& params,
                                      const detector::DropoutMasks* masks) {
  detector::ForwardOptions opt;
  opt.mode = detector::Mode::Train;
  opt.differentiable = true;
  opt.dropout = masks;
  auto out = detector::forward_full(r, params, opt);
  std::vector<engine::Var> wrt;
  for (const auto& v : out.params.all)
    if (v.requires_grad()) wrt.push_back(v);
  SampleGradient g;
  g.loss = out.loss.value()[0];
  g.p_hallucination = detector::prediction_from_logits(out.logits.value()).p_hallucination;
  g.grads = out.tape->backward(out.loss, wrt);
  return g;
}

struct Scores {
  std::vector<std::string> ids;
  std::vector<double> p_hallucination;
  std::vector<int> labels;
};

inline Scores score(const detector::DetectorParams& params, const std::vector<const dataio::GraphRecord*>& recs,
                    std::size_t threads = 0) {
  Scores s;
  s.ids.resize(recs.size());
  s.p_hallucination.resize(recs.size());
  s.labels.resize(recs.size());
  parallel_for(recs.size(), threads == 0 ? worker_threads() : threads, [&](std::size_t i) {
    s.ids[i] = recs[i]->sample_id;
    s.p_hallucination[i] = detector::predict(*recs[i], params).p_hallucination;
    s.labels[i] = dataio::is_known(recs[i]->label) ? static_cast<int>(dataio::class_index(recs[i]->label)) : -1;
  });
  return s;
}

inline Metrics evaluate(const detector::DetectorParams& params, const std::vector<const dataio::GraphRecord*>& recs,
                        std::size_t threads = 0) {
  if (recs.empty()) throw ConfigError("evaluate: empty split");
  for (const auto* r : recs)
    if (!dataio::is_known(r->label)) throw ConfigError("evaluate: sample '" + r->sample_id + "' has no label");
  const Scores s = score(params, recs, threads);
  return compute_metrics(s.p_hallucination, s.labels);
}

inline Metrics evaluate(const detector::DetectorParams& params, const dataio::Dataset& ds, dataio::Split split,
                        std::size_t threads = 0) {
  const auto recs = ds.in_split(split);
  if (recs.empty()) throw ConfigError("evaluate: split '" + std::string(dataio::split_name(split)) + "' is empty");
  return evaluate(params, recs, threads);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  Metrics train;  // from the training forward passes (dropout active)
  Metrics val;
  bool improved = false;
};

struct TrainResult {
  detector::DetectorParams params;  // best validation monitor
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_monitor = 0.0;
  bool stopped_early = false;
};

inline double monitor_value(Monitor m, const Metrics& x) { return m == Monitor::Auroc ? x.auroc : x.f1; }

/// Fisher-Yates with explicit uniform draws, independent of the standard library's shuffle.
inline void seeded_shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(v[i - 1], v[pick(rng)]);
  }
}

inline TrainResult train(const dataio::Dataset& ds, const TrainConfig& cfg_in,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}, std::size_t threads = 0) {
  TrainConfig cfg = cfg_in;
  cfg.check();
  const auto train_recs = ds.in_split(dataio::Split::Train);
  const auto val_recs = ds.in_split(dataio::Split::Val);
  if (train_recs.empty()) throw ConfigError("train: train split is empty");
  if (val_recs.empty()) throw ConfigError("train: val split is empty");
  for (const auto* list : {&train_recs, &val_recs})
    for (const auto* r : *list)
      if (!dataio::is_known(r->label)) throw ConfigError("train: sample '" + r->sample_id + "' has an unknown label");
  const std::size_t d = train_recs.front()->dim();
  for (const auto* list : {&train_recs, &val_recs})
    for (const auto* r : *list)
      if (r->dim() != d) throw ConfigError("train: mixed feature dimensions in dataset");
  if (threads == 0) threads = worker_threads();

  cfg.model.input_dim = d;
  cfg.model.seed = cfg.seed;
  detector::DetectorParams params = detector::init_params(cfg.model);
  AdamWState opt_state;
  Rng shuffle_rng(derive_seed(cfg.seed, {hash_string("shuffle")}));

  TrainResult result;
  result.params = params;
  bool have_best = false;
  std::size_t stale = 0;
  std::vector<std::size_t> order(train_recs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_warm_restart_lr(epoch, cfg.lr0, cfg.scheduler);
    seeded_shuffle(order, shuffle_rng);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    std::vector<double> train_p(order.size());
    std::vector<int> train_y(order.size());
    double loss_sum = 0.0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<SampleGradient> per(n);
      parallel_for(n, threads, [&](std::size_t k) {
        const std::size_t pos = start + k;
        const auto& r = *train_recs[order[pos]];
        std::optional<detector::DropoutMasks> masks;
        if (cfg.model.dropout > 0.0) {
          Rng drop_rng(derive_seed(cfg.seed, {hash_string("dropout"), epoch, pos}));
          masks = detector::sample_dropout_masks(drop_rng, r.length(), cfg.model);
        }
        per[k] = sample_gradient(r, params, masks ? &*masks : nullptr);
      });
      std::vector<Tensor> mean = std::move(per[0].grads);
      for (std::size_t k = 1; k < n; ++k)
        for (std::size_t t = 0; t < mean.size(); ++t)
          for (std::size_t i = 0; i < mean[t].size(); ++i) mean[t][i] += per[k].grads[t][i];
      const double inv = 1.0 / static_cast<double>(n);
      for (auto& g : mean)
        for (auto& v : g.data()) v *= inv;
      for (std::size_t k = 0; k < n; ++k) {
        loss_sum += per[k].loss;
        train_p[start + k] = per[k].p_hallucination;
        train_y[start + k] = static_cast<int>(dataio::class_index(train_recs[order[start + k]]->label));
      }

      std::vector<Tensor*> trainable;
      std::vector<std::string> names;
      params.for_each([&](const std::string& name, Tensor& t, bool tr) {
        if (tr) {
          trainable.push_back(&t);
          names.push_back(name);
        }
      });
      adamw_step(trainable, mean, names, opt_state, lr, cfg.adamw);
    }

    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train = compute_metrics(train_p, train_y);
    rec.val = evaluate(params, val_recs, threads);
    const double m = monitor_value(cfg.monitor, rec.val);
    if (!have_best || m > result.best_monitor) {
      have_best = true;
      result.best_monitor = m;
      result.best_epoch = epoch;
      result.params = params;
      rec.improved = true;
      stale = 0;
    } else {
      ++stale;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (stale >= cfg.patience) {
      result.stopped_early = epoch + 1 < cfg.epochs;
      break;
    }
  }
  return result;
}

}  // namespace causalgaze::train
