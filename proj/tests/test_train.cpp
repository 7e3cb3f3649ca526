#include <gtest/gtest.h>

#include "causalgaze/checkpoint.hpp"
#include "causalgaze/synth.hpp"
#include "causalgaze/train.hpp"
#include "test_util.hpp"

using namespace causalgaze;

namespace {

dataio::Dataset tiny_dataset(std::size_t n = 30, std::uint64_t seed = 5) {
  synth::SynthConfig s;
  s.n_samples = n;
  s.l_min = 4;
  s.l_max = 6;
  s.d = 6;
  s.n_spurious = 2;
  s.seed = seed;
  return synth::generate_dataset(s);
}

train::TrainConfig tiny_train(std::size_t epochs = 3) {
  train::TrainConfig c;
  c.lr0 = 1e-2;
  c.epochs = epochs;
  c.batch_size = 4;
  c.seed = 3;
  c.model = cgtest::small_config(6);
  return c;
}

std::vector<Tensor*> trainable(detector::DetectorParams& p, std::vector<std::string>& names) {
  std::vector<Tensor*> out;
  p.for_each([&](const std::string& n, Tensor& t, bool tr) {
    if (tr) {
      out.push_back(&t);
      names.push_back(n);
    }
  });
  return out;
}

}  // namespace

TEST(Train, TwoRunsGiveByteIdenticalCheckpoints) {
  const auto ds = tiny_dataset();
  const auto a = train::train(ds, tiny_train(), {}, 1);
  const auto b = train::train(ds, tiny_train(), {}, 1);
  EXPECT_EQ(checkpoint::encode(a.params), checkpoint::encode(b.params));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t e = 0; e < a.history.size(); ++e) EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
}

TEST(Train, ThreadCountDoesNotChangeResult) {
  const auto ds = tiny_dataset();
  const auto a = train::train(ds, tiny_train(2), {}, 1);
  const auto b = train::train(ds, tiny_train(2), {}, 3);
  EXPECT_EQ(checkpoint::encode(a.params), checkpoint::encode(b.params));
}

TEST(Train, OneEpochMatchesManualBatchAveraging) {
  // 12 training records in batches of 5: two full batches and a partial batch of 2.
  const auto ds = tiny_dataset();
  auto cfg = tiny_train(1);
  cfg.batch_size = 5;
  cfg.model.dropout = 0.0;
  const auto recs = ds.in_split(dataio::Split::Train);
  ASSERT_EQ(recs.size(), 12u);

  auto model = cfg.model;
  model.input_dim = 6;
  model.seed = cfg.seed;
  auto params = detector::init_params(model);
  Rng shuffle_rng(derive_seed(cfg.seed, {hash_string("shuffle")}));
  std::vector<std::size_t> order(recs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  train::seeded_shuffle(order, shuffle_rng);
  train::AdamWState state;
  const double lr = train::cosine_warm_restart_lr(0, cfg.lr0, cfg.scheduler);
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += 5) {
    const std::size_t n = std::min<std::size_t>(5, order.size() - start);
    std::vector<Tensor> mean;
    for (std::size_t k = 0; k < n; ++k) {
      const auto g = train::sample_gradient(*recs[order[start + k]], params, nullptr);
      loss_sum += g.loss;
      if (mean.empty()) {
        mean = g.grads;
      } else {
        for (std::size_t t = 0; t < mean.size(); ++t)
          for (std::size_t i = 0; i < mean[t].size(); ++i) mean[t][i] += g.grads[t][i];
      }
    }
    for (auto& m : mean)
      for (auto& v : m.data()) v *= 1.0 / static_cast<double>(n);
    std::vector<std::string> names;
    train::adamw_step(trainable(params, names), mean, names, state, lr, cfg.adamw);
  }

  const auto got = train::train(ds, cfg, {}, 1);
  ASSERT_EQ(got.history.size(), 1u);
  EXPECT_NEAR(got.history[0].train_loss, loss_sum / 12.0, 1e-12);
  std::vector<std::string> n1, n2;
  auto gp = got.params;
  const auto a = trainable(gp, n1);
  const auto b = trainable(params, n2);
  for (std::size_t t = 0; t < a.size(); ++t) EXPECT_LE(max_abs_diff(*a[t], *b[t]), 1e-12) << n1[t];
}

TEST(Train, BestEpochHoldsBestMonitorAndPatienceStops) {
  const auto ds = tiny_dataset(40);
  auto cfg = tiny_train(12);
  cfg.patience = 2;
  std::size_t callbacks = 0;
  const auto res = train::train(ds, cfg, [&](const train::EpochRecord&) { ++callbacks; }, 1);
  EXPECT_EQ(callbacks, res.history.size());
  double best = -1.0;
  std::size_t best_epoch = 0, stale = 0;
  for (const auto& e : res.history) {
    EXPECT_EQ(e.lr, train::cosine_warm_restart_lr(e.epoch, cfg.lr0, cfg.scheduler));
    if (e.val.auroc > best) {
      best = e.val.auroc;
      best_epoch = e.epoch;
      stale = 0;
      EXPECT_TRUE(e.improved);
    } else {
      ++stale;
      EXPECT_FALSE(e.improved);
    }
  }
  EXPECT_EQ(res.best_epoch, best_epoch);
  EXPECT_EQ(res.best_monitor, best);
  if (res.stopped_early) {
    EXPECT_EQ(stale, cfg.patience);
  } else {
    EXPECT_EQ(res.history.size(), cfg.epochs);
  }
  EXPECT_EQ(train::evaluate(res.params, ds, dataio::Split::Val, 1).auroc, res.best_monitor);
}

TEST(Train, PatienceOneStopsAtFirstNonImprovement) {
  const auto ds = tiny_dataset(40);
  auto cfg = tiny_train(30);
  cfg.patience = 1;
  const auto res = train::train(ds, cfg, {}, 1);
  ASSERT_GE(res.history.size(), 1u);
  for (std::size_t e = 0; e + 1 < res.history.size(); ++e) EXPECT_TRUE(res.history[e].improved);
  if (res.history.size() < cfg.epochs) {
    EXPECT_FALSE(res.history.back().improved);
    EXPECT_TRUE(res.stopped_early);
  }
}

TEST(Train, F1MonitorSelectsOnF1) {
  const auto ds = tiny_dataset();
  auto cfg = tiny_train(4);
  cfg.monitor = train::Monitor::F1;
  const auto res = train::train(ds, cfg, {}, 1);
  EXPECT_EQ(res.best_monitor, res.history[res.best_epoch].val.f1);
}

TEST(Train, SingleClassValidationGivesChanceAuroc) {
  auto ds = tiny_dataset();
  for (auto& r : ds.records) r.label = dataio::Label::Fact;
  const auto res = train::train(ds, tiny_train(2), {}, 1);
  for (const auto& e : res.history) EXPECT_EQ(e.val.auroc, 0.5);
}

TEST(Evaluate, ConstantLogitsGiveChanceAuroc) {
  const auto ds = tiny_dataset();
  auto cfg = cgtest::small_config(6);
  auto p = detector::init_params(cfg);
  p.classifier_w = Tensor(p.classifier_w.rows(), 2);
  const auto m = train::evaluate(p, ds, dataio::Split::Test, 1);
  EXPECT_EQ(m.auroc, 0.5);
  const auto s = train::score(p, ds.in_split(dataio::Split::Test), 1);
  for (double v : s.p_hallucination) EXPECT_EQ(v, 0.5);
}

TEST(Evaluate, MatchesRecomputationFromScores) {
  const auto ds = tiny_dataset();
  std::mt19937_64 rng(4);
  const auto p = cgtest::jitter(detector::init_params(cgtest::small_config(6)), rng);
  const auto recs = ds.in_split(dataio::Split::Test);
  const auto s = train::score(p, recs, 1);
  const auto m = train::evaluate(p, recs, 1);
  std::vector<int> pred;
  for (double v : s.p_hallucination) pred.push_back(v >= 0.5);
  EXPECT_EQ(m.auroc, train::auroc(s.p_hallucination, s.labels));
  EXPECT_EQ(m.f1, train::f1(pred, s.labels));
  EXPECT_EQ(m.accuracy, train::accuracy(pred, s.labels));
  EXPECT_EQ(m.n, recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    EXPECT_EQ(s.ids[i], recs[i]->sample_id);
    EXPECT_EQ(s.p_hallucination[i], detector::predict(*recs[i], p).p_hallucination);
  }
}

TEST(Train, RejectsEmptySplitsAndUnknownLabels) {
  auto ds = tiny_dataset();
  auto cfg = tiny_train(1);
  auto no_val = ds;
  for (auto& [id, s] : no_val.splits)
    if (s == dataio::Split::Val) s = dataio::Split::Test;
  EXPECT_THROW(train::train(no_val, cfg, {}, 1), ConfigError);
  auto unknown = ds;
  for (auto& r : unknown.records)
    if (unknown.splits.at(r.sample_id) == dataio::Split::Train) {
      r.label = dataio::Label::Unknown;
      break;
    }
  EXPECT_THROW(train::train(unknown, cfg, {}, 1), ConfigError);
  EXPECT_THROW(train::evaluate(detector::init_params(cgtest::small_config(6)), std::vector<const dataio::GraphRecord*>{}),
               ConfigError);
  cfg.batch_size = 0;
  EXPECT_THROW(train::train(ds, cfg, {}, 1), ConfigError);
}

TEST(Shuffle, IsAPermutationAndSeeded) {
  std::vector<std::size_t> a(50), b(50);
  for (std::size_t i = 0; i < 50; ++i) a[i] = b[i] = i;
  Rng r1(7), r2(7);
  train::seeded_shuffle(a, r1);
  train::seeded_shuffle(b, r2);
  EXPECT_EQ(a, b);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Checkpoint, RoundTripIsExact) {
  std::mt19937_64 rng(8);
  auto c = cgtest::small_config(5);
  c.ablation = Ablation::RandomGradient;
  c.classifier_hidden = 3;
  const auto p = cgtest::jitter(detector::init_params(c), rng);
  const nlohmann::json meta = {{"best_epoch", 4}, {"note", "x"}};
  const std::string bytes = checkpoint::encode(p, meta);
  const auto ck = checkpoint::decode(bytes);
  EXPECT_EQ(ck.meta, meta);
  EXPECT_EQ(checkpoint::encode(ck.params, ck.meta), bytes);
  EXPECT_EQ(ck.params.config.ablation, Ablation::RandomGradient);
  EXPECT_EQ(ck.params.proj_w, p.proj_w);
}

TEST(Checkpoint, CorruptInputIsFormatError) {
  const auto p = detector::init_params(cgtest::small_config(3));
  const std::string good = checkpoint::encode(p);
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW(checkpoint::decode(bad), FormatError);
  bad = good;
  bad[4] = 9;
  EXPECT_THROW(checkpoint::decode(bad), FormatError);
  EXPECT_THROW(checkpoint::decode(good + "z"), FormatError);
  EXPECT_THROW(checkpoint::decode(good.substr(0, good.size() - 3)), FormatError);
  // A tensor name swapped for another of the same length.
  bad = good;
  const auto pos = bad.find("proj_w");
  ASSERT_NE(pos, std::string::npos);
  bad.replace(pos, 6, "proj_v");
  EXPECT_THROW(checkpoint::decode(bad), FormatError);
  // Header promises a larger architecture than the payload holds.
  auto c = cgtest::small_config(3);
  c.proj_dim = 9;
  const std::string other = checkpoint::encode(detector::init_params(c));
  const std::string header_big = other.substr(0, other.find("proj_w") - 6);
  EXPECT_THROW(checkpoint::decode(header_big + good.substr(good.find("proj_w") - 6)), FormatError);
}
