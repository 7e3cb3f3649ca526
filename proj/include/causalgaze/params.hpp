#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalgaze/engine.hpp"
#include "causalgaze/error.hpp"
#include "causalgaze/rng.hpp"
#include "causalgaze/tensor.hpp"

namespace causalgaze {

enum class RegMode : std::uint8_t { SecondOrder, Detached };
enum class Ablation : std::uint8_t { None, WithoutGradient, RandomGradient, MlpA };
/// Which class the sensitivity/saliency loss is measured against.
enum class SensitivityTarget : std::uint8_t { TrueLabel, Predicted, Hallucination };

inline std::string_view to_string(RegMode m) { return m == RegMode::SecondOrder ? "second-order" : "detached"; }
inline std::string_view to_string(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::WithoutGradient: return "wo-gradient";
    case Ablation::RandomGradient: return "random-gradient";
    case Ablation::MlpA: return "mlp-a";
  }
  return "?";
}
inline std::string_view to_string(SensitivityTarget t) {
  switch (t) {
    case SensitivityTarget::TrueLabel: return "true-label";
    case SensitivityTarget::Predicted: return "predicted";
    case SensitivityTarget::Hallucination: return "hallucination";
  }
  return "?";
}

inline RegMode parse_reg_mode(std::string_view s) {
  if (s == "second-order" || s == "second_order") return RegMode::SecondOrder;
  if (s == "detached") return RegMode::Detached;
  throw ConfigError("unknown reg mode '" + std::string(s) + "'");
}
inline Ablation parse_ablation(std::string_view s) {
  if (s == "none") return Ablation::None;
  if (s == "wo-gradient" || s == "w/o-gradient") return Ablation::WithoutGradient;
  if (s == "random-gradient") return Ablation::RandomGradient;
  if (s == "mlp-a") return Ablation::MlpA;
  throw ConfigError("unknown ablation '" + std::string(s) + "'");
}
inline SensitivityTarget parse_target(std::string_view s) {
  if (s == "true-label") return SensitivityTarget::TrueLabel;
  if (s == "predicted") return SensitivityTarget::Predicted;
  if (s == "hallucination") return SensitivityTarget::Hallucination;
  throw ConfigError("unknown sensitivity target '" + std::string(s) + "'");
}

namespace detector {

/// Architecture and objective settings. Widths default to
/// d -> 128 (projection) -> 64 (GAT) -> 64 (GAT) -> pooled 128 -> 2.
struct DetectorConfig {
  std::size_t input_dim = 0;
  std::size_t proj_dim = 128;
  std::vector<std::size_t> gat_dims = {64, 64};
  std::size_t heads = 4;
  std::size_t gate_hidden = 16;
  std::size_t classifier_hidden = 0;  // 0: single affine layer
  double dropout = 0.2;
  double lambda = 0.02;
  RegMode reg_mode = RegMode::SecondOrder;
  Ablation ablation = Ablation::None;
  bool freeze_gate_scale = false;
  SensitivityTarget inference_target = SensitivityTarget::Predicted;
  std::uint64_t seed = 0;

  std::size_t gate_inputs() const { return ablation == Ablation::MlpA ? 1 : 2; }
  std::size_t pooled_dim() const { return 2 * (gat_dims.empty() ? proj_dim : gat_dims.back()); }

  void check() const {
    if (input_dim == 0) throw ConfigError("detector: input_dim must be >= 1");
    if (proj_dim == 0 || gate_hidden == 0) throw ConfigError("detector: widths must be >= 1");
    if (heads == 0) throw ConfigError("detector: heads must be >= 1");
    for (std::size_t w : gat_dims)
      if (w == 0 || w % heads != 0) throw ConfigError("detector: GAT width " + std::to_string(w) + " not divisible by heads");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("detector: dropout must be in [0,1)");
    if (!(lambda >= 0.0)) throw ConfigError("detector: lambda must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const DetectorConfig& c) {
  j = {{"input_dim", c.input_dim},
       {"proj_dim", c.proj_dim},
       {"gat_dims", c.gat_dims},
       {"heads", c.heads},
       {"gate_hidden", c.gate_hidden},
       {"classifier_hidden", c.classifier_hidden},
       {"dropout", c.dropout},
       {"lambda", c.lambda},
       {"reg_mode", to_string(c.reg_mode)},
       {"ablation", to_string(c.ablation)},
       {"freeze_gate_scale", c.freeze_gate_scale},
       {"inference_target", to_string(c.inference_target)},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DetectorConfig& c) {
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.proj_dim = j.at("proj_dim").get<std::size_t>();
  c.gat_dims = j.at("gat_dims").get<std::vector<std::size_t>>();
  c.heads = j.at("heads").get<std::size_t>();
  c.gate_hidden = j.at("gate_hidden").get<std::size_t>();
  c.classifier_hidden = j.value("classifier_hidden", std::size_t{0});
  c.dropout = j.at("dropout").get<double>();
  c.lambda = j.at("lambda").get<double>();
  c.reg_mode = parse_reg_mode(j.at("reg_mode").get<std::string>());
  c.ablation = parse_ablation(j.at("ablation").get<std::string>());
  c.freeze_gate_scale = j.at("freeze_gate_scale").get<bool>();
  c.inference_target = parse_target(j.value("inference_target", std::string("predicted")));
  c.seed = j.at("seed").get<std::uint64_t>();
}

}  // namespace detector

namespace refine {

/// Per-edge gate g = a * sigmoid(w2^T relu(w1^T x + b1) + b2) + b, x = (A_ij, S_ij).
struct GateParams {
  Tensor w1;  // inputs x g_hidden
  Tensor b1;  // 1 x g_hidden
  Tensor w2;  // g_hidden x 1
  Tensor b2;  // 1 x 1
  Tensor a = Tensor::scalar(1.0);
  Tensor b = Tensor::scalar(0.0);
};

}  // namespace refine

namespace detector {

struct GatLayerParams {
  std::vector<Tensor> head_w;  // heads x (in_dim x out_dim/heads)
  Tensor shortcut_w;           // in_dim x out_dim, empty when in_dim == out_dim
};

struct DetectorParams {
  DetectorConfig config;
  Tensor proj_w, proj_b;
  refine::GateParams gate;
  std::vector<GatLayerParams> gat;
  Tensor hidden_w, hidden_b;  // optional classifier hidden layer
  Tensor classifier_w, classifier_b;

  /// Visits every tensor in declaration order as f(name, tensor, trainable).
  template <class Self, class F>
  static void visit(Self& p, F&& f) {
    f("proj_w", p.proj_w, true);
    f("proj_b", p.proj_b, true);
    f("gate.w1", p.gate.w1, true);
    f("gate.b1", p.gate.b1, true);
    f("gate.w2", p.gate.w2, true);
    f("gate.b2", p.gate.b2, true);
    f("gate.a", p.gate.a, !p.config.freeze_gate_scale);
    f("gate.b", p.gate.b, !p.config.freeze_gate_scale);
    for (std::size_t k = 0; k < p.gat.size(); ++k) {
      const std::string pre = "gat" + std::to_string(k) + ".";
      for (std::size_t h = 0; h < p.gat[k].head_w.size(); ++h) f(pre + "w" + std::to_string(h), p.gat[k].head_w[h], true);
      if (!p.gat[k].shortcut_w.empty()) f(pre + "shortcut", p.gat[k].shortcut_w, true);
    }
    if (p.config.classifier_hidden > 0) {
      f("classifier.hidden_w", p.hidden_w, true);
      f("classifier.hidden_b", p.hidden_b, true);
    }
    f("classifier_w", p.classifier_w, true);
    f("classifier_b", p.classifier_b, true);
  }
  template <class F>
  void for_each(F&& f) { visit(*this, std::forward<F>(f)); }
  template <class F>
  void for_each(F&& f) const { visit(*this, std::forward<F>(f)); }

  std::size_t tensor_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor&, bool) { ++n; });
    return n;
  }
};

/// Glorot-uniform weights, zero biases, gate scale a = 1 and shift b = 0.
inline DetectorParams init_params(const DetectorConfig& cfg) {
  cfg.check();
  DetectorParams p;
  p.config = cfg;
  Rng rng(derive_seed(cfg.seed, {hash_string("init")}));
  auto glorot = [&](std::size_t fan_in, std::size_t fan_out) {
    const double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> u(-lim, lim);
    Tensor t(fan_in, fan_out);
    for (auto& v : t.data()) v = u(rng);
    return t;
  };
  p.proj_w = glorot(cfg.input_dim, cfg.proj_dim);
  p.proj_b = Tensor(1, cfg.proj_dim);
  p.gate.w1 = glorot(cfg.gate_inputs(), cfg.gate_hidden);
  p.gate.b1 = Tensor(1, cfg.gate_hidden);
  p.gate.w2 = glorot(cfg.gate_hidden, 1);
  p.gate.b2 = Tensor(1, 1);
  p.gate.a = Tensor::scalar(1.0);
  p.gate.b = Tensor::scalar(0.0);
  std::size_t in = cfg.proj_dim;
  for (std::size_t out : cfg.gat_dims) {
    GatLayerParams layer;
    for (std::size_t h = 0; h < cfg.heads; ++h) layer.head_w.push_back(glorot(in, out / cfg.heads));
    if (in != out) layer.shortcut_w = glorot(in, out);
    p.gat.push_back(std::move(layer));
    in = out;
  }
  std::size_t pooled = cfg.pooled_dim();
  if (cfg.classifier_hidden > 0) {
    p.hidden_w = glorot(pooled, cfg.classifier_hidden);
    p.hidden_b = Tensor(1, cfg.classifier_hidden);
    pooled = cfg.classifier_hidden;
  }
  p.classifier_w = glorot(pooled, 2);
  p.classifier_b = Tensor(1, 2);
  return p;
}

struct BoundGat {
  engine::Var w;  // heads concatenated column-wise
  engine::Var shortcut;
};

/// Parameters placed on a tape as leaves, in declaration order in `all`.
struct BoundGate {
  engine::Var w1, b1, w2, b2, a, b;
};

struct BoundParams {
  engine::Var proj_w, proj_b;
  BoundGate gate;
  std::vector<BoundGat> gat;
  engine::Var hidden_w, hidden_b;
  engine::Var classifier_w, classifier_b;
  std::vector<engine::Var> all;
  std::vector<std::string> names;
};

inline BoundParams bind(engine::Tape& tape, const DetectorParams& p, bool requires_grad) {
  BoundParams b;
  auto leaf = [&](const std::string& name, const Tensor& t, bool trainable) {
    engine::Var v = tape.leaf(t, name, requires_grad && trainable);
    b.all.push_back(v);
    b.names.push_back(name);
    return v;
  };
  const bool scale_trainable = !p.config.freeze_gate_scale;
  b.proj_w = leaf("proj_w", p.proj_w, true);
  b.proj_b = leaf("proj_b", p.proj_b, true);
  b.gate.w1 = leaf("gate.w1", p.gate.w1, true);
  b.gate.b1 = leaf("gate.b1", p.gate.b1, true);
  b.gate.w2 = leaf("gate.w2", p.gate.w2, true);
  b.gate.b2 = leaf("gate.b2", p.gate.b2, true);
  b.gate.a = leaf("gate.a", p.gate.a, scale_trainable);
  b.gate.b = leaf("gate.b", p.gate.b, scale_trainable);
  for (std::size_t k = 0; k < p.gat.size(); ++k) {
    const std::string pre = "gat" + std::to_string(k) + ".";
    std::vector<engine::Var> heads;
    for (std::size_t h = 0; h < p.gat[k].head_w.size(); ++h)
      heads.push_back(leaf(pre + "w" + std::to_string(h), p.gat[k].head_w[h], true));
    BoundGat g;
    g.w = heads.size() == 1 ? heads.front() : tape.concat(heads);
    if (!p.gat[k].shortcut_w.empty()) g.shortcut = leaf(pre + "shortcut", p.gat[k].shortcut_w, true);
    b.gat.push_back(g);
  }
  if (p.config.classifier_hidden > 0) {
    b.hidden_w = leaf("classifier.hidden_w", p.hidden_w, true);
    b.hidden_b = leaf("classifier.hidden_b", p.hidden_b, true);
  }
  b.classifier_w = leaf("classifier_w", p.classifier_w, true);
  b.classifier_b = leaf("classifier_b", p.classifier_b, true);
  return b;
}

}  // namespace detector
}  // namespace causalgaze
