#pragma once

// Two-pass forward: sensitivity on bypass edges, then the gated, refined graph
// through projection, GAT layers, pooling and the classifier.

#include <cmath>
#include <memory>
#include <optional>
#include <string_view>

#include "causalgaze/dataio.hpp"
#include "causalgaze/engine.hpp"
#include "causalgaze/error.hpp"
#include "causalgaze/layers.hpp"
#include "causalgaze/params.hpp"
#include "causalgaze/refine.hpp"
#include "causalgaze/tensor.hpp"

namespace causalgaze::detector {

enum class Mode : std::uint8_t { Train, Infer };

struct ForwardOptions {
  Mode mode = Mode::Infer;
  /// Dropout masks, honoured in train mode only.
  const DropoutMasks* dropout = nullptr;
  /// Parameter leaves require gradients.
  bool differentiable = false;
  /// Replaces the sensitivity value the gate sees (the regularizer still uses the computed S).
  const Tensor* gate_sensitivity = nullptr;
  /// Forces the class index both losses are taken against.
  std::optional<std::size_t> target;
  /// Loss-target rule in infer mode; defaults to the config's inference target.
  std::optional<SensitivityTarget> target_rule;
};

struct ForwardOutput {
  std::unique_ptr<Tape> tape;
  BoundParams params;
  Var hidden;     // leaf, L x d
  Var attention;  // leaf, L x L
  Var mask;
  Var pass1_logits;  // invalid when the ablation skips the gradient pass
  Var sensitivity;   // invalid for mlp-a
  Var gate;
  Var refined;
  Var pooled;
  Var logits;
  Var ce;
  Var reg;  // ||S||_F^2 without lambda, invalid without S
  Var loss;
  std::size_t target = 0;
  std::size_t pass1_target = 0;
};

inline bool uses_second_order(const DetectorConfig& cfg, const ForwardOptions& opt) {
  return opt.mode == Mode::Train && opt.differentiable && cfg.reg_mode == RegMode::SecondOrder &&
         cfg.ablation == Ablation::None && cfg.lambda > 0.0;
}

inline ForwardOutput forward(const Tensor& H, const Tensor& A, dataio::Label label, std::string_view sample_id,
                             const DetectorParams& params, const ForwardOptions& opt = {}) {
  const DetectorConfig& cfg = params.config;
  const std::size_t L = A.rows();
  if (L == 0 || A.cols() != L || H.rows() != L) {
    throw ShapeError("forward: hidden " + H.shape_string() + " vs attention " + A.shape_string());
  }
  if (H.cols() != cfg.input_dim) {
    throw ShapeError("forward: record has d=" + std::to_string(H.cols()) + ", detector expects d=" +
                     std::to_string(cfg.input_dim));
  }
  const bool train = opt.mode == Mode::Train;
  const SensitivityTarget target_rule =
      train ? SensitivityTarget::TrueLabel : opt.target_rule.value_or(cfg.inference_target);

  ForwardOutput out;
  out.tape = std::make_unique<Tape>();
  Tape& t = *out.tape;
  out.params = bind(t, params, opt.differentiable);
  const BoundParams& p = out.params;
  out.hidden = t.leaf(H, "H", true);
  out.attention = t.leaf(A, "A", true);
  out.mask = t.constant(refine::causal_mask(L));

  switch (cfg.ablation) {
    case Ablation::None: {
      auto pass = refine::sensitivity_pass(t, out.hidden, out.attention, out.mask, p, target_rule, label,
                                           uses_second_order(cfg, opt), opt.target);
      out.pass1_logits = pass.logits;
      out.pass1_target = pass.target;
      out.sensitivity = pass.sensitivity;
      break;
    }
    case Ablation::WithoutGradient: out.sensitivity = t.constant(Tensor(L, L, 1.0)); break;
    case Ablation::RandomGradient:
      out.sensitivity = t.constant(refine::random_sensitivity(cfg.seed, sample_id, L));
      break;
    case Ablation::MlpA: break;
  }

  Var gate_input;
  if (out.sensitivity.valid()) {
    if (opt.gate_sensitivity != nullptr) {
      if (!opt.gate_sensitivity->same_shape(A)) {
        throw ShapeError("forward: gate sensitivity override " + opt.gate_sensitivity->shape_string());
      }
      gate_input = t.constant(*opt.gate_sensitivity);
    } else {
      gate_input = t.detach(out.sensitivity);
    }
  }
  out.gate = refine::gate(t, out.attention, gate_input, p.gate);
  out.refined = refine::refine_edges(t, out.attention, out.gate, out.mask);

  const Encoded e = encode(t, out.hidden, out.refined, p, train ? opt.dropout : nullptr);
  out.pooled = e.pooled;
  out.logits = e.logits;
  out.target = opt.target ? *opt.target : refine::resolve_target(target_rule, label, out.logits.value());
  out.ce = t.softmax_cross_entropy(out.logits, out.target);
  if (out.sensitivity.valid()) out.reg = t.frobenius_sq(out.sensitivity);
  // Stand-in sensitivities of the ablations are constants; only the gradient-derived S is penalized.
  out.loss = cfg.ablation == Ablation::None ? t.add(out.ce, t.scale(out.reg, cfg.lambda)) : out.ce;
  return out;
}

inline ForwardOutput forward_full(const dataio::GraphRecord& r, const DetectorParams& params,
                                  const ForwardOptions& opt = {}) {
  return forward(r.hidden, r.attention, r.label, r.sample_id, params, opt);
}

struct Prediction {
  double p_hallucination = 0.5;
  int label = 1;
};

/// softmax(logits)[1], thresholded at 0.5 (inclusive).
inline Prediction prediction_from_logits(const Tensor& logits) {
  const double p = 1.0 / (1.0 + std::exp(logits(0, 0) - logits(0, 1)));
  return {p, p >= 0.5 ? 1 : 0};
}

inline Prediction predict(const dataio::GraphRecord& r, const DetectorParams& params) {
  return prediction_from_logits(forward_full(r, params).logits.value());
}

}  // namespace causalgaze::detector
