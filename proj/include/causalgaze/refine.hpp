#pragma once

// Edge sensitivity S = |A (.) dL/dA|, the per-edge gate, and refined edges.

#include <optional>
#include <random>
#include <string_view>

#include "causalgaze/dataio.hpp"
#include "causalgaze/engine.hpp"
#include "causalgaze/error.hpp"
#include "causalgaze/layers.hpp"
#include "causalgaze/params.hpp"
#include "causalgaze/rng.hpp"
#include "causalgaze/tensor.hpp"

namespace causalgaze::refine {

using engine::Tape;
using engine::Var;

/// mask[i][j] = 1 iff j <= i.
inline Tensor causal_mask(std::size_t L) {
  Tensor m(L, L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j <= i; ++j) m(i, j) = 1.0;
  return m;
}

/// Class index the loss is taken against. `logits` is the 1x2 output the
/// prediction-based targets look at; p >= 0.5 (z1 >= z0) counts as hallucination.
inline std::size_t resolve_target(SensitivityTarget target, dataio::Label label, const Tensor& logits) {
  switch (target) {
    case SensitivityTarget::TrueLabel:
      if (!dataio::is_known(label)) throw ConfigError("loss target is the true label, but the label is unknown");
      return dataio::class_index(label);
    case SensitivityTarget::Predicted: return logits(0, 1) >= logits(0, 0) ? 1 : 0;
    case SensitivityTarget::Hallucination: return 1;
  }
  return 1;
}

/// g = a * sigmoid(mlp(x)) + b per edge, x = (A_ij, S_ij), or x = A_ij when S is absent.
inline Var gate(Tape& t, Var A, Var S, const detector::BoundGate& g) {
  const std::size_t L = A.rows();
  const std::size_t E = L * L;
  if (S.valid() && (S.rows() != L || S.cols() != A.cols())) {
    throw ShapeError("gate: attention " + A.value().shape_string() + " vs sensitivity " + S.value().shape_string());
  }
  const Var x = S.valid() ? t.concat({t.reshape(A, E, 1), t.reshape(S, E, 1)}) : t.reshape(A, E, 1);
  if (x.cols() != g.w1.rows()) {
    throw ShapeError("gate: " + std::to_string(x.cols()) + " edge inputs, gate weights expect " +
                     std::to_string(g.w1.rows()));
  }
  const Var h = t.relu(t.add(t.matmul(x, g.w1), t.broadcast_rows(g.b1, E)));
  const Var o = t.add(t.matmul(h, g.w2), t.broadcast_scalar(g.b2, E, 1));
  const Var y = t.add(t.mul(t.sigmoid(o), t.broadcast_scalar(g.a, E, 1)), t.broadcast_scalar(g.b, E, 1));
  return t.reshape(y, L, L);
}

/// A (.) max(G, 0) (.) mask.
inline Var refine_edges(Tape& t, Var A, Var G, Var mask) { return t.mul(t.mul(A, t.clamp_min(G, 0.0)), mask); }

inline Tensor gate(const Tensor& A, const Tensor& S, const GateParams& gp) {
  Tape t;
  const detector::BoundGate g{t.constant(gp.w1), t.constant(gp.b1), t.constant(gp.w2),
                              t.constant(gp.b2), t.constant(gp.a),  t.constant(gp.b)};
  return gate(t, t.constant(A), S.empty() ? Var{} : t.constant(S), g).value();
}

inline Tensor refine_edges(const Tensor& A, const Tensor& gate_values) {
  if (!A.same_shape(gate_values) || A.rows() != A.cols()) {
    throw ShapeError("refine_edges: attention " + A.shape_string() + " vs gate " + gate_values.shape_string());
  }
  Tape t;
  return refine_edges(t, t.constant(A), t.constant(gate_values), t.constant(causal_mask(A.rows()))).value();
}

/// Stand-in sensitivity for the random-gradient ablation: uniform(0,1), fixed per (seed, sample).
inline Tensor random_sensitivity(std::uint64_t seed, std::string_view sample_id, std::size_t L) {
  Rng rng(derive_seed(seed, {hash_string("random-gradient"), hash_string(sample_id)}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor s(L, L);
  for (auto& v : s.data()) v = u(rng);
  return s;
}

/// Pass 1: the detector over bypass edges A (.) mask, its loss, dL/dA and S.
struct SensitivityPass {
  Var logits;
  Var loss;
  Var grad_attention;
  Var sensitivity;
  std::size_t target = 0;
};

/// `A` must be a differentiable leaf. With create_graph the gradient (and S)
/// stay differentiable with respect to every other leaf on the tape.
inline SensitivityPass sensitivity_pass(Tape& t, Var H, Var A, Var mask, const detector::BoundParams& p,
                                        SensitivityTarget target, dataio::Label label, bool create_graph,
                                        std::optional<std::size_t> target_override = std::nullopt) {
  SensitivityPass out;
  out.logits = detector::encode(t, H, t.mul(A, mask), p).logits;
  out.target = target_override ? *target_override : resolve_target(target, label, out.logits.value());
  out.loss = t.softmax_cross_entropy(out.logits, out.target);
  out.grad_attention = t.gradient(out.loss, {A}, create_graph)[0];
  out.sensitivity = t.abs(t.mul(A, out.grad_attention));
  return out;
}

/// S for one record under the given loss target.
inline Tensor compute_sensitivity(const Tensor& H, const Tensor& A, dataio::Label label,
                                  const detector::DetectorParams& params, SensitivityTarget target) {
  if (A.rows() != A.cols() || A.rows() != H.rows()) {
    throw ShapeError("compute_sensitivity: hidden " + H.shape_string() + " vs attention " + A.shape_string());
  }
  Tape t;
  const auto p = detector::bind(t, params, false);
  const Var Hv = t.constant(H);
  const Var Av = t.leaf(A, "A", true);
  return sensitivity_pass(t, Hv, Av, t.constant(causal_mask(A.rows())), p, target, label, false).sensitivity.value();
}

inline Tensor compute_sensitivity(const dataio::GraphRecord& r, const detector::DetectorParams& params,
                                  SensitivityTarget target) {
  return compute_sensitivity(r.hidden, r.attention, r.label, params, target);
}

}  // namespace causalgaze::refine
