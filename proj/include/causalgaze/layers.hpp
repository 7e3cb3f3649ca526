#pragma once

// Detector building blocks on a tape: projection, residual GAT layer over
// refined edges, max+mean pooling, classifier head, composite loss.

#include <random>
#include <string>
#include <vector>

#include "causalgaze/engine.hpp"
#include "causalgaze/error.hpp"
#include "causalgaze/params.hpp"
#include "causalgaze/rng.hpp"
#include "causalgaze/tensor.hpp"

namespace causalgaze::detector {

using engine::Tape;
using engine::Var;

/// Inverted-dropout masks (entries 0 or 1/(1-p)) for each hidden layer.
struct DropoutMasks {
  Tensor proj;
  std::vector<Tensor> gat;
};

inline DropoutMasks sample_dropout_masks(Rng& rng, std::size_t L, const DetectorConfig& cfg) {
  std::bernoulli_distribution keep(1.0 - cfg.dropout);
  const double scale = 1.0 / (1.0 - cfg.dropout);
  auto draw = [&](std::size_t cols) {
    Tensor m(L, cols);
    for (auto& v : m.data()) v = keep(rng) ? scale : 0.0;
    return m;
  };
  DropoutMasks masks;
  masks.proj = draw(cfg.proj_dim);
  for (std::size_t w : cfg.gat_dims) masks.gat.push_back(draw(w));
  return masks;
}

/// relu(H proj_w + proj_b), then dropout when a mask is given.
inline Var project(Tape& t, Var H, const BoundParams& p, const Tensor* mask = nullptr) {
  if (H.cols() != p.proj_w.rows()) {
    throw ShapeError("project: hidden states have " + std::to_string(H.cols()) + " columns, projection expects " +
                     std::to_string(p.proj_w.rows()));
  }
  Var h = t.relu(t.add(t.matmul(H, p.proj_w), t.broadcast_rows(p.proj_b, H.rows())));
  if (mask != nullptr) h = t.dropout(h, t.constant(*mask));
  return h;
}

/// h_i' = relu(shortcut(h_i) + concat_h sum_{j<=i} Ar_ij (W^h)^T h_j), then dropout.
/// Every head shares the refined edge weights as its aggregation coefficients.
inline Var gat_layer(Tape& t, Var h_in, Var refined, const BoundGat& layer, const Tensor* mask = nullptr) {
  const std::size_t L = h_in.rows();
  if (refined.rows() != L || refined.cols() != L) {
    throw ShapeError("gat_layer: refined adjacency " + refined.value().shape_string() + " for " + std::to_string(L) +
                     " nodes");
  }
  if (layer.w.rows() != h_in.cols()) {
    throw ShapeError("gat_layer: weights expect width " + std::to_string(layer.w.rows()) + ", input has " +
                     std::to_string(h_in.cols()));
  }
  const Var message = t.matmul(refined, t.matmul(h_in, layer.w));
  Var shortcut;
  if (layer.shortcut.valid()) {
    shortcut = t.matmul(h_in, layer.shortcut);
  } else if (h_in.cols() == layer.w.cols()) {
    shortcut = h_in;
  } else {
    throw ShapeError("gat_layer: missing shortcut for " + std::to_string(h_in.cols()) + " -> " +
                     std::to_string(layer.w.cols()));
  }
  Var out = t.relu(t.add(shortcut, message));
  if (mask != nullptr) out = t.dropout(out, t.constant(*mask));
  return out;
}

/// [column max, column mean] over nodes.
inline Var pool(Tape& t, Var h) { return t.concat({t.max_rows(h), t.mean_rows(h)}); }

inline Var classify(Tape& t, Var pooled, const BoundParams& p) {
  Var x = pooled;
  if (p.hidden_w.valid()) x = t.relu(t.add(t.matmul(x, p.hidden_w), p.hidden_b));
  if (x.cols() != p.classifier_w.rows()) {
    throw ShapeError("classify: pooled width " + std::to_string(x.cols()) + ", classifier expects " +
                     std::to_string(p.classifier_w.rows()));
  }
  return t.add(t.matmul(x, p.classifier_w), p.classifier_b);
}

/// Node projection through pooling and classification over the given edges.
struct Encoded {
  Var pooled;
  Var logits;
};

inline Encoded encode(Tape& t, Var H, Var edges, const BoundParams& p, const DropoutMasks* masks = nullptr) {
  Var h = project(t, H, p, masks ? &masks->proj : nullptr);
  for (std::size_t k = 0; k < p.gat.size(); ++k) h = gat_layer(t, h, edges, p.gat[k], masks ? &masks->gat[k] : nullptr);
  Encoded e;
  e.pooled = pool(t, h);
  e.logits = classify(t, e.pooled, p);
  return e;
}

/// Cross-entropy against `label` plus lambda * ||S||_F^2.
inline Var loss(Tape& t, Var logits, std::size_t label, Var sensitivity, double lambda) {
  Var ce = t.softmax_cross_entropy(logits, label);
  if (!sensitivity.valid() || lambda == 0.0) return ce;
  return t.add(ce, t.scale(t.frobenius_sq(sensitivity), lambda));
}

// ---- value-level wrappers -----------------------------------------------------

inline Tensor project(const Tensor& H, const DetectorParams& params) {
  Tape t;
  const BoundParams p = bind(t, params, false);
  return project(t, t.constant(H), p).value();
}

inline Tensor gat_layer(const Tensor& h_in, const Tensor& refined, const GatLayerParams& layer) {
  Tape t;
  std::vector<Var> heads;
  for (const auto& w : layer.head_w) heads.push_back(t.constant(w));
  BoundGat g;
  g.w = heads.size() == 1 ? heads.front() : t.concat(heads);
  if (!layer.shortcut_w.empty()) g.shortcut = t.constant(layer.shortcut_w);
  return gat_layer(t, t.constant(h_in), t.constant(refined), g).value();
}

inline Tensor pool(const Tensor& h) {
  Tape t;
  return pool(t, t.constant(h)).value();
}

inline Tensor classify(const Tensor& pooled, const DetectorParams& params) {
  Tape t;
  const BoundParams p = bind(t, params, false);
  return classify(t, t.constant(pooled), p).value();
}

}  // namespace causalgaze::detector
