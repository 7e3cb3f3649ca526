#pragma once

// Node saliency ||dL/dH_i||_2 and thresholded causal subgraphs, with DOT and
// JSON exports whose bytes depend only on the report.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalgaze/dataio.hpp"
#include "causalgaze/detector.hpp"
#include "causalgaze/error.hpp"
#include "causalgaze/params.hpp"
#include "causalgaze/refine.hpp"

namespace causalgaze::interpret {

/// Which graph the saliency loss is read from.
enum class SaliencyGraph : std::uint8_t { Refined, Bypass };

inline SaliencyGraph parse_saliency_graph(std::string_view s) {
  if (s == "refined") return SaliencyGraph::Refined;
  if (s == "bypass") return SaliencyGraph::Bypass;
  throw ConfigError("unknown saliency graph '" + std::string(s) + "' (expected refined or bypass)");
}

inline constexpr double kDefaultNodeQuantile = 0.2;
inline constexpr double kDefaultEdgeFloor = 1e-3;

/// Row norms of d CE / d H. On the refined graph the gate's sensitivity input
/// is held at its computed value.
inline std::vector<double> node_saliency(const dataio::GraphRecord& r, const detector::DetectorParams& params,
                                         SensitivityTarget target, SaliencyGraph graph = SaliencyGraph::Refined) {
  Tensor grad;
  if (graph == SaliencyGraph::Refined) {
    detector::ForwardOptions opt;
    opt.target_rule = target;
    auto out = detector::forward_full(r, params, opt);
    grad = out.tape->backward(out.ce, std::span<const engine::Var>(&out.hidden, 1)).front();
  } else {
    engine::Tape t;
    const auto p = detector::bind(t, params, false);
    const engine::Var H = t.leaf(r.hidden, "H", true);
    const engine::Var A = t.leaf(r.attention, "A", true);
    auto pass = refine::sensitivity_pass(t, H, A, t.constant(refine::causal_mask(r.length())), p, target, r.label,
                                         false);
    grad = t.backward(pass.loss, std::span<const engine::Var>(&H, 1)).front();
  }
  std::vector<double> scores(grad.rows());
  for (std::size_t i = 0; i < grad.rows(); ++i) {
    double s = 0.0;
    for (double v : grad.row(i)) s += v * v;
    scores[i] = std::sqrt(s);
  }
  return scores;
}

struct Edge {
  std::size_t src = 0;  // attended-to token j
  std::size_t dst = 0;  // attending token i
  double weight = 0.0;  // refined edge weight
  bool operator==(const Edge&) const = default;
};

struct SaliencyReport {
  std::string sample_id;
  std::vector<double> node_scores;
  std::vector<std::size_t> kept_nodes;
  std::vector<Edge> kept_edges;
  detector::Prediction prediction;
  double node_quantile = kDefaultNodeQuantile;
  double edge_floor = kDefaultEdgeFloor;
  double saliency_threshold = 0.0;
};

/// Smallest score among the ceil(q * L) largest; every node at or above it is kept.
inline double saliency_threshold(const std::vector<double>& scores, double node_quantile) {
  if (scores.empty()) return 0.0;
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double raw = node_quantile * static_cast<double>(scores.size());
  std::size_t keep = static_cast<std::size_t>(std::ceil(raw - 1e-12));
  keep = std::clamp<std::size_t>(keep, 1, scores.size());
  return sorted[keep - 1];
}

/// Keeps nodes at or above the (1 - node_quantile) quantile of saliency and
/// refined edges of weight >= edge_floor (and > 0) between kept nodes.
inline SaliencyReport subgraph_from(std::string sample_id, std::vector<double> scores, const Tensor& refined,
                                    detector::Prediction prediction, double node_quantile, double edge_floor) {
  if (!(node_quantile > 0.0 && node_quantile <= 1.0)) throw ConfigError("node_quantile must lie in (0, 1]");
  if (!(edge_floor >= 0.0)) throw ConfigError("edge_floor must be >= 0");
  const std::size_t L = scores.size();
  if (refined.rows() != L || refined.cols() != L) {
    throw ShapeError("causal_subgraph: " + std::to_string(L) + " node scores vs refined " + refined.shape_string());
  }
  SaliencyReport rep;
  rep.sample_id = std::move(sample_id);
  rep.prediction = prediction;
  rep.node_quantile = node_quantile;
  rep.edge_floor = edge_floor;
  rep.saliency_threshold = saliency_threshold(scores, node_quantile);
  std::vector<char> kept(L, 0);
  for (std::size_t i = 0; i < L; ++i) {
    if (scores[i] >= rep.saliency_threshold) {
      kept[i] = 1;
      rep.kept_nodes.push_back(i);
    }
  }
  for (std::size_t j = 0; j < L; ++j)
    for (std::size_t i = j; i < L; ++i) {
      const double w = refined(i, j);
      if (kept[i] && kept[j] && w > 0.0 && w >= edge_floor) rep.kept_edges.push_back({j, i, w});
    }
  rep.node_scores = std::move(scores);
  return rep;
}

inline SaliencyReport causal_subgraph(const dataio::GraphRecord& r, const detector::DetectorParams& params,
                                      double node_quantile = kDefaultNodeQuantile,
                                      double edge_floor = kDefaultEdgeFloor,
                                      std::optional<SensitivityTarget> target = std::nullopt,
                                      SaliencyGraph graph = SaliencyGraph::Refined) {
  const SensitivityTarget rule = target.value_or(params.config.inference_target);
  detector::ForwardOptions opt;
  opt.target_rule = rule;
  const auto out = detector::forward_full(r, params, opt);
  return subgraph_from(r.sample_id, node_saliency(r, params, rule, graph), out.refined.value(),
                       detector::prediction_from_logits(out.logits.value()), node_quantile, edge_floor);
}

// ---- export -------------------------------------------------------------------

/// Shortest decimal that reads back to the value rounded to 9 significant digits.
inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline double round9(double v) { return std::stod(format_number(v)); }

inline void check_tokens(const SaliencyReport& rep, const std::vector<std::string>& tokens) {
  if (tokens.size() != rep.node_scores.size()) {
    throw ShapeError("token list length mismatch: " + std::to_string(tokens.size()) + " tokens for " +
                     std::to_string(rep.node_scores.size()) + " nodes");
  }
}

inline std::string dot_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out.push_back(c);
  }
  return out;
}

inline std::string export_dot(const SaliencyReport& rep, const std::vector<std::string>& tokens) {
  check_tokens(rep, tokens);
  std::string s = "// causal subgraph of " + dot_escape(rep.sample_id) +
                  ": p_hallucination=" + format_number(rep.prediction.p_hallucination) +
                  " label=" + std::to_string(rep.prediction.label) +
                  " node_quantile=" + format_number(rep.node_quantile) +
                  " edge_floor=" + format_number(rep.edge_floor) + "\n";
  if (rep.kept_nodes.empty()) return s + "digraph causal { }\n";
  s += "digraph causal {\n";
  for (std::size_t i : rep.kept_nodes) {
    s += "  n" + std::to_string(i) + " [label=\"" + std::to_string(i) + ":" + dot_escape(tokens[i]) +
         "\", tooltip=\"saliency=" + format_number(rep.node_scores[i]) + "\"];\n";
  }
  std::vector<Edge> edges = rep.kept_edges;
  std::sort(edges.begin(), edges.end(),
            [](const Edge& a, const Edge& b) { return a.src != b.src ? a.src < b.src : a.dst < b.dst; });
  for (const Edge& e : edges) {
    s += "  n" + std::to_string(e.src) + " -> n" + std::to_string(e.dst) + " [weight=" + format_number(e.weight) +
         ", label=\"" + format_number(e.weight) + "\"];\n";
  }
  return s + "}\n";
}

inline nlohmann::ordered_json report_json(const SaliencyReport& rep, const std::vector<std::string>& tokens) {
  check_tokens(rep, tokens);
  nlohmann::ordered_json j;
  j["sample_id"] = rep.sample_id;
  j["prediction"] = {{"p_hallucination", round9(rep.prediction.p_hallucination)}, {"label", rep.prediction.label}};
  j["thresholds"] = {{"node_quantile", round9(rep.node_quantile)},
                     {"edge_floor", round9(rep.edge_floor)},
                     {"saliency_threshold", round9(rep.saliency_threshold)}};
  j["node_scores"] = nlohmann::ordered_json::array();
  for (double v : rep.node_scores) j["node_scores"].push_back(round9(v));
  j["nodes"] = nlohmann::ordered_json::array();
  for (std::size_t i : rep.kept_nodes) {
    j["nodes"].push_back({{"index", i}, {"token", tokens[i]}, {"saliency", round9(rep.node_scores[i])}});
  }
  std::vector<Edge> edges = rep.kept_edges;
  std::sort(edges.begin(), edges.end(),
            [](const Edge& a, const Edge& b) { return a.src != b.src ? a.src < b.src : a.dst < b.dst; });
  j["edges"] = nlohmann::ordered_json::array();
  for (const Edge& e : edges) j["edges"].push_back({{"src", e.src}, {"dst", e.dst}, {"weight", round9(e.weight)}});
  return j;
}

inline std::string export_json(const SaliencyReport& rep, const std::vector<std::string>& tokens) {
  return report_json(rep, tokens).dump(2) + "\n";
}

/// Inverse of export_json (values come back at 9 significant digits).
inline SaliencyReport parse_report_json(std::string_view text) {
  SaliencyReport rep;
  try {
    const auto j = nlohmann::json::parse(text);
    rep.sample_id = j.value("sample_id", std::string());
    rep.prediction.p_hallucination = j.at("prediction").at("p_hallucination").get<double>();
    rep.prediction.label = j.at("prediction").at("label").get<int>();
    rep.node_quantile = j.at("thresholds").at("node_quantile").get<double>();
    rep.edge_floor = j.at("thresholds").at("edge_floor").get<double>();
    rep.saliency_threshold = j.at("thresholds").at("saliency_threshold").get<double>();
    rep.node_scores = j.at("node_scores").get<std::vector<double>>();
    for (const auto& n : j.at("nodes")) rep.kept_nodes.push_back(n.at("index").get<std::size_t>());
    for (const auto& e : j.at("edges")) {
      rep.kept_edges.push_back({e.at("src").get<std::size_t>(), e.at("dst").get<std::size_t>(),
                                e.at("weight").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("saliency report: ") + e.what());
  }
  return rep;
}

}  // namespace causalgaze::interpret
