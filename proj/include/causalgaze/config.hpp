#pragma once

// Run configuration: one TOML file with [synth], [train], [detector],
// [interpret] and [paths] tables. Unknown keys are rejected. Command-line
// flags are applied on top by the caller.

#include <filesystem>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "causalgaze/error.hpp"
#include "causalgaze/interpret.hpp"
#include "causalgaze/synth.hpp"
#include "causalgaze/train.hpp"

namespace causalgaze::config {

struct InterpretConfig {
  double node_quantile = interpret::kDefaultNodeQuantile;
  double edge_floor = interpret::kDefaultEdgeFloor;
  interpret::SaliencyGraph graph = interpret::SaliencyGraph::Refined;
};

struct Paths {
  std::string data;
  std::string out;
  std::string checkpoint;
};

struct CliConfig {
  synth::SynthConfig synth;
  train::TrainConfig train;
  InterpretConfig interpret;
  Paths paths;
  std::size_t runs = 1;
  std::optional<std::uint32_t> layer;  // keep only records from this layer
};

inline void to_json(nlohmann::json& j, const CliConfig& c) {
  j = {{"synth", c.synth},
       {"train", c.train},
       {"interpret",
        {{"node_quantile", c.interpret.node_quantile},
         {"edge_floor", c.interpret.edge_floor},
         {"saliency_graph", c.interpret.graph == interpret::SaliencyGraph::Refined ? "refined" : "bypass"}}},
       {"paths", {{"data", c.paths.data}, {"out", c.paths.out}, {"checkpoint", c.paths.checkpoint}}},
       {"runs", c.runs},
       {"layer", c.layer ? nlohmann::json(*c.layer) : nlohmann::json(nullptr)}};
}

namespace detail {

class Table {
 public:
  Table(const toml::table* t, std::string name) : t_(t), name_(std::move(name)) {}

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (t_ == nullptr) return;
    const toml::node* n = t_->get(key);
    if (n == nullptr) return;
    if constexpr (std::is_same_v<T, bool>) {
      if (auto v = n->value<bool>()) return void(out = *v);
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (auto v = n->value<std::string>()) return void(out = *v);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (auto v = n->value<double>()) return void(out = *v);
    } else {
      if (auto v = n->value<std::int64_t>(); v && *v >= 0) return void(out = static_cast<T>(*v));
    }
    throw ConfigError("config: [" + name_ + "] " + key + " has the wrong type");
  }

  void get_list(const char* key, std::vector<std::size_t>& out) {
    seen_.insert(key);
    if (t_ == nullptr) return;
    const toml::node* n = t_->get(key);
    if (n == nullptr) return;
    const toml::array* arr = n->as_array();
    if (arr == nullptr) throw ConfigError("config: [" + name_ + "] " + key + " must be an array of integers");
    out.clear();
    for (const auto& e : *arr) {
      auto v = e.value<std::int64_t>();
      if (!v || *v <= 0) throw ConfigError("config: [" + name_ + "] " + key + " must hold positive integers");
      out.push_back(static_cast<std::size_t>(*v));
    }
  }

  void finish() const {
    if (t_ == nullptr) return;
    for (const auto& [k, v] : *t_) {
      if (!seen_.count(std::string(k.str()))) throw ConfigError("config: unknown key [" + name_ + "] " + std::string(k.str()));
    }
  }

 private:
  const toml::table* t_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Applies the values present in `text` on top of `c`.
inline void apply_toml(CliConfig& c, std::string_view text, const std::string& source = "config") {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    throw ConfigError(source + ": " + std::string(e.description()));
  }
  static const std::set<std::string> sections{"synth", "train", "detector", "interpret", "paths"};
  for (const auto& [k, v] : root) {
    if (!sections.count(std::string(k.str())) || !v.is_table()) {
      throw ConfigError(source + ": unknown section '" + std::string(k.str()) + "'");
    }
  }
  auto section = [&](const char* name) { return detail::Table(root[name].as_table(), name); };

  {
    auto t = section("synth");
    auto& s = c.synth;
    t.get("n_samples", s.n_samples);
    t.get("l_min", s.l_min);
    t.get("l_max", s.l_max);
    t.get("d", s.d);
    t.get("signal_strength", s.signal_strength);
    t.get("n_spurious", s.n_spurious);
    t.get("noise_sigma", s.noise_sigma);
    t.get("seed", s.seed);
    t.get("train_fraction", s.train_fraction);
    t.get("val_fraction", s.val_fraction);
    t.finish();
  }
  {
    auto t = section("train");
    auto& s = c.train;
    std::string monitor(train::to_string(s.monitor));
    t.get("lr0", s.lr0);
    t.get("epochs", s.epochs);
    t.get("batch_size", s.batch_size);
    t.get("patience", s.patience);
    t.get("T0", s.scheduler.t0);
    t.get("Tmult", s.scheduler.t_mult);
    t.get("eta_min", s.scheduler.eta_min);
    t.get("beta1", s.adamw.beta1);
    t.get("beta2", s.adamw.beta2);
    t.get("eps", s.adamw.eps);
    t.get("weight_decay", s.adamw.weight_decay);
    t.get("seed", s.seed);
    t.get("monitor", monitor);
    t.get("runs", c.runs);
    t.finish();
    s.monitor = train::parse_monitor(monitor);
  }
  {
    auto t = section("detector");
    auto& m = c.train.model;
    std::string reg(to_string(m.reg_mode)), abl(to_string(m.ablation)), target(to_string(m.inference_target));
    t.get("proj_dim", m.proj_dim);
    t.get_list("gat_dims", m.gat_dims);
    t.get("heads", m.heads);
    t.get("gate_hidden", m.gate_hidden);
    t.get("classifier_hidden", m.classifier_hidden);
    t.get("dropout", m.dropout);
    t.get("lambda", m.lambda);
    t.get("reg_mode", reg);
    t.get("ablation", abl);
    t.get("freeze_gate_scale", m.freeze_gate_scale);
    t.get("inference_target", target);
    t.finish();
    m.reg_mode = parse_reg_mode(reg);
    m.ablation = parse_ablation(abl);
    m.inference_target = parse_target(target);
  }
  {
    auto t = section("interpret");
    std::string graph = c.interpret.graph == interpret::SaliencyGraph::Refined ? "refined" : "bypass";
    t.get("node_quantile", c.interpret.node_quantile);
    t.get("edge_floor", c.interpret.edge_floor);
    t.get("saliency_graph", graph);
    t.finish();
    c.interpret.graph = interpret::parse_saliency_graph(graph);
  }
  {
    auto t = section("paths");
    t.get("data", c.paths.data);
    t.get("out", c.paths.out);
    t.get("checkpoint", c.paths.checkpoint);
    t.finish();
  }
}

inline void apply_toml_file(CliConfig& c, const std::filesystem::path& path) {
  apply_toml(c, dataio::detail::read_file(path), path.string());
}

}  // namespace causalgaze::config
