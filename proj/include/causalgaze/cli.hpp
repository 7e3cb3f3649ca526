#pragma once

// The causalgaze command line: synth, train, eval, explain, inspect, gradcheck.
// Results go to stdout and files, progress to stderr.
// Exit codes: 0 ok, 2 usage, 3 I/O or malformed input, 4 numerical failure,
// 5 verification failure.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "causalgaze/checkpoint.hpp"
#include "causalgaze/config.hpp"
#include "causalgaze/dataio.hpp"
#include "causalgaze/error.hpp"
#include "causalgaze/gradcheck.hpp"
#include "causalgaze/interpret.hpp"
#include "causalgaze/synth.hpp"
#include "causalgaze/train.hpp"

namespace causalgaze::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 2, kIo = 3, kNumeric = 4, kVerification = 5 };

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// FNV-1a of the manifest bytes, and of the manifest followed by every record file in listed order.
struct DatasetHash {
  std::string manifest;
  std::string content;
};

inline DatasetHash hash_dataset(const fs::path& manifest) {
  const std::string bytes = dataio::detail::read_file(manifest);
  std::string all = bytes;
  const auto j = nlohmann::json::parse(bytes);
  for (const auto& e : j.at("records")) all += dataio::detail::read_file(manifest.parent_path() / e.at("file").get<std::string>());
  return {hex64(hash_string(bytes)), hex64(hash_string(all))};
}

/// Child seed k of a multi-run; a single run uses the seed itself.
inline std::uint64_t run_seed(std::uint64_t seed, std::size_t k, std::size_t runs) {
  return runs <= 1 ? seed : derive_seed(seed, {hash_string("run"), k});
}

inline void filter_layer(dataio::Dataset& ds, std::optional<std::uint32_t> layer) {
  if (!layer) return;
  std::vector<dataio::GraphRecord> kept;
  for (auto& r : ds.records) {
    if (r.meta.layer_index == *layer) {
      kept.push_back(std::move(r));
    } else {
      ds.splits.erase(r.sample_id);
    }
  }
  ds.records = std::move(kept);
  if (ds.records.empty()) throw ConfigError("no records with layer_index " + std::to_string(*layer));
}

inline dataio::Dataset load_data(const std::string& path, std::optional<std::uint32_t> layer, std::ostream& err) {
  if (path.empty()) throw ConfigError("--data is required");
  dataio::Dataset ds = dataio::load_manifest(path);
  for (const auto& w : ds.warnings) err << "warning: " << w << "\n";
  filter_layer(ds, layer);
  return ds;
}

inline nlohmann::json metrics_json(const train::Metrics& m) {
  return {{"auroc", m.auroc}, {"f1", m.f1}, {"accuracy", m.accuracy}, {"n", m.n}};
}

inline double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1); 0 for a single value.
inline double stdev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Flag values; each one overrides the config file when given.
struct Flags {
  std::string config;
  std::optional<std::string> data, out, checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs, n, trials;
  std::optional<std::string> ablation, reg_mode, monitor, saliency_graph;
  std::optional<double> node_quantile, edge_floor;
  std::optional<std::uint32_t> layer;
  std::string split = "test";
  std::vector<std::string> positional;
};

inline config::CliConfig resolve(const Flags& f) {
  config::CliConfig c;
  if (!f.config.empty()) config::apply_toml_file(c, f.config);
  if (f.data) c.paths.data = *f.data;
  if (f.out) c.paths.out = *f.out;
  if (f.checkpoint) c.paths.checkpoint = *f.checkpoint;
  if (f.seed) c.synth.seed = c.train.seed = *f.seed;
  if (f.runs) c.runs = *f.runs;
  if (f.n) c.synth.n_samples = *f.n;
  if (f.ablation) c.train.model.ablation = parse_ablation(*f.ablation);
  if (f.reg_mode) c.train.model.reg_mode = parse_reg_mode(*f.reg_mode);
  if (f.monitor) c.train.monitor = train::parse_monitor(*f.monitor);
  if (f.node_quantile) c.interpret.node_quantile = *f.node_quantile;
  if (f.edge_floor) c.interpret.edge_floor = *f.edge_floor;
  if (f.saliency_graph) c.interpret.graph = interpret::parse_saliency_graph(*f.saliency_graph);
  if (f.layer) c.layer = *f.layer;
  return c;
}

inline int cmd_synth(const config::CliConfig& c, std::ostream& out, std::ostream& err) {
  if (c.paths.out.empty()) throw ConfigError("synth: --out is required");
  err << "generating " << c.synth.n_samples << " records (seed " << c.synth.seed << ")\n";
  const dataio::Dataset ds = synth::generate_dataset(c.synth);
  const fs::path manifest = dataio::save_dataset(ds, c.paths.out);
  const DatasetHash h = hash_dataset(manifest);
  nlohmann::json j;
  j["config"] = c;
  j["manifest"] = manifest.string();
  j["counts"] = {{"train", ds.count(dataio::Split::Train)},
                 {"val", ds.count(dataio::Split::Val)},
                 {"test", ds.count(dataio::Split::Test)}};
  j["bayes_separability"] = synth::bayes_separability(ds);
  j["manifest_hash"] = h.manifest;
  j["content_hash"] = h.content;
  out << j.dump(2) << "\n";
  return kOk;
}

inline int cmd_train(const config::CliConfig& c, std::ostream& out, std::ostream& err) {
  if (c.paths.out.empty()) throw ConfigError("train: --out is required");
  if (c.runs == 0) throw ConfigError("train: --runs must be >= 1");
  const dataio::Dataset ds = load_data(c.paths.data, c.layer, err);
  const bool have_test = ds.count(dataio::Split::Test) > 0;

  std::vector<double> aurocs, f1s;
  nlohmann::json runs = nlohmann::json::array();
  for (std::size_t k = 0; k < c.runs; ++k) {
    config::CliConfig rc = c;
    rc.train.seed = run_seed(c.train.seed, k, c.runs);
    const fs::path dir = c.runs == 1 ? fs::path(c.paths.out) : fs::path(c.paths.out) / ("run" + std::to_string(k));
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    // Paths stay out of the embedded config so identical runs give identical bytes.
    nlohmann::json resolved = rc;
    resolved.erase("paths");
    resolved["train"]["model"]["input_dim"] = ds.records.front().dim();

    std::string jsonl = nlohmann::json({{"config", resolved}}).dump() + "\n";
    err << "run " << k << ": seed " << rc.train.seed << "\n";
    const auto result = train::train(ds, rc.train, [&](const train::EpochRecord& e) {
      jsonl += nlohmann::json({{"epoch", e.epoch}, {"split", "train"}, {"auroc", e.train.auroc}, {"f1", e.train.f1},
                               {"accuracy", e.train.accuracy}, {"lr", e.lr}, {"loss", e.train_loss}})
                   .dump() +
               "\n";
      jsonl += nlohmann::json({{"epoch", e.epoch}, {"split", "val"}, {"auroc", e.val.auroc}, {"f1", e.val.f1},
                               {"accuracy", e.val.accuracy}, {"lr", e.lr}})
                   .dump() +
               "\n";
      err << "epoch " << e.epoch << " lr " << e.lr << " loss " << e.train_loss << " val auroc " << e.val.auroc
          << " f1 " << e.val.f1 << (e.improved ? " *" : "") << "\n";
    });
    nlohmann::json meta = resolved;
    meta["best_epoch"] = result.best_epoch;
    meta["best_monitor"] = result.best_monitor;
    const fs::path ck = dir / "checkpoint.cgzk";
    checkpoint::save(result.params, ck, meta);

    nlohmann::json run = {{"seed", rc.train.seed}, {"checkpoint", ck.string()}, {"best_epoch", result.best_epoch}};
    if (have_test) {
      const auto m = train::evaluate(result.params, ds, dataio::Split::Test);
      const auto& lr_epoch = result.history[result.best_epoch];
      jsonl += nlohmann::json({{"epoch", result.best_epoch}, {"split", "test"}, {"auroc", m.auroc}, {"f1", m.f1},
                               {"accuracy", m.accuracy}, {"lr", lr_epoch.lr}})
                   .dump() +
               "\n";
      run["test"] = metrics_json(m);
      aurocs.push_back(m.auroc);
      f1s.push_back(m.f1);
    }
    dataio::detail::write_file(dir / "metrics.jsonl", jsonl);
    runs.push_back(run);
  }

  nlohmann::json j;
  j["config"] = c;
  j["runs"] = runs;
  if (!aurocs.empty()) {
    j["test"] = {{"auroc_mean", mean(aurocs)}, {"auroc_stdev", stdev(aurocs)},
                 {"f1_mean", mean(f1s)},       {"f1_stdev", stdev(f1s)}};
    char line[160];
    std::snprintf(line, sizeof line, "test auroc %.4f ± %.4f  f1 %.4f ± %.4f  (%zu runs)", mean(aurocs),
                  stdev(aurocs), mean(f1s), stdev(f1s), aurocs.size());
    j["summary"] = line;
    err << line << "\n";
  }
  dataio::detail::write_file(fs::path(c.paths.out) / "summary.json", j.dump(2) + "\n");
  out << j.dump(2) << "\n";
  return kOk;
}

inline checkpoint::Checkpoint load_checkpoint(const config::CliConfig& c) {
  if (c.paths.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  return checkpoint::load(c.paths.checkpoint);
}

inline void check_dim(const checkpoint::Checkpoint& ck, const dataio::Dataset& ds) {
  for (const auto& r : ds.records) {
    if (r.dim() != ck.params.config.input_dim) {
      throw ConfigError("record '" + r.sample_id + "' has d=" + std::to_string(r.dim()) + " but the checkpoint expects " +
                        std::to_string(ck.params.config.input_dim));
    }
  }
}

inline int cmd_eval(const config::CliConfig& c, const std::string& split, std::ostream& out, std::ostream& err) {
  const auto ck = load_checkpoint(c);
  const dataio::Dataset ds = load_data(c.paths.data, c.layer, err);
  check_dim(ck, ds);
  const auto m = train::evaluate(ck.params, ds, dataio::parse_split(split));
  nlohmann::json j = metrics_json(m);
  j["split"] = split;
  j["config"] = c;
  j["checkpoint_config"] = ck.meta;
  out << j.dump(2) << "\n";
  return kOk;
}

inline int cmd_explain(const config::CliConfig& c, const std::vector<std::string>& ids, std::ostream& out,
                       std::ostream& err) {
  if (c.paths.out.empty()) throw ConfigError("explain: --out is required");
  if (ids.empty()) throw ConfigError("explain: give at least one sample id");
  const auto ck = load_checkpoint(c);
  const dataio::Dataset ds = load_data(c.paths.data, c.layer, err);
  check_dim(ck, ds);
  std::vector<std::string> missing;
  for (const auto& id : ids)
    if (ds.find(id) == nullptr) missing.push_back(id);
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    throw ConfigError("unknown sample id(s): " + list);
  }
  std::error_code ec;
  fs::create_directories(c.paths.out, ec);
  if (ec) throw IoError("cannot create " + c.paths.out + ": " + ec.message());

  nlohmann::json written = nlohmann::json::array();
  for (const auto& id : ids) {
    const auto& r = *ds.find(id);
    std::vector<std::string> tokens = r.tokens;
    if (tokens.empty())
      for (std::size_t i = 0; i < r.length(); ++i) tokens.push_back(std::to_string(i));
    const auto rep = interpret::causal_subgraph(r, ck.params, c.interpret.node_quantile, c.interpret.edge_floor,
                                                std::nullopt, c.interpret.graph);
    const fs::path dot = fs::path(c.paths.out) / (id + ".dot");
    const fs::path js = fs::path(c.paths.out) / (id + ".json");
    dataio::detail::write_file(dot, interpret::export_dot(rep, tokens));
    auto report = interpret::report_json(rep, tokens);
    report["config"] = nlohmann::ordered_json::parse(nlohmann::json(c).dump());
    dataio::detail::write_file(js, report.dump(2) + "\n");
    err << id << ": " << rep.kept_nodes.size() << " nodes, " << rep.kept_edges.size() << " edges\n";
    written.push_back({{"sample_id", id}, {"dot", dot.string()}, {"json", js.string()}});
  }
  out << nlohmann::json({{"config", c}, {"reports", written}}).dump(2) << "\n";
  return kOk;
}

inline int cmd_inspect(const std::vector<std::string>& files, std::ostream& out) {
  if (files.empty()) throw ConfigError("inspect: give at least one record file");
  bool all_valid = true;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& f : files) {
    const dataio::GraphRecord r = dataio::decode_record_unchecked(dataio::detail::read_file(f));
    nlohmann::json v = nlohmann::json::array();
    for (const auto& x : dataio::validate(r)) v.push_back(x.describe());
    all_valid = all_valid && v.empty();
    arr.push_back({{"file", f},
                   {"sample_id", r.sample_id},
                   {"L", r.length()},
                   {"d", r.dim()},
                   {"label", static_cast<int>(r.label)},
                   {"model_id", r.meta.model_id},
                   {"layer_index", r.meta.layer_index},
                   {"valid", v.empty()},
                   {"violations", v}});
  }
  out << arr.dump(2) << "\n";
  return all_valid ? kOk : kVerification;
}

inline int cmd_gradcheck(const Flags& f, const config::CliConfig& c, std::ostream& out, std::ostream& err) {
  gradcheck::Options opt;
  if (f.trials) opt.trials = *f.trials;
  opt.seed = f.seed.value_or(opt.seed);
  opt.model.reg_mode = RegMode::SecondOrder;
  const auto rep = gradcheck::run(opt, [&](const std::string& s) { err << s << "\n"; });
  nlohmann::json j;
  j["config"] = {{"trials", opt.trials},
                 {"seed", opt.seed},
                 {"eps", opt.eps},
                 {"first_order_tol", opt.first_order_tol},
                 {"second_order_tol", opt.second_order_tol},
                 {"coords_per_tensor", opt.coords_per_tensor},
                 {"cli", c}};
  j["passed"] = rep.passed();
  j["worst_first_order"] = rep.worst(false);
  j["worst_second_order"] = rep.worst(true);
  j["checks"] = rep.checks.size();
  j["redraws"] = rep.redraws;
  j["seconds"] = rep.seconds;
  nlohmann::json failed = nlohmann::json::array();
  for (const auto& ch : rep.checks) {
    if (!ch.passed()) {
      failed.push_back({{"name", ch.name}, {"max_rel_error", ch.max_rel_error}, {"tolerance", ch.tolerance}});
      err << "FAILED " << ch.name << ": rel err " << ch.max_rel_error << " > " << ch.tolerance << "\n";
    }
  }
  j["failed"] = failed;
  out << j.dump(2) << "\n";
  return rep.passed() ? kOk : kVerification;
}

/// Entry point; never throws.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"causalgaze: gradient-guided causal graph hallucination detector"};
  app.require_subcommand(1);
  Flags f;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  auto* train = app.add_subcommand("train", "train a detector");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  auto* explain = app.add_subcommand("explain", "export causal subgraphs as DOT and JSON");
  auto* inspect = app.add_subcommand("inspect", "print record headers and validation results");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference verification of every gradient");

  for (auto* s : {synth, train, eval, explain}) s->add_option("--config", f.config, "TOML config file");
  synth->add_option("--out", f.out, "output directory");
  synth->add_option("--n", f.n, "number of records");
  synth->add_option("--seed", f.seed, "generator seed");

  for (auto* s : {train, eval, explain}) {
    s->add_option("--data", f.data, "dataset directory or manifest");
    s->add_option("--layer", f.layer, "keep only records with this layer_index");
  }
  train->add_option("--out", f.out, "output directory");
  train->add_option("--seed", f.seed, "training seed");
  train->add_option("--runs", f.runs, "train this many derived seeds and report mean ± stdev");
  train->add_option("--ablation", f.ablation, "none, wo-gradient, random-gradient or mlp-a");
  train->add_option("--reg-mode", f.reg_mode, "second-order or detached");
  train->add_option("--monitor", f.monitor, "auroc or f1");

  eval->add_option("--checkpoint", f.checkpoint, "checkpoint file");
  eval->add_option("--split", f.split, "train, val or test");

  explain->add_option("--checkpoint", f.checkpoint, "checkpoint file");
  explain->add_option("--out", f.out, "output directory");
  explain->add_option("--node-quantile", f.node_quantile, "fraction of most salient nodes kept");
  explain->add_option("--edge-floor", f.edge_floor, "minimum refined edge weight kept");
  explain->add_option("--saliency-graph", f.saliency_graph, "refined or bypass");
  explain->add_option("ids", f.positional, "sample ids");

  inspect->add_option("files", f.positional, "CGZ1 record files")->required();

  gc->add_option("--trials", f.trials, "number of random instances");
  gc->add_option("--seed", f.seed, "instance seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  CLI::App* used = app.get_subcommands().front();
  try {
    const config::CliConfig c = resolve(f);
    if (used == synth) return cmd_synth(c, out, err);
    if (used == train) return cmd_train(c, out, err);
    if (used == eval) return cmd_eval(c, f.split, out, err);
    if (used == explain) return cmd_explain(c, f.positional, out, err);
    if (used == inspect) return cmd_inspect(f.positional, out);
    return cmd_gradcheck(f, c, out, err);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n" << used->help();
    return kUsage;
  } catch (const NumericError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kIo;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const nlohmann::json::exception& e) {
    err << "format error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kNumeric;
  }
}

}  // namespace causalgaze::cli
