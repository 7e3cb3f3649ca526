#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "causalgaze/cli.hpp"
#include "causalgaze/gradcheck.hpp"

using namespace causalgaze;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
  nlohmann::json json() const { return nlohmann::json::parse(out); }
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "causalgaze");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("causalgaze_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

constexpr const char* kTinyConfig = R"(
[synth]
n_samples = 30
l_min = 4
l_max = 6
d = 6
n_spurious = 2
seed = 5

[train]
epochs = 2
batch_size = 4
lr0 = 0.01

[detector]
proj_dim = 8
gat_dims = [8, 4]
heads = 2
gate_hidden = 3
)";

// Writes the tiny config and a matching dataset under dir.
fs::path tiny_setup(const fs::path& dir) {
  write(dir / "tiny.toml", kTinyConfig);
  const auto r = run_cli({"synth", "--config", (dir / "tiny.toml").string(), "--out", (dir / "data").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  return dir / "tiny.toml";
}

}  // namespace

TEST(Config, DefaultsWithoutFile) {
  config::CliConfig c;
  config::apply_toml(c, "");
  EXPECT_EQ(c.synth.n_samples, 1000u);
  EXPECT_EQ(c.train.epochs, 50u);
  EXPECT_EQ(c.train.model.proj_dim, 128u);
  EXPECT_EQ(c.interpret.node_quantile, 0.2);
}

TEST(Config, ReadsEverySection) {
  config::CliConfig c;
  config::apply_toml(c, R"(
[synth]
signal_strength = 1.5
[train]
monitor = "f1"
T0 = 5
runs = 3
[detector]
gat_dims = [32, 16]
ablation = "wo-gradient"
reg_mode = "detached"
lambda = 0.1
[interpret]
edge_floor = 0.01
saliency_graph = "bypass"
[paths]
data = "somewhere"
)");
  EXPECT_EQ(c.synth.signal_strength, 1.5);
  EXPECT_EQ(c.train.monitor, train::Monitor::F1);
  EXPECT_EQ(c.train.scheduler.t0, 5u);
  EXPECT_EQ(c.runs, 3u);
  EXPECT_EQ(c.train.model.gat_dims, (std::vector<std::size_t>{32, 16}));
  EXPECT_EQ(c.train.model.ablation, Ablation::WithoutGradient);
  EXPECT_EQ(c.train.model.reg_mode, RegMode::Detached);
  EXPECT_EQ(c.train.model.lambda, 0.1);
  EXPECT_EQ(c.interpret.edge_floor, 0.01);
  EXPECT_EQ(c.interpret.graph, interpret::SaliencyGraph::Bypass);
  EXPECT_EQ(c.paths.data, "somewhere");
}

TEST(Config, RejectsUnknownKeysWrongTypesAndBadEnums) {
  config::CliConfig c;
  EXPECT_THROW(config::apply_toml(c, "[synth]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(config::apply_toml(c, "[nowhere]\nx = 1\n"), ConfigError);
  EXPECT_THROW(config::apply_toml(c, "[train]\nepochs = \"many\"\n"), ConfigError);
  EXPECT_THROW(config::apply_toml(c, "[detector]\nablation = \"sometimes\"\n"), ConfigError);
  EXPECT_THROW(config::apply_toml(c, "[synth\n"), ConfigError);
  EXPECT_THROW(config::apply_toml_file(c, "/nonexistent/causalgaze.toml"), IoError);
}

TEST(Config, FlagsOverrideFile) {
  const fs::path dir = scratch("flags");
  write(dir / "c.toml", "[train]\nseed = 4\nmonitor = \"f1\"\n[paths]\nout = \"a\"\n");
  cli::Flags f;
  f.config = (dir / "c.toml").string();
  f.seed = 9;
  f.out = "b";
  const auto c = cli::resolve(f);
  EXPECT_EQ(c.train.seed, 9u);
  EXPECT_EQ(c.synth.seed, 9u);
  EXPECT_EQ(c.paths.out, "b");
  EXPECT_EQ(c.train.monitor, train::Monitor::F1);
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run_cli({}).code, 2);
  EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
  EXPECT_EQ(run_cli({"synth"}).code, 2);
  EXPECT_EQ(run_cli({"synth", "--n", "x", "--out", "/tmp/x"}).code, 2);
  EXPECT_EQ(run_cli({"train", "--out", "/tmp/x", "--ablation", "half"}).code, 2);
  EXPECT_EQ(run_cli({"--help"}).code, 0);
}

TEST(Cli, SynthIsDeterministic) {
  const fs::path dir = scratch("synth");
  const auto a = run_cli({"synth", "--out", (dir / "a").string(), "--n", "40", "--seed", "3"});
  const auto b = run_cli({"synth", "--out", (dir / "b").string(), "--n", "40", "--seed", "3"});
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  const auto ja = a.json(), jb = b.json();
  EXPECT_EQ(ja["counts"], (nlohmann::json{{"train", 16}, {"val", 8}, {"test", 16}}));
  EXPECT_EQ(ja["manifest_hash"], jb["manifest_hash"]);
  EXPECT_EQ(ja["content_hash"], jb["content_hash"]);
  EXPECT_EQ(ja["config"]["synth"]["seed"], 3);
  const auto c = run_cli({"synth", "--out", (dir / "c").string(), "--n", "40", "--seed", "4"});
  EXPECT_NE(c.json()["content_hash"], ja["content_hash"]);
}

TEST(Cli, TrainEvalExplainRoundTrip) {
  const fs::path dir = scratch("train");
  const fs::path cfg = tiny_setup(dir);
  const std::string data = (dir / "data").string();
  auto t = run_cli({"train", "--config", cfg.string(), "--data", data, "--out", (dir / "run").string(), "--ablation",
                "random-gradient"});
  ASSERT_EQ(t.code, 0) << t.err;
  const fs::path ck = dir / "run" / "checkpoint.cgzk";
  ASSERT_TRUE(fs::exists(ck));
  const auto loaded = checkpoint::load(ck);
  EXPECT_EQ(loaded.params.config.ablation, Ablation::RandomGradient);
  EXPECT_EQ(loaded.meta["train"]["model"]["ablation"], "random-gradient");
  EXPECT_EQ(loaded.meta["train"]["model"]["input_dim"], 6);
  EXPECT_FALSE(loaded.meta.contains("paths"));

  std::istringstream lines(read(dir / "run" / "metrics.jsonl"));
  std::string line;
  std::getline(lines, line);
  EXPECT_TRUE(nlohmann::json::parse(line).contains("config"));
  std::size_t epochs = 0, tests = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "split", "auroc", "f1", "lr"}) EXPECT_TRUE(j.contains(k)) << line;
    epochs += j["split"] == "val";
    tests += j["split"] == "test";
  }
  EXPECT_EQ(epochs, 2u);
  EXPECT_EQ(tests, 1u);

  const auto e = run_cli({"eval", "--checkpoint", ck.string(), "--data", data, "--split", "val"});
  ASSERT_EQ(e.code, 0) << e.err;
  const auto ej = e.json();
  EXPECT_EQ(ej["split"], "val");
  EXPECT_EQ(ej["n"], 6);
  EXPECT_EQ(ej["auroc"].get<double>(), train::evaluate(loaded.params, dataio::load_manifest(data), dataio::Split::Val).auroc);
  EXPECT_EQ(ej["checkpoint_config"], loaded.meta);

  const auto x = run_cli({"explain", "--checkpoint", ck.string(), "--data", data, "--out", (dir / "ex").string(),
                      "--node-quantile", "0.5", "s00000", "s00001"});
  ASSERT_EQ(x.code, 0) << x.err;
  const auto report = nlohmann::json::parse(read(dir / "ex" / "s00000.json"));
  EXPECT_EQ(report["thresholds"]["node_quantile"], 0.5);
  EXPECT_TRUE(report.contains("config"));
  EXPECT_EQ(read(dir / "ex" / "s00001.dot").rfind("// causal subgraph of s00001", 0), 0u);

  const auto bad = run_cli({"explain", "--checkpoint", ck.string(), "--data", data, "--out", (dir / "ex").string(),
                        "nope-1", "s00000", "nope-2"});
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("nope-1, nope-2"), std::string::npos) << bad.err;
}

TEST(Cli, TrainIsByteDeterministic) {
  const fs::path dir = scratch("determinism");
  const fs::path cfg = tiny_setup(dir);
  for (const char* out : {"a", "b"}) {
    const auto r = run_cli({"train", "--config", cfg.string(), "--data", (dir / "data").string(), "--out",
                        (dir / out).string(), "--seed", "11"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  EXPECT_EQ(read(dir / "a" / "checkpoint.cgzk"), read(dir / "b" / "checkpoint.cgzk"));
  EXPECT_EQ(read(dir / "a" / "metrics.jsonl"), read(dir / "b" / "metrics.jsonl"));
}

TEST(Cli, RunsReportMeanAndSampleStdev) {
  const fs::path dir = scratch("runs");
  const fs::path cfg = tiny_setup(dir);
  const auto r = run_cli({"train", "--config", cfg.string(), "--data", (dir / "data").string(), "--out",
                      (dir / "out").string(), "--runs", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::vector<double> aurocs;
  std::set<std::uint64_t> seeds;
  for (int k = 0; k < 3; ++k) {
    std::istringstream lines(read(dir / "out" / ("run" + std::to_string(k)) / "metrics.jsonl"));
    std::string line;
    while (std::getline(lines, line)) {
      const auto j = nlohmann::json::parse(line);
      if (j.value("split", "") == "test") aurocs.push_back(j["auroc"].get<double>());
    }
    seeds.insert(checkpoint::load(dir / "out" / ("run" + std::to_string(k)) / "checkpoint.cgzk")
                     .meta["train"]["seed"]
                     .get<std::uint64_t>());
  }
  ASSERT_EQ(aurocs.size(), 3u);
  EXPECT_EQ(seeds.size(), 3u);
  const double m = (aurocs[0] + aurocs[1] + aurocs[2]) / 3.0;
  double ss = 0.0;
  for (double a : aurocs) ss += (a - m) * (a - m);
  const auto summary = nlohmann::json::parse(read(dir / "out" / "summary.json"));
  EXPECT_NEAR(summary["test"]["auroc_mean"].get<double>(), m, 1e-15);
  EXPECT_NEAR(summary["test"]["auroc_stdev"].get<double>(), std::sqrt(ss / 2.0), 1e-15);
  EXPECT_NE(summary["summary"].get<std::string>().find("(3 runs)"), std::string::npos);
}

TEST(Cli, MissingDataIsIoErrorAndDimensionMismatchIsUsage) {
  const fs::path dir = scratch("errors");
  EXPECT_EQ(run_cli({"train", "--data", (dir / "none").string(), "--out", (dir / "o").string()}).code, 3);
  const fs::path cfg = tiny_setup(dir);
  ASSERT_EQ(run_cli({"train", "--config", cfg.string(), "--data", (dir / "data").string(), "--out",
                 (dir / "run").string()})
                .code,
            0);
  ASSERT_EQ(run_cli({"synth", "--out", (dir / "wide").string(), "--n", "10"}).code, 0);
  const auto r = run_cli({"eval", "--checkpoint", (dir / "run" / "checkpoint.cgzk").string(), "--data",
                      (dir / "wide").string()});
  EXPECT_EQ(r.code, 2);
  write(dir / "junk.cgzk", "not a checkpoint");
  EXPECT_EQ(run_cli({"eval", "--checkpoint", (dir / "junk.cgzk").string(), "--data", (dir / "data").string()}).code, 3);
}

TEST(Cli, InspectReportsValidity) {
  const fs::path dir = scratch("inspect");
  ASSERT_EQ(run_cli({"synth", "--out", dir.string(), "--n", "2"}).code, 0);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".cgz") files.push_back(e.path());
  ASSERT_EQ(files.size(), 2u);
  const auto ok = run_cli({"inspect", files[0].string()});
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_EQ(ok.json()[0]["valid"], true);
  EXPECT_EQ(ok.json()[0]["d"], 32);

  // First attention entry is always 1; halving it breaks the row sum.
  std::string bytes = read(files[1]);
  const auto r = dataio::load_record(files[1]);
  std::string half;
  dataio::detail::put_f32(half, 0.5);
  bytes.replace(22 + 4 * r.length() * r.dim(), 4, half);
  write(dir / "broken.cgz", bytes);
  const auto bad = run_cli({"inspect", files[0].string(), (dir / "broken.cgz").string()});
  EXPECT_EQ(bad.code, 5);
  EXPECT_EQ(bad.json()[1]["valid"], false);
  EXPECT_FALSE(bad.json()[1]["violations"].empty());
  write(dir / "garbage.cgz", "CGZ0");
  EXPECT_EQ(run_cli({"inspect", (dir / "garbage.cgz").string()}).code, 3);
}

TEST(Cli, GradcheckPassesOnSmallRun) {
  const auto r = run_cli({"gradcheck", "--trials", "2", "--seed", "3"});
  EXPECT_EQ(r.code, 0) << r.err;
  const auto j = r.json();
  EXPECT_EQ(j["passed"], true);
  EXPECT_LE(j["worst_first_order"].get<double>(), 1e-5);
  EXPECT_LE(j["worst_second_order"].get<double>(), 1e-4);
  EXPECT_TRUE(j["failed"].empty());
}

TEST(Gradcheck, CatchesABrokenTolerance) {
  gradcheck::Options opt;
  opt.trials = 1;
  opt.first_order_tol = 0.0;
  opt.second_order_tol = 0.0;
  const auto rep = gradcheck::run(opt);
  EXPECT_FALSE(rep.passed());
  EXPECT_GT(rep.checks.size(), 0u);
}

TEST(Gradcheck, IsDeterministic) {
  gradcheck::Options opt;
  opt.trials = 1;
  const auto a = gradcheck::run(opt), b = gradcheck::run(opt);
  ASSERT_EQ(a.checks.size(), b.checks.size());
  for (std::size_t i = 0; i < a.checks.size(); ++i) {
    EXPECT_EQ(a.checks[i].name, b.checks[i].name);
    EXPECT_EQ(a.checks[i].max_rel_error, b.checks[i].max_rel_error);
  }
}
