#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "json.hpp"
#include "mctg/errors.hpp"
#include "mctg/harness.hpp"

using namespace mctg;
namespace fs = std::filesystem;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.enc_layers = 2;
  c.model.dec_layers = 1;
  c.model.max_len = 32;
  c.model.prompt_len = 2;
  c.pretrain.steps = 6;
  c.pretrain.batch = 4;
  c.pretrain.warmup = 2;
  c.pretrain.corpus = 64;
  c.pretrain.eval = 8;
  c.plugin.steps = 4;
  c.plugin.batch = 2;
  c.plugin.warmup = 1;
  c.plugin.corpus = 16;
  c.joint.corpus = 16;
  c.eval.examples = 4;
  c.eval.bound_examples = 1;
  c.eval.max_decode = 8;
  c.gradcheck.entries_per_param = 1;
  return c;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult cli(std::vector<std::string> args) {
  std::ostringstream o, e;
  const int code = run_cli(args, o, e);
  return {code, o.str(), e.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mctg_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(RunConfig, JsonRoundTripAndHash) {
  const RunConfig c = tiny_config();
  const RunConfig r = RunConfig::from_json(c.to_json());
  EXPECT_EQ(r.to_json(), c.to_json());
  EXPECT_EQ(r.hash(), c.hash());
  EXPECT_EQ(c.hash().size(), 16u);
  RunConfig d = c;
  d.plugin.lr = 1e-3;
  EXPECT_NE(d.hash(), c.hash());
  // Defaults fill keys missing from the file.
  EXPECT_EQ(RunConfig::from_json("{}").to_json(), RunConfig{}.to_json());
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(RunConfig::from_json(R"({"sed": 1})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"plugin": {"stepz": 1}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"model": {"layers": 1}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"family": "lora"})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"aspects": ["COLOR=red"]})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"plugin": {"lr": -1}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"model": {"vocab_size": 80}})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json(R"({"seeds": []})"), ConfigError);
  EXPECT_THROW(RunConfig::from_json("{"), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/cfg.json"), ArtifactError);
}

TEST(Helpers, SeedsStemsAndTiming) {
  EXPECT_EQ(stream_seed(1, "a"), stream_seed(1, "a"));
  EXPECT_NE(stream_seed(1, "a"), stream_seed(1, "b"));
  EXPECT_NE(stream_seed(1, "a"), stream_seed(2, "a"));
  EXPECT_EQ(plugin_stem("SHIFT=+1", Family::kGated), "SHIFT_+1.gated");
  EXPECT_EQ(plugin_stem("KEYWORD", Family::kPrefix), "KEYWORD.prefix");
  TimingReport t;
  t.add({"train-plugin", "a", 2.0});
  t.add({"train-plugin", "b", 4.0});
  t.add({"joint", "c", 1.0});
  EXPECT_DOUBLE_EQ(t.mean("train-plugin"), 3.0);
  EXPECT_DOUBLE_EQ(t.mean("none"), 0.0);
  EXPECT_DOUBLE_EQ(TimingReport::from_json(t.to_json()).total(), 7.0);
  EXPECT_THROW(t.add({"x", "y", -1.0}), ConfigError);
}

TEST(Stages, PluginDataIsFamilyIndependentAndPinned) {
  const RunConfig c = tiny_config();
  const auto a = plugin_corpus(c, AspectChoice::parse("MARK=m2"), 3);
  EXPECT_EQ(a, plugin_corpus(c, AspectChoice::parse("MARK=m2"), 3));
  EXPECT_NE(a, plugin_corpus(c, AspectChoice::parse("MARK=m2"), 4));
  for (const auto& e : a) EXPECT_EQ(e.aspects.at("MARK"), AspectValue(std::string("m2")));
  // Evaluation data is disjoint in stream from training data.
  EXPECT_NE(single_eval_set(c, AspectChoice::parse("MARK=m2"), 3, a.size()), a);
}

TEST(GradCheck, SuiteCoversBaseAndEveryFamily) {
  RunConfig c = tiny_config();
  c.gradcheck.entries_per_param = 1;
  const GradCheckSuite s = run_gradcheck_suite(c, 1);
  ASSERT_EQ(s.cases.size(), 4u);
  EXPECT_EQ(s.cases[0].name, "base");
  for (const auto& k : s.cases) EXPECT_GT(k.report.entries_checked, 0u) << k.name;
  EXPECT_TRUE(s.passed()) << s.max_rel_error();
}

TEST(Cli, ExitCodes) {
  EXPECT_EQ(cli({}).code, 2);
  EXPECT_EQ(cli({"bogus"}).code, 2);
  EXPECT_EQ(cli({"--help"}).code, 0);
  EXPECT_EQ(cli({"pretrain", "--family", "lora"}).code, 2);
  EXPECT_EQ(cli({"pretrain", "--config", "/nonexistent/cfg.json"}).code, 3);
  const fs::path dir = scratch("codes");
  EXPECT_EQ(cli({"train-plugin", "--out", dir.string(), "--aspect", "MARK=m1"}).code, 3);
  EXPECT_EQ(cli({"train-plugin", "--out", dir.string(), "--model", (dir / "none.ckpt").string()}).code, 3);
  EXPECT_EQ(cli({"gate-stats", "--out", dir.string(), "--plugins", (dir / "x.plugin").string()}).code, 3);
  const fs::path cfg = dir / "bad.json";
  write_file(cfg.string(), R"({"unknown": 1})");
  EXPECT_EQ(cli({"gradcheck", "--config", cfg.string(), "--out", dir.string()}).code, 2);
  ::setenv("MCTG_THREADS", "0", 1);
  EXPECT_EQ(cli({"gradcheck", "--out", dir.string()}).code, 2);
  ::unsetenv("MCTG_THREADS");
  // An impossible tolerance makes verification fail.
  RunConfig strict = tiny_config();
  strict.gradcheck.tol = 1e-300;
  write_file((dir / "strict.json").string(), strict.to_json());
  EXPECT_EQ(cli({"gradcheck", "--config", (dir / "strict.json").string(), "--out", dir.string()}).code, 5);
}

namespace {

/// Runs the whole tiny pipeline into `dir`.
void run_pipeline(const fs::path& dir) {
  const std::string cfg = (dir / "cfg.json").string();
  write_file(cfg, tiny_config().to_json());
  const std::string d = dir.string();
  const std::string model = (dir / "base.ckpt").string();
  ASSERT_EQ(cli({"pretrain", "--config", cfg, "--out", d, "--seed", "3"}).code, 0);
  ASSERT_EQ(cli({"train-plugin", "--config", cfg, "--out", d, "--seed", "3", "--model", model, "--aspect", "SHIFT=+1"}).code, 0);
  ASSERT_EQ(cli({"train-plugin", "--config", cfg, "--out", d, "--seed", "3", "--model", model, "--aspect", "KEYWORD"}).code, 0);
  const std::string plugins = (dir / "SHIFT_+1.gated.plugin").string() + "," + (dir / "KEYWORD.gated.plugin").string();
  const CliResult inf = cli({"infer", "--model", model, "--plugins", plugins, "--input", "10,11,12", "--keywords", "44", "--out", d});
  ASSERT_EQ(inf.code, 0) << inf.err;
  EXPECT_EQ(cli({"infer", "--model", model, "--plugins", plugins, "--input", "10,11"}).code, 2);
  ASSERT_EQ(cli({"evaluate", "--config", cfg, "--out", d, "--seed", "3", "--model", model, "--plugins", plugins}).code, 0);
  ASSERT_EQ(cli({"mi-analyze", "--config", cfg, "--out", d, "--seed", "3", "--model", model, "--plugins", plugins}).code, 0);
  const std::string joint =
      (dir / "joint_SHIFT_+1.gated.plugin").string() + "," + (dir / "joint_KEYWORD.gated.plugin").string();
  const CliResult b = cli({"bound-check", "--config", cfg, "--out", d, "--seed", "3", "--model", model, "--plugins", plugins,
                           "--joint", joint});
  ASSERT_EQ(b.code, 0) << b.err;
  ASSERT_EQ(cli({"gate-stats", "--config", cfg, "--out", d, "--plugins", plugins}).code, 0);
}

}  // namespace

TEST(Cli, TinyPipelineIsByteDeterministic) {
  const fs::path a = scratch("run_a"), b = scratch("run_b");
  run_pipeline(a);
  run_pipeline(b);
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    const std::string name = e.path().filename().string();
    if (name == "timing.json") continue;
    ASSERT_TRUE(fs::exists(b / name)) << name;
    EXPECT_EQ(read_file(e.path().string()), read_file((b / name).string())) << name;
    ++compared;
  }
  EXPECT_GE(compared, 20u);
  // The hash covers the effective configuration, including the --seed override.
  RunConfig effective = tiny_config();
  effective.seed = 3;
  const std::string hash = effective.hash();
  EXPECT_EQ(read_file((a / "mi_curve.csv").string()).rfind("# config_hash=" + hash + "\nfamily,seed,layer,mi\n", 0), 0u);
  EXPECT_EQ(read_file((a / "bound.csv").string()).find("layer,head,query_pos,lhs,rhs,assumption,margin\n"),
            std::string("# config_hash=" + hash + "\n").size());
  const auto rep = nlohmann::json::parse(read_file((a / "metrics.json").string()));
  EXPECT_EQ(rep.at("config_hash"), hash);
  EXPECT_TRUE(rep.contains("gaps"));
  EXPECT_TRUE(fs::exists(a / "gates_SHIFT_+1.gated.csv"));
  const TimingReport t = TimingReport::from_json(read_file((a / "timing.json").string()));
  EXPECT_EQ(t.entries.size(), 4u);
}
