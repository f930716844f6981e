#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mctg/interference.hpp"
#include "mctg/plugins.hpp"
#include "mctg/pretrain.hpp"

namespace mctg {

/// Everything a run depends on. Serializes to one JSON document; unknown keys
/// are rejected at every level.
struct RunConfig {
  ModelConfig model;
  std::uint64_t seed = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  Family family = Family::kGated;
  std::vector<std::string> aspects{"SHIFT=+1", "MARK=m2"};
  LengthRange lengths;

  struct Pretrain {
    int steps = 4500;
    int batch = 32;
    double lr = 3e-3;
    int warmup = 200;
    double trigger_jitter = 0.25;
    std::size_t corpus = 150000;
    double aspect_prob = 0.5;
    std::size_t eval = 500;
  } pretrain;

  struct PluginStage {
    int steps = 1000;
    int batch = 16;
    double lr = 5e-3;
    int warmup = 50;
    std::size_t corpus = 5000;
  } plugin;

  struct Joint {
    std::size_t corpus = 5000;
  } joint;

  struct Eval {
    std::size_t examples = 200;
    std::size_t bound_examples = 20;
    int max_decode = 20;
  } eval;

  struct GradCheck {
    std::size_t entries_per_param = 8;
    double step = 1e-5;
    double tol = 1e-4;
  } gradcheck;

  std::string out_dir = "runs";

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  /// 16 hex digits of FNV-1a over the canonical JSON form.
  std::string hash() const;
  void validate() const;

  PretrainSettings pretrain_settings() const;
  PluginTrainSettings plugin_settings() const;
};

/// Reads and parses a config file; ArtifactError when unreadable.
RunConfig load_run_config(const std::string& path);

/// Seed of an independent stream derived from the run seed and a stage tag.
std::uint64_t stream_seed(std::uint64_t seed, std::string_view tag);

/// "SHIFT=+1" + gated -> "SHIFT_+1.gated"
std::string plugin_stem(const std::string& aspect_label, Family family);

struct TimingEntry {
  std::string stage;
  std::string label;
  double seconds = 0.0;
};

/// Wall-clock costs. The only report that is not reproducible byte for byte.
struct TimingReport {
  std::vector<TimingEntry> entries;
  void add(TimingEntry e);
  double total() const;
  /// Mean seconds over entries of `stage`; 0 when none.
  double mean(std::string_view stage) const;
  std::string to_json() const;
  static TimingReport from_json(const std::string& text);
};

/// Appends to `path` (created when absent).
void append_timing(const std::string& path, const TimingEntry& e);

// Pipeline stages shared by the CLI and the acceptance run. Every random
// stream is derived from (seed, stage tag) so stages are independent of call
// order.

std::vector<Example> pretrain_corpus(const RunConfig& cfg, std::uint64_t seed);
PretrainResult run_pretrain(const RunConfig& cfg, std::uint64_t seed,
                            const std::function<void(int, double)>& progress = {});

/// Single-aspect training data and plugin training. Data and init streams do
/// not depend on the family so families see identical budgets.
std::vector<Example> plugin_corpus(const RunConfig& cfg, const AspectChoice& aspect, std::uint64_t seed);
PluginTrainResult run_train_plugin(const BaseModel& m, const RunConfig& cfg, const AspectChoice& aspect,
                                   Family family, std::uint64_t seed);

/// Joint reference: warm start from the separately trained plugins, same
/// hyperparameters, multi-aspect data.
std::vector<Example> joint_corpus(const RunConfig& cfg, std::span<const AspectChoice> aspects,
                                  std::uint64_t seed);
PluginTrainResult run_joint_train(const BaseModel& m, const RunConfig& cfg, std::span<const Plugin> separate,
                                  std::uint64_t seed);

std::vector<Example> single_eval_set(const RunConfig& cfg, const AspectChoice& aspect, std::uint64_t seed,
                                     std::size_t n);
std::vector<Example> multi_eval_set(const RunConfig& cfg, std::span<const AspectChoice> aspects,
                                    std::uint64_t seed, std::size_t n);

/// Central-difference check of the full base stack and of every plugin family.
struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};
struct GradCheckSuite {
  std::vector<GradCheckCase> cases;
  std::size_t entries() const;
  double max_rel_error() const;
  bool passed() const;
};
GradCheckSuite run_gradcheck_suite(const RunConfig& cfg, std::uint64_t seed);

/// Bound analysis over a set of examples for one plugin pair.
struct BoundRun {
  std::vector<std::size_t> example;  // per single-head row
  std::vector<BoundEstimate> single;
  std::vector<std::size_t> multi_example;
  std::vector<MultiHeadBound> multi;
  std::size_t assumption_count = 0;
  std::size_t conditional_count = 0;  // assumption and mass conditions hold
  std::size_t conditional_violations = 0;
  double worst_conditional_gap = 0.0;  // max(rhs - lhs) over conditional rows
};
BoundRun run_bound_analysis(const BaseModel& m, std::span<const Example> eval, const Plugin& pi,
                            const Plugin& pj, const Plugin& joint_i, const Plugin& joint_j);
/// bound.csv rows: layer,head,query_pos,lhs,rhs,assumption,margin
std::string bound_csv(const BoundRun& r);
std::string bound_detail_csv(const BoundRun& r);
std::string bound_multi_csv(const BoundRun& r);

/// Whole-file helpers; read_file throws ArtifactError.
std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

/// The `mctg` command line. Returns the process exit code:
/// 0 ok, 2 config, 3 missing artifact, 4 numeric, 5 verification.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mctg
