#include <cstdlib>
#include <filesystem>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mctg/errors.hpp"
#include "mctg/harness.hpp"

namespace mctg {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Verification failure (exit code 5).
class VerificationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string model;
  std::string plugins;
  std::string joint;
  std::string family;
  std::vector<std::string> aspects;
  std::string input;
  std::string keywords;
  std::string data;
};

struct Context {
  RunConfig cfg;
  std::uint64_t seed = 1;
  std::string out;
  std::string hash;
  int threads = 1;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::vector<int> parse_tokens(const std::string& s, const std::string& what) {
  std::vector<int> out;
  for (const std::string& t : split_list(s)) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != t.size()) throw ConfigError(what + ": '" + t + "' is not an integer token");
    out.push_back(v);
  }
  return out;
}

int threads_from_env() {
  const char* v = std::getenv("MCTG_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError(std::string("MCTG_THREADS must be a positive integer, got '") + v + "'");
  return static_cast<int>(n);
}

Context make_context(const Options& o) {
  Context c;
  if (!o.config.empty()) c.cfg = load_run_config(o.config);
  if (o.seed) c.cfg.seed = *o.seed;
  if (!o.family.empty()) c.cfg.family = parse_family(o.family);
  c.cfg.validate();
  c.seed = c.cfg.seed;
  c.out = o.out.empty() ? c.cfg.out_dir : o.out;
  c.hash = c.cfg.hash();
  c.threads = threads_from_env();
  fs::create_directories(c.out);
  write_file((fs::path(c.out) / "config.json").string(), c.cfg.to_json());
  return c;
}

std::string out_path(const Context& c, const std::string& name) { return (fs::path(c.out) / name).string(); }

/// CSV text with a leading "# config_hash=" line.
std::string with_hash(const Context& c, const std::string& csv) { return "# config_hash=" + c.hash + "\n" + csv; }

json metrics_json(const Metrics& m) {
  json per = json::object();
  for (const auto& [k, v] : m.per_aspect) per[k] = v;
  return {{"per_aspect", per}, {"average", m.average}};
}

json report_header(const Context& c, const std::string& command) {
  return {{"command", command}, {"config_hash", c.hash}, {"seed", c.seed}};
}

BaseModel require_model(const Options& o) {
  if (o.model.empty()) throw ArtifactError("--model is required");
  BaseModel m = load_checkpoint(o.model);
  m.frozen = true;
  return m;
}

std::vector<Plugin> load_plugins(const std::string& list) {
  std::vector<Plugin> out;
  for (const std::string& p : split_list(list)) out.push_back(load_plugin(p));
  return out;
}

std::string csv_loss(const std::vector<double>& curve) {
  std::string s = "step,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i + 1, curve[i]);
    s += buf;
  }
  return s;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Values for every plugin: pinned ones from the label, others from --aspect.
std::map<std::string, AspectValue> collect_values(const Options& o, const PluginCombo& combo) {
  std::map<std::string, AspectValue> v;
  for (const std::string& a : o.aspects) {
    const AspectChoice c = AspectChoice::parse(a);
    if (c.value) v[c.name] = *c.value;
  }
  if (!o.keywords.empty()) v["KEYWORD"] = parse_tokens(o.keywords, "--keywords");
  for (const Plugin& p : combo.plugins) {
    const AspectChoice c = p.choice();
    if (c.value) v[c.name] = *c.value;
    else if (!v.count(c.name))
      throw ConfigError("no value for aspect " + c.name + " (use --aspect NAME=VALUE or --keywords)");
  }
  return v;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_pretrain(const Options& o, std::ostream& out) {
  Context c = make_context(o);
  const auto t0 = std::chrono::steady_clock::now();
  PretrainResult r = run_pretrain(c.cfg, c.seed, [&out](int step, double loss) {
    out << "pretrain step " << step << " loss " << loss << "\n";
  });
  const double secs = seconds_since(t0);
  const auto copy_eval = gen_base_corpus(c.cfg.pretrain.eval, c.cfg.lengths, stream_seed(c.seed, "copy-eval"));
  const auto trig_eval = gen_pretrain_corpus(c.cfg.pretrain.eval, c.cfg.lengths, stream_seed(c.seed, "trigger-eval"),
                                             c.cfg.pretrain.aspect_prob);
  const double copy = copy_token_accuracy(r.model, copy_eval);
  const Metrics trig = triggered_accuracy(r.model, r.codebook, trig_eval, stream_seed(c.seed, "trigger-eval-input"));
  save_checkpoint(r.model, out_path(c, "base.ckpt"));
  json rep = report_header(c, "pretrain");
  rep["copy_accuracy"] = copy;
  rep["triggered"] = metrics_json(trig);
  rep["final_loss"] = r.loss_curve.empty() ? 0.0 : r.loss_curve.back();
  rep["parameters"] = r.model.parameter_count();
  write_file(out_path(c, "pretrain_metrics.json"), rep.dump(2));
  write_file(out_path(c, "pretrain_loss.csv"), with_hash(c, csv_loss(r.loss_curve)));
  append_timing(out_path(c, "timing.json"), {"pretrain", "base", secs});
  out << "copy accuracy " << copy << ", wrote " << out_path(c, "base.ckpt") << "\n";
  return 0;
}

int cmd_train_plugin(const Options& o, std::ostream& out) {
  Context c = make_context(o);
  const BaseModel m = require_model(o);
  std::string label = o.aspects.empty() ? (c.cfg.aspects.empty() ? "" : c.cfg.aspects.front()) : o.aspects.front();
  if (label.empty()) throw ConfigError("--aspect is required");
  if (o.aspects.size() > 1) throw ConfigError("train-plugin takes one --aspect");
  const AspectChoice choice = AspectChoice::parse(label);
  PluginTrainResult r = run_train_plugin(m, c.cfg, choice, c.cfg.family, c.seed);
  const Plugin& p = r.plugins.front();
  const std::string stem = plugin_stem(p.aspect, p.family);
  save_plugin(p, out_path(c, stem + ".plugin"));
  const auto eval = single_eval_set(c.cfg, choice, c.seed, c.cfg.eval.examples);
  const PluginCombo combo = combine_plugins(r.plugins);
  const Metrics met = evaluate(decode_corpus(m, combo, eval, c.cfg.eval.max_decode), eval);
  json rep = report_header(c, "train-plugin");
  rep["aspect"] = p.aspect;
  rep["family"] = to_string(p.family);
  rep["held_out"] = metrics_json(met);
  rep["final_loss"] = r.loss_curve.empty() ? 0.0 : r.loss_curve.back();
  write_file(out_path(c, stem + ".metrics.json"), rep.dump(2));
  write_file(out_path(c, stem + ".loss.csv"), with_hash(c, csv_loss(r.loss_curve)));
  append_timing(out_path(c, "timing.json"), {"train-plugin", stem, r.seconds});
  out << p.aspect << " (" << to_string(p.family) << ") held-out " << met.average << ", wrote "
      << out_path(c, stem + ".plugin") << "\n";
  return 0;
}

int cmd_infer(const Options& o, std::ostream& out) {
  const BaseModel m = require_model(o);
  const std::vector<Plugin> ps = load_plugins(o.plugins);
  const PluginCombo combo = combine_plugins(ps);
  if (o.input.empty()) throw ConfigError("--input is required (comma-separated token ids)");
  const std::vector<int> x = parse_tokens(o.input, "--input");
  const RunConfig cfg = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  (void)threads_from_env();
  const auto values = collect_values(o, combo);
  const std::vector<int> y = decode_with_plugins(m, combo, x, values, cfg.eval.max_decode);
  std::string line;
  for (std::size_t i = 0; i < y.size(); ++i) line += (i ? " " : "") + std::to_string(y[i]);
  out << line << "\n";
  if (!o.out.empty()) write_file((fs::path(o.out) / "infer.txt").string(), line + "\n");
  return 0;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  Context c = make_context(o);
  const BaseModel m = require_model(o);
  const std::vector<Plugin> ps = load_plugins(o.plugins);
  json rep = report_header(c, "evaluate");
  if (ps.empty()) {
    const auto eval = o.data.empty() ? gen_base_corpus(c.cfg.eval.examples, c.cfg.lengths, stream_seed(c.seed, "copy-eval"))
                                     : read_corpus(o.data);
    rep["copy_accuracy"] = copy_token_accuracy(m, eval);
  } else {
    const PluginCombo combo = combine_plugins(ps);
    std::vector<AspectChoice> choices;
    for (const Plugin& p : ps) choices.push_back(p.choice());
    const auto multi_eval = o.data.empty() ? multi_eval_set(c.cfg, choices, c.seed, c.cfg.eval.examples) : read_corpus(o.data);
    const Metrics multi = evaluate(decode_corpus(m, combo, multi_eval, c.cfg.eval.max_decode), multi_eval);
    Metrics single;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto eval = single_eval_set(c.cfg, choices[i], c.seed, c.cfg.eval.examples);
      const Metrics s = evaluate(decode_corpus(m, combine_plugins(std::span<const Plugin>(&ps[i], 1)), eval,
                                               c.cfg.eval.max_decode), eval);
      single.per_aspect[choices[i].name] = s.per_aspect.at(choices[i].name);
    }
    double avg = 0.0;
    for (const auto& [k, v] : single.per_aspect) avg += v;
    single.average = avg / static_cast<double>(single.per_aspect.size());
    rep["family"] = to_string(combo.family());
    rep["multi"] = metrics_json(multi);
    rep["single"] = metrics_json(single);
    json gaps = json::object();
    for (const auto& [k, v] : performance_gap(single, multi)) gaps[k] = v;
    rep["gaps"] = gaps;
  }
  write_file(out_path(c, "metrics.json"), rep.dump(2));
  out << rep.dump(2) << "\n";
  return 0;
}

int cmd_mi_analyze(const Options& o, std::ostream& out) {
  Context c = make_context(o);
  const BaseModel m = require_model(o);
  const std::vector<Plugin> sep = load_plugins(o.plugins);
  if (sep.size() < 2) throw ConfigError("mi-analyze needs at least two --plugins");
  const PluginCombo sep_combo = combine_plugins(sep);
  std::vector<Plugin> joint;
  if (!o.joint.empty()) {
    joint = load_plugins(o.joint);
  } else {
    const auto t0 = std::chrono::steady_clock::now();
    joint = run_joint_train(m, c.cfg, sep, c.seed).plugins;
    append_timing(out_path(c, "timing.json"), {"joint-train", to_string(sep_combo.family()), seconds_since(t0)});
    for (const Plugin& p : joint) save_plugin(p, out_path(c, "joint_" + plugin_stem(p.aspect, p.family) + ".plugin"));
  }
  const PluginCombo joint_combo = combine_plugins(joint);
  std::vector<AspectChoice> choices;
  for (const Plugin& p : sep) choices.push_back(p.choice());
  const auto eval = multi_eval_set(c.cfg, choices, c.seed, c.cfg.eval.examples);
  MIReport r = measure_mi(m, sep_combo, joint_combo, eval);
  r.seed = c.seed;
  write_file(out_path(c, "mi_curve.csv"), with_hash(c, mi_curve_csv(std::span<const MIReport>(&r, 1))));
  json rep = report_header(c, "mi-analyze");
  rep["family"] = r.family;
  rep["examples"] = r.examples;
  rep["mi"] = r.per_layer;
  write_file(out_path(c, "mi_report.json"), rep.dump(2));
  for (std::size_t l = 0; l < r.per_layer.size(); ++l) out << "layer " << l + 1 << " mi " << r.per_layer[l] << "\n";
  return 0;
}

int cmd_bound_check(const Options& o, std::ostream& out) {
  Context c = make_context(o);
  const BaseModel m = require_model(o);
  const std::vector<Plugin> sep = load_plugins(o.plugins);
  if (sep.size() != 2) throw ConfigError("bound-check needs exactly two --plugins");
  (void)combine_plugins(sep);
  std::vector<Plugin> joint;
  if (!o.joint.empty()) joint = load_plugins(o.joint);
  else joint = run_joint_train(m, c.cfg, sep, c.seed).plugins;
  if (joint.size() != 2) throw ConfigError("bound-check needs exactly two --joint plugins");
  std::vector<AspectChoice> choices{sep[0].choice(), sep[1].choice()};
  const auto eval = multi_eval_set(c.cfg, choices, c.seed, c.cfg.eval.bound_examples);
  const BoundRun r = run_bound_analysis(m, eval, sep[0], sep[1], joint[0], joint[1]);
  write_file(out_path(c, "bound.csv"), with_hash(c, bound_csv(r)));
  write_file(out_path(c, "bound_detail.csv"), with_hash(c, bound_detail_csv(r)));
  write_file(out_path(c, "bound_multi.csv"), with_hash(c, bound_multi_csv(r)));
  json rep = report_header(c, "bound-check");
  rep["instances"] = r.single.size();
  rep["assumption_fraction"] = r.single.empty() ? 0.0 : static_cast<double>(r.assumption_count) / static_cast<double>(r.single.size());
  rep["conditional_instances"] = r.conditional_count;
  rep["conditional_violations"] = r.conditional_violations;
  rep["worst_conditional_gap"] = r.worst_conditional_gap;
  write_file(out_path(c, "bound_summary.json"), rep.dump(2));
  out << rep.dump(2) << "\n";
  return 0;
}

int cmd_gate_stats(const Options& o, std::ostream& out) {
  Context c = make_context(o);
  const std::vector<Plugin> ps = load_plugins(o.plugins);
  if (ps.empty()) throw ConfigError("gate-stats needs --plugins");
  json rep = report_header(c, "gate-stats");
  json items = json::array();
  for (const Plugin& p : ps) {
    const GateStats s = gate_stats(p);
    const std::string name = ps.size() == 1 ? "gates.csv" : "gates_" + plugin_stem(p.aspect, p.family) + ".csv";
    write_file(out_path(c, name), with_hash(c, gates_csv(s)));
    json item = {{"aspect", p.aspect}, {"file", name}};
    item["correlation"] = s.correlation ? json(*s.correlation) : json(nullptr);
    items.push_back(item);
    out << name << " correlation " << (s.correlation ? std::to_string(*s.correlation) : "undefined") << "\n";
  }
  rep["plugins"] = items;
  write_file(out_path(c, "gate_stats.json"), rep.dump(2));
  return 0;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  Context c = make_context(o);
  const GradCheckSuite s = run_gradcheck_suite(c.cfg, c.seed);
  json rep = report_header(c, "gradcheck");
  json cases = json::array();
  for (const auto& k : s.cases) {
    cases.push_back({{"name", k.name},
                     {"entries", k.report.entries_checked},
                     {"max_rel_error", k.report.max_rel_error},
                     {"max_abs_error", k.report.max_abs_error},
                     {"passed", k.report.passed}});
    out << k.name << ": " << k.report.entries_checked << " entries, max rel error " << k.report.max_rel_error
        << (k.report.passed ? " ok" : " FAIL") << "\n";
  }
  rep["cases"] = cases;
  rep["entries"] = s.entries();
  rep["max_rel_error"] = s.max_rel_error();
  rep["passed"] = s.passed();
  write_file(out_path(c, "gradcheck.json"), rep.dump(2));
  if (!s.passed()) throw VerificationError("gradient check failed");
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Plug-and-play multi-aspect controllable generation toolkit", "mctg"};
  app.require_subcommand(1);
  Options o;
  auto common = [&o](CLI::App* s) {
    s->add_option("--config", o.config, "Run configuration (JSON)");
    s->add_option("--seed", o.seed, "Run seed (overrides the config)");
    s->add_option("--out", o.out, "Output directory");
    s->add_option("--model", o.model, "Base checkpoint");
    s->add_option("--plugins", o.plugins, "Comma-separated plugin files");
    s->add_option("--joint", o.joint, "Comma-separated jointly trained plugin files");
    s->add_option("--family", o.family, "Plugin family")->check(CLI::IsMember({"prompt", "prefix", "gated"}));
    s->add_option("--aspect", o.aspects, "NAME or NAME=VALUE");
  };
  struct Cmd {
    const char* name;
    const char* help;
    int (*run)(const Options&, std::ostream&);
  };
  const Cmd cmds[] = {
      {"pretrain", "Pretrain and freeze the base model", cmd_pretrain},
      {"train-plugin", "Train one plugin on single-aspect data", cmd_train_plugin},
      {"infer", "Greedy decode with concatenated plugins", cmd_infer},
      {"evaluate", "Single- and multi-aspect metrics with gaps", cmd_evaluate},
      {"mi-analyze", "Per-layer mutual interference", cmd_mi_analyze},
      {"bound-check", "Head decompositions and lower bounds", cmd_bound_check},
      {"gate-stats", "Per-layer gate and prompt magnitudes", cmd_gate_stats},
      {"gradcheck", "Finite-difference gradient check", cmd_gradcheck},
  };
  std::map<CLI::App*, const Cmd*> by_app;
  for (const Cmd& c : cmds) {
    CLI::App* s = app.add_subcommand(c.name, c.help);
    common(s);
    if (std::string(c.name) == "infer") {
      s->add_option("--input", o.input, "Comma-separated source token ids");
      s->add_option("--keywords", o.keywords, "Comma-separated keyword token ids");
    }
    if (std::string(c.name) == "evaluate") s->add_option("--data", o.data, "Evaluation corpus (JSONL)");
    by_app[s] = &c;
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  try {
    for (auto& [s, c] : by_app)
      if (s->parsed()) return c->run(o, out);
    return 2;
  } catch (const VerificationError& e) {
    err << "verification failed: " << e.what() << "\n";
    return 5;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const ArtifactError& e) {
    err << "artifact error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::out_of_range& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "artifact error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace mctg
