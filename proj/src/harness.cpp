#include "mctg/harness.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mctg/errors.hpp"

namespace mctg {

using json = nlohmann::json;

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Visits the keys of a JSON object, rejecting any not handled by `f`.
template <class F>
void for_keys(const json& j, const std::string& where, F&& f) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!f(it.key(), *it)) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <class T>
T get_as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<T>)
        if (v.get<long long>() < 0) throw ConfigError("");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config: bad value for '" + key + "'");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

std::string RunConfig::to_json() const {
  json j;
  j["model"] = json::parse(model.to_json());
  j["seed"] = seed;
  j["seeds"] = seeds;
  j["family"] = mctg::to_string(family);
  j["aspects"] = aspects;
  j["lengths"] = {{"min", lengths.min}, {"max", lengths.max}};
  j["pretrain"] = {{"steps", pretrain.steps},
                   {"batch", pretrain.batch},
                   {"lr", pretrain.lr},
                   {"warmup", pretrain.warmup},
                   {"trigger_jitter", pretrain.trigger_jitter},
                   {"corpus", pretrain.corpus},
                   {"aspect_prob", pretrain.aspect_prob},
                   {"eval", pretrain.eval}};
  j["plugin"] = {{"steps", plugin.steps},
                 {"batch", plugin.batch},
                 {"lr", plugin.lr},
                 {"warmup", plugin.warmup},
                 {"corpus", plugin.corpus}};
  j["joint"] = {{"corpus", joint.corpus}};
  j["eval"] = {{"examples", eval.examples},
               {"bound_examples", eval.bound_examples},
               {"max_decode", eval.max_decode}};
  j["gradcheck"] = {{"entries_per_param", gradcheck.entries_per_param},
                    {"step", gradcheck.step},
                    {"tol", gradcheck.tol}};
  j["out_dir"] = out_dir;
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig c;
  for_keys(j, "config", [&](const std::string& k, const json& v) {
    if (k == "model") c.model = ModelConfig::from_json(v.dump());
    else if (k == "seed") c.seed = get_as<std::uint64_t>(v, k);
    else if (k == "seeds") {
      if (!v.is_array()) throw ConfigError("config: seeds must be an array");
      c.seeds.clear();
      for (const json& s : v) c.seeds.push_back(get_as<std::uint64_t>(s, k));
    } else if (k == "family") c.family = parse_family(get_as<std::string>(v, k));
    else if (k == "aspects") {
      if (!v.is_array()) throw ConfigError("config: aspects must be an array");
      c.aspects.clear();
      for (const json& s : v) c.aspects.push_back(get_as<std::string>(s, k));
    } else if (k == "lengths") {
      for_keys(v, "config.lengths", [&](const std::string& kk, const json& vv) {
        if (kk == "min") c.lengths.min = get_as<int>(vv, kk);
        else if (kk == "max") c.lengths.max = get_as<int>(vv, kk);
        else return false;
        return true;
      });
    } else if (k == "pretrain") {
      for_keys(v, "config.pretrain", [&](const std::string& kk, const json& vv) {
        auto& p = c.pretrain;
        if (kk == "steps") p.steps = get_as<int>(vv, kk);
        else if (kk == "batch") p.batch = get_as<int>(vv, kk);
        else if (kk == "lr") p.lr = get_as<double>(vv, kk);
        else if (kk == "warmup") p.warmup = get_as<int>(vv, kk);
        else if (kk == "trigger_jitter") p.trigger_jitter = get_as<double>(vv, kk);
        else if (kk == "corpus") p.corpus = get_as<std::size_t>(vv, kk);
        else if (kk == "aspect_prob") p.aspect_prob = get_as<double>(vv, kk);
        else if (kk == "eval") p.eval = get_as<std::size_t>(vv, kk);
        else return false;
        return true;
      });
    } else if (k == "plugin") {
      for_keys(v, "config.plugin", [&](const std::string& kk, const json& vv) {
        auto& p = c.plugin;
        if (kk == "steps") p.steps = get_as<int>(vv, kk);
        else if (kk == "batch") p.batch = get_as<int>(vv, kk);
        else if (kk == "lr") p.lr = get_as<double>(vv, kk);
        else if (kk == "warmup") p.warmup = get_as<int>(vv, kk);
        else if (kk == "corpus") p.corpus = get_as<std::size_t>(vv, kk);
        else return false;
        return true;
      });
    } else if (k == "joint") {
      for_keys(v, "config.joint", [&](const std::string& kk, const json& vv) {
        if (kk == "corpus") c.joint.corpus = get_as<std::size_t>(vv, kk);
        else return false;
        return true;
      });
    } else if (k == "eval") {
      for_keys(v, "config.eval", [&](const std::string& kk, const json& vv) {
        if (kk == "examples") c.eval.examples = get_as<std::size_t>(vv, kk);
        else if (kk == "bound_examples") c.eval.bound_examples = get_as<std::size_t>(vv, kk);
        else if (kk == "max_decode") c.eval.max_decode = get_as<int>(vv, kk);
        else return false;
        return true;
      });
    } else if (k == "gradcheck") {
      for_keys(v, "config.gradcheck", [&](const std::string& kk, const json& vv) {
        if (kk == "entries_per_param") c.gradcheck.entries_per_param = get_as<std::size_t>(vv, kk);
        else if (kk == "step") c.gradcheck.step = get_as<double>(vv, kk);
        else if (kk == "tol") c.gradcheck.tol = get_as<double>(vv, kk);
        else return false;
        return true;
      });
    } else if (k == "out_dir") c.out_dir = get_as<std::string>(v, k);
    else return false;
    return true;
  });
  c.validate();
  return c;
}

void RunConfig::validate() const {
  model.validate();
  if (model.vocab_size != vocab::kSize)
    throw ConfigError("config: vocab_size must be " + std::to_string(vocab::kSize) + " for the synthetic task");
  if (lengths.min < 1 || lengths.max < lengths.min) throw ConfigError("config: bad lengths");
  if (pretrain.steps < 0 || pretrain.batch <= 0 || !(pretrain.lr > 0) || pretrain.warmup < 0 ||
      pretrain.trigger_jitter < 0 || pretrain.aspect_prob < 0 || pretrain.aspect_prob > 1)
    throw ConfigError("config: bad pretrain settings");
  if (plugin.steps < 0 || plugin.batch <= 0 || !(plugin.lr > 0) || plugin.warmup < 0 || plugin.corpus == 0)
    throw ConfigError("config: bad plugin settings");
  if (joint.corpus == 0 || eval.examples == 0) throw ConfigError("config: corpus sizes must be positive");
  if (eval.max_decode <= 0 || eval.max_decode >= model.max_len)
    throw ConfigError("config: max_decode must be in (0, max_len)");
  if (!(gradcheck.step > 0) || !(gradcheck.tol > 0)) throw ConfigError("config: bad gradcheck settings");
  for (const std::string& a : aspects) (void)AspectChoice::parse(a);
  if (seeds.empty()) throw ConfigError("config: seeds must not be empty");
}

std::string RunConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(json::parse(to_json()).dump())));
  return buf;
}

PretrainSettings RunConfig::pretrain_settings() const {
  PretrainSettings s;
  s.adam.lr = pretrain.lr;
  s.warmup = pretrain.warmup;
  s.trigger_jitter = pretrain.trigger_jitter;
  s.steps = pretrain.steps;
  s.batch = pretrain.batch;
  return s;
}

PluginTrainSettings RunConfig::plugin_settings() const {
  PluginTrainSettings s;
  s.adam.lr = plugin.lr;
  s.warmup = plugin.warmup;
  s.steps = plugin.steps;
  s.batch = plugin.batch;
  return s;
}

RunConfig load_run_config(const std::string& path) { return RunConfig::from_json(read_file(path)); }

std::uint64_t stream_seed(std::uint64_t seed, std::string_view tag) {
  Rng r(seed ^ fnv1a(tag));
  return r.next();
}

std::string plugin_stem(const std::string& aspect_label, Family family) {
  std::string s = aspect_label;
  for (char& c : s)
    if (c == '=' || c == '/' || c == ',' || c == ' ') c = '_';
  return s + "." + to_string(family);
}

// ---------------------------------------------------------------------------
// Timing

void TimingReport::add(TimingEntry e) {
  if (!(e.seconds >= 0.0)) throw ConfigError("timing: negative duration");
  entries.push_back(std::move(e));
}

double TimingReport::total() const {
  double t = 0.0;
  for (const auto& e : entries) t += e.seconds;
  return t;
}

double TimingReport::mean(std::string_view stage) const {
  double t = 0.0;
  std::size_t n = 0;
  for (const auto& e : entries)
    if (e.stage == stage) {
      t += e.seconds;
      ++n;
    }
  return n ? t / static_cast<double>(n) : 0.0;
}

std::string TimingReport::to_json() const {
  json arr = json::array();
  for (const auto& e : entries) arr.push_back({{"stage", e.stage}, {"label", e.label}, {"seconds", e.seconds}});
  return json{{"entries", arr}, {"total_seconds", total()}}.dump(2);
}

TimingReport TimingReport::from_json(const std::string& text) {
  TimingReport r;
  try {
    const json j = json::parse(text);
    for (const json& e : j.at("entries"))
      r.add({e.at("stage").get<std::string>(), e.at("label").get<std::string>(), e.at("seconds").get<double>()});
  } catch (const json::exception& e) {
    throw ArtifactError(std::string("timing report: ") + e.what());
  }
  return r;
}

void append_timing(const std::string& path, const TimingEntry& e) {
  TimingReport r;
  if (std::filesystem::exists(path)) r = TimingReport::from_json(read_file(path));
  r.add(e);
  write_file(path, r.to_json());
}

// ---------------------------------------------------------------------------
// Pipeline stages

std::vector<Example> pretrain_corpus(const RunConfig& cfg, std::uint64_t seed) {
  return gen_pretrain_corpus(cfg.pretrain.corpus, cfg.lengths, stream_seed(seed, "pretrain-corpus"),
                             cfg.pretrain.aspect_prob);
}

PretrainResult run_pretrain(const RunConfig& cfg, std::uint64_t seed,
                            const std::function<void(int, double)>& progress) {
  const auto corpus = pretrain_corpus(cfg, seed);
  return pretrain_base(corpus, cfg.model, cfg.pretrain_settings(), stream_seed(seed, "pretrain"), progress);
}

std::vector<Example> plugin_corpus(const RunConfig& cfg, const AspectChoice& aspect, std::uint64_t seed) {
  return gen_single_aspect(aspect, cfg.plugin.corpus, cfg.lengths,
                           stream_seed(seed, "plugin-corpus:" + aspect.label()));
}

PluginTrainResult run_train_plugin(const BaseModel& m, const RunConfig& cfg, const AspectChoice& aspect,
                                   Family family, std::uint64_t seed) {
  const auto corpus = plugin_corpus(cfg, aspect, seed);
  return train_plugin(m, corpus, aspect, family, cfg.plugin_settings(),
                      stream_seed(seed, "plugin:" + aspect.label()));
}

std::vector<Example> joint_corpus(const RunConfig& cfg, std::span<const AspectChoice> aspects,
                                  std::uint64_t seed) {
  std::string tag = "joint-corpus";
  for (const auto& a : aspects) tag += ":" + a.label();
  return gen_multi_aspect(aspects, cfg.joint.corpus, cfg.lengths, stream_seed(seed, tag));
}

PluginTrainResult run_joint_train(const BaseModel& m, const RunConfig& cfg, std::span<const Plugin> separate,
                                  std::uint64_t seed) {
  std::vector<AspectChoice> choices;
  std::string tag = "joint";
  for (const Plugin& p : separate) {
    choices.push_back(p.choice());
    tag += ":" + p.aspect;
  }
  const auto corpus = joint_corpus(cfg, choices, seed);
  return joint_train_plugins(m, corpus, std::vector<Plugin>(separate.begin(), separate.end()),
                             cfg.plugin_settings(), stream_seed(seed, tag));
}

std::vector<Example> single_eval_set(const RunConfig& cfg, const AspectChoice& aspect, std::uint64_t seed,
                                     std::size_t n) {
  return gen_single_aspect(aspect, n, cfg.lengths, stream_seed(seed, "eval:" + aspect.label()));
}

std::vector<Example> multi_eval_set(const RunConfig& cfg, std::span<const AspectChoice> aspects,
                                    std::uint64_t seed, std::size_t n) {
  std::string tag = "eval-multi";
  for (const auto& a : aspects) tag += ":" + a.label();
  return gen_multi_aspect(aspects, n, cfg.lengths, stream_seed(seed, tag));
}

// ---------------------------------------------------------------------------
// Gradient check suite

std::size_t GradCheckSuite::entries() const {
  std::size_t n = 0;
  for (const auto& c : cases) n += c.report.entries_checked;
  return n;
}

double GradCheckSuite::max_rel_error() const {
  double e = 0.0;
  for (const auto& c : cases) e = std::max(e, c.report.max_rel_error);
  return e;
}

bool GradCheckSuite::passed() const {
  if (cases.empty()) return false;
  for (const auto& c : cases)
    if (!c.report.passed) return false;
  return true;
}

GradCheckSuite run_gradcheck_suite(const RunConfig& cfg, std::uint64_t seed) {
  Rng rng(stream_seed(seed, "gradcheck"));
  Rng init_rng = rng.fork(1);
  BaseModel m = BaseModel::init(cfg.model, init_rng);
  const AspectChoice shift = AspectChoice::parse("SHIFT=+1");
  const AspectChoice keyword = AspectChoice::parse("KEYWORD");
  const AspectChoice both[] = {shift, keyword};
  const Example ex = gen_multi_aspect(both, 1, cfg.lengths, stream_seed(seed, "gradcheck-data"))[0];
  const auto dec_in = decoder_inputs(ex.y);
  const auto labels = decoder_labels(ex.y);
  const double step = cfg.gradcheck.step, tol = cfg.gradcheck.tol;
  const std::size_t per = cfg.gradcheck.entries_per_param;
  GradCheckSuite suite;

  // Full stack: every base parameter, input with a constraint segment.
  {
    SegmentedInput in;
    in.segments.push_back(Segment{ex.x, 0});
    in.segments.push_back(Segment{render_constraint("SHIFT", std::string("+1")), find_aspect("SHIFT").segment_id});
    auto loss = [&](Graph& g) {
      BoundModel bm = bind(g, m, true);
      return std::make_pair(cross_entropy(decoder_forward(bm, dec_in, encode_input(bm, in)), labels), bm.leaves);
    };
    Graph g;
    auto [l, leaves] = loss(g);
    g.backward(l);
    std::vector<Matrix> analytic;
    for (const Tensor& t : leaves) analytic.push_back(t.grad());
    const LossBuilder f = [&](Graph& gg, std::span<const Tensor>) { return loss(gg).first; };
    auto params = m.parameters();
    suite.cases.push_back({"base", grad_check_against(f, params, analytic, step, tol, per)});
  }

  // Plugin families: two plugins on the frozen base.
  BaseModel frozen = m;
  frozen.frozen = true;
  for (Family fam : {Family::kPrompt, Family::kPrefix, Family::kGated}) {
    Rng prng = rng.fork(10 + static_cast<std::uint64_t>(fam));
    std::vector<Plugin> ps{Plugin::init(shift, fam, cfg.model, prng), Plugin::init(keyword, fam, cfg.model, prng)};
    // Move away from the small initialization so gates and prompts matter.
    for (Plugin& p : ps)
      for (Matrix* x : p.parameters())
        for (double& v : x->values()) v = prng.gaussian(0.0, 0.3);
    PluginCombo combo = combine_plugins(ps);
    auto loss = [&](Graph& g) {
      BoundModel bm = bind(g, frozen, false);
      std::vector<BoundPlugin> bound;
      std::vector<Tensor> leaves;
      for (const Plugin& p : combo.plugins) {
        bound.push_back(bind_plugin(g, p, true));
        leaves.insert(leaves.end(), bound.back().leaves.begin(), bound.back().leaves.end());
      }
      Tensor enc = encode_with_plugins(bm, ex.x, combo, bound, ex.aspects);
      return std::make_pair(cross_entropy(decoder_forward(bm, dec_in, enc), labels), leaves);
    };
    Graph g;
    auto [l, leaves] = loss(g);
    g.backward(l);
    std::vector<Matrix> analytic;
    for (const Tensor& t : leaves) analytic.push_back(t.grad());
    std::vector<Matrix*> params;
    for (Plugin& p : combo.plugins)
      for (Matrix* x : p.parameters()) params.push_back(x);
    const LossBuilder f = [&](Graph& gg, std::span<const Tensor>) { return loss(gg).first; };
    suite.cases.push_back({to_string(fam), grad_check_against(f, params, analytic, step, tol, per)});
  }
  return suite;
}

// ---------------------------------------------------------------------------
// Bound analysis

BoundRun run_bound_analysis(const BaseModel& m, std::span<const Example> eval, const Plugin& pi,
                            const Plugin& pj, const Plugin& joint_i, const Plugin& joint_j) {
  BoundRun r;
  bool any = false;
  for (std::size_t e = 0; e < eval.size(); ++e) {
    const PairTraces t = trace_pair(m, eval[e], pi, pj, joint_i, joint_j);
    for (int l = 1; l <= m.config.enc_layers; ++l)
      for (std::size_t q = 0; q < eval[e].x.size(); ++q) {
        for (int h = 0; h < m.config.heads; ++h) {
          const BoundEstimate b = single_head_bound(t, l, h, q);
          r.example.push_back(e);
          r.single.push_back(b);
          if (!b.assumption_holds) continue;
          ++r.assumption_count;
          if (!b.mass_conditions) continue;
          ++r.conditional_count;
          const double gap = b.rhs - b.lhs;
          r.worst_conditional_gap = any ? std::max(r.worst_conditional_gap, gap) : gap;
          any = true;
          if (b.lhs < b.rhs - 1e-8) ++r.conditional_violations;
        }
        r.multi_example.push_back(e);
        r.multi.push_back(multi_head_bound(m, t, l, q));
      }
  }
  return r;
}

std::string bound_csv(const BoundRun& r) {
  std::string out = "layer,head,query_pos,lhs,rhs,assumption,margin\n";
  for (const BoundEstimate& b : r.single)
    out += std::to_string(b.layer) + "," + std::to_string(b.head) + "," + std::to_string(b.query_pos) + "," +
           fmt(b.lhs) + "," + fmt(b.rhs) + "," + (b.assumption_holds ? "1" : "0") + "," + fmt(b.margin()) + "\n";
  return out;
}

std::string bound_detail_csv(const BoundRun& r) {
  std::string out =
      "example,layer,head,query_pos,lhs,rhs,rhs_centered,assumption,assumption_margin,mass_conditions,"
      "ti_minus_alpha,tj_minus_beta,delta_i_norm,delta_j_norm\n";
  for (std::size_t k = 0; k < r.single.size(); ++k) {
    const BoundEstimate& b = r.single[k];
    out += std::to_string(r.example[k]) + "," + std::to_string(b.layer) + "," + std::to_string(b.head) + "," +
           std::to_string(b.query_pos) + "," + fmt(b.lhs) + "," + fmt(b.rhs) + "," + fmt(b.rhs_centered) + "," +
           (b.assumption_holds ? "1" : "0") + "," + fmt(b.assumption_margin) + "," +
           (b.mass_conditions ? "1" : "0") + "," + fmt(b.ti_minus_alpha) + "," + fmt(b.tj_minus_beta) + "," +
           fmt(b.delta_i_norm) + "," + fmt(b.delta_j_norm) + "\n";
  }
  return out;
}

std::string bound_multi_csv(const BoundRun& r) {
  std::string out = "example,layer,query_pos,lhs,approx,approx_residual,rhs,lambda_o,heads,rank_deficient,head_terms\n";
  for (std::size_t k = 0; k < r.multi.size(); ++k) {
    const MultiHeadBound& b = r.multi[k];
    std::string terms;
    for (std::size_t h = 0; h < b.head_terms.size(); ++h) terms += (h ? ";" : "") + fmt(b.head_terms[h]);
    out += std::to_string(r.multi_example[k]) + "," + std::to_string(b.layer) + "," + std::to_string(b.query_pos) +
           "," + fmt(b.lhs) + "," + fmt(b.approx) + "," + fmt(b.approx_residual) + "," + fmt(b.rhs) + "," +
           fmt(b.lambda_o) + "," + std::to_string(b.heads) + "," + (b.rank_deficient ? "1" : "0") + "," + terms +
           "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("missing file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ArtifactError("cannot write " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ArtifactError("write failed for " + path);
}

}  // namespace mctg
