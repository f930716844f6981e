#include "mctg/plugins.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "mctg/errors.hpp"

namespace mctg {

std::string to_string(Family f) {
  switch (f) {
    case Family::kPrompt: return "prompt";
    case Family::kPrefix: return "prefix";
    case Family::kGated: return "gated";
  }
  return "?";
}

Family parse_family(const std::string& s) {
  if (s == "prompt") return Family::kPrompt;
  if (s == "prefix") return Family::kPrefix;
  if (s == "gated") return Family::kGated;
  throw ConfigError("unknown plugin family '" + s + "' (expected prompt, prefix or gated)");
}

namespace {

Matrix gaussian_matrix(std::size_t r, std::size_t c, double sd, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.gaussian(0.0, sd);
  return m;
}

constexpr double kInitStd = 0.02;

std::string layer_name(std::size_t l, const char* what) {
  return "layer" + std::to_string(l + 1) + "." + what;
}

std::string head_name(std::size_t l, std::size_t h, const char* what) {
  return "layer" + std::to_string(l + 1) + ".head" + std::to_string(h) + "." + what;
}

template <class P, class F>
void walk_plugin(P& p, F&& f) {
  if (p.family == Family::kPrefix) {
    for (std::size_t l = 0; l < p.prefix_k.size(); ++l)
      for (std::size_t h = 0; h < p.prefix_k[l].size(); ++h) {
        f(head_name(l, h, "k"), p.prefix_k[l][h]);
        f(head_name(l, h, "v"), p.prefix_v[l][h]);
      }
    return;
  }
  f(std::string("prompt"), p.prompt);
  for (std::size_t l = 0; l < p.layer_p.size(); ++l) {
    f(layer_name(l, "p"), p.layer_p[l]);
    f(layer_name(l, "g"), p.gates[l]);
  }
}

/// Value an unpinned plugin reads from an example.
const AspectValue& value_for(const AspectChoice& c, const std::map<std::string, AspectValue>& values) {
  if (c.value) return *c.value;
  auto it = values.find(c.name);
  if (it == values.end()) throw ConfigError("no value given for aspect " + c.name);
  return it->second;
}

}  // namespace

Plugin Plugin::init(const AspectChoice& aspect, Family family, const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const AspectSpec& spec = find_aspect(aspect.name);
  Plugin p;
  p.aspect = aspect.label();
  p.family = family;
  if (spec.kind == AspectKind::kFreeForm) {
    p.constraint_template = "keywords";
  } else if (family == Family::kPrefix) {
    if (!aspect.value)
      throw ConfigError("prefix plugins for categorical aspect " + aspect.name +
                        " need a value (NAME=VALUE)");
    p.constraint_template = "none";
  } else {
    p.constraint_template = "[ASPECT,VALUE]";
  }
  const std::size_t pl = static_cast<std::size_t>(cfg.prompt_len);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
  const std::size_t L = static_cast<std::size_t>(cfg.enc_layers);
  const std::size_t K = static_cast<std::size_t>(cfg.heads);
  if (family == Family::kPrefix) {
    p.prefix_k.resize(L);
    p.prefix_v.resize(L);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < K; ++h) {
        p.prefix_k[l].push_back(gaussian_matrix(pl, hd, kInitStd, rng));
        p.prefix_v[l].push_back(gaussian_matrix(pl, hd, kInitStd, rng));
      }
    return p;
  }
  p.prompt = gaussian_matrix(pl, d, kInitStd, rng);
  if (family == Family::kGated) {
    for (std::size_t l = 0; l < L; ++l) {
      p.layer_p.push_back(gaussian_matrix(pl, d, kInitStd, rng));
      p.gates.emplace_back(pl, d);
    }
  }
  return p;
}

std::string Plugin::aspect_name() const { return aspect.substr(0, aspect.find('=')); }

void Plugin::visit(const std::function<void(const std::string&, Matrix&)>& f) { walk_plugin(*this, f); }

void Plugin::visit(const std::function<void(const std::string&, const Matrix&)>& f) const {
  walk_plugin(*this, f);
}

std::vector<Matrix*> Plugin::parameters() {
  std::vector<Matrix*> out;
  visit([&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

void Plugin::check_shapes(const ModelConfig& cfg) const {
  const std::size_t pl = static_cast<std::size_t>(cfg.prompt_len);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
  const std::size_t L = static_cast<std::size_t>(cfg.enc_layers);
  const std::size_t K = static_cast<std::size_t>(cfg.heads);
  auto need = [&](bool ok, const std::string& what) {
    if (!ok) throw ShapeError("plugin " + aspect + ": " + what + " does not match the model config");
  };
  if (family == Family::kPrefix) {
    need(prefix_k.size() == L && prefix_v.size() == L, "prefix layer count");
    for (std::size_t l = 0; l < L; ++l) {
      need(prefix_k[l].size() == K && prefix_v[l].size() == K, "prefix head count");
      for (std::size_t h = 0; h < K; ++h)
        need(prefix_k[l][h].rows() == pl && prefix_k[l][h].cols() == hd &&
                 prefix_v[l][h].rows() == pl && prefix_v[l][h].cols() == hd,
             "prefix shape");
    }
    return;
  }
  need(prompt.rows() == pl && prompt.cols() == d, "prompt shape");
  if (family == Family::kGated) {
    need(layer_p.size() == L && gates.size() == L, "gated layer count");
    for (std::size_t l = 0; l < L; ++l)
      need(layer_p[l].rows() == pl && layer_p[l].cols() == d && gates[l].rows() == pl &&
               gates[l].cols() == d,
           "gated layer shape");
  }
}

Family PluginCombo::family() const {
  if (plugins.empty()) throw ConfigError("empty plugin combination has no family");
  return plugins.front().family;
}

PluginCombo combine_plugins(std::span<const Plugin> plugins) {
  PluginCombo c;
  std::set<std::string> names;
  for (const Plugin& p : plugins) {
    if (!c.plugins.empty() && p.family != c.plugins.front().family)
      throw ConfigError("cannot combine " + to_string(p.family) + " plugin with " +
                        to_string(c.plugins.front().family) + " plugins");
    if (!names.insert(p.aspect_name()).second)
      throw ConfigError("aspect " + p.aspect_name() + " appears twice in the combination");
    c.plugins.push_back(p);
  }
  return c;
}

SegmentedInput build_input(std::span<const int> x, const PluginCombo& combo,
                           const std::map<std::string, AspectValue>& values, const ModelConfig& cfg,
                           PluginLayout* layout) {
  if (combo.plugins.size() + 1 > static_cast<std::size_t>(cfg.segments_max))
    throw ConfigError("too many plugins for segments_max");
  SegmentedInput in;
  in.segments.push_back(Segment{std::vector<int>(x.begin(), x.end()), 0});
  PluginLayout lay;
  lay.x_len = x.size();
  std::size_t off = x.size();
  for (const Plugin& p : combo.plugins) {
    lay.c_begin.push_back(off);
    if (p.uses_constraint_text()) {
      const AspectChoice c = p.choice();
      std::vector<int> toks = render_constraint(c.name, value_for(c, values));
      lay.c_len.push_back(toks.size());
      off += toks.size();
      in.segments.push_back(Segment{std::move(toks), find_aspect(c.name).segment_id});
    } else {
      lay.c_len.push_back(0);
    }
  }
  lay.p = static_cast<std::size_t>(cfg.prompt_len);
  for (const Plugin& p : combo.plugins) {
    lay.row_begin.push_back(off);
    off += p.input_rows();
  }
  lay.total = off;
  if (lay.total > static_cast<std::size_t>(cfg.max_len))
    throw ShapeError("plugged input has " + std::to_string(lay.total) + " rows, max_len is " +
                     std::to_string(cfg.max_len));
  if (layout) *layout = std::move(lay);
  return in;
}

BoundPlugin bind_plugin(Graph& g, const Plugin& p, bool trainable) {
  BoundPlugin b;
  if (p.family == Family::kPrefix) {
    b.prefix.resize(p.prefix_k.size());
    for (std::size_t l = 0; l < p.prefix_k.size(); ++l)
      for (std::size_t h = 0; h < p.prefix_k[l].size(); ++h) {
        HeadPrefix hp{g.parameter(p.prefix_k[l][h], trainable), g.parameter(p.prefix_v[l][h], trainable)};
        b.leaves.push_back(hp.keys);
        b.leaves.push_back(hp.values);
        b.prefix[l].push_back(hp);
      }
    return b;
  }
  b.prompt = g.parameter(p.prompt, trainable);
  b.leaves.push_back(b.prompt);
  for (std::size_t l = 0; l < p.layer_p.size(); ++l) {
    b.layer_p.push_back(g.parameter(p.layer_p[l], trainable));
    b.gates.push_back(g.parameter(p.gates[l], trainable));
    b.leaves.push_back(b.layer_p.back());
    b.leaves.push_back(b.gates.back());
  }
  return b;
}

Tensor apply_gating(Tensor a, const PluginLayout& layout, std::span<const BoundPlugin> plugins,
                    int layer) {
  if (plugins.size() != layout.row_begin.size())
    throw ShapeError("apply_gating: layout and plugin count differ");
  if (layer < 1) throw ShapeError("apply_gating: layers are 1-based");
  const std::size_t j = static_cast<std::size_t>(layer - 1);
  std::vector<Tensor> parts;
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < plugins.size(); ++i) {
    const BoundPlugin& b = plugins[i];
    if (j >= b.gates.size()) throw ConfigError("apply_gating: plugin is not gated");
    const std::size_t rb = layout.row_begin[i];
    if (rb < cursor || rb + layout.p > a.rows()) throw ShapeError("apply_gating: bad plugin rows");
    if (rb > cursor) parts.push_back(slice_rows(a, cursor, rb - cursor));
    Tensor ap = slice_rows(a, rb, layout.p);
    parts.push_back(hadamard(sigmoid(b.gates[j]), add(ap, b.layer_p[j])));
    cursor = rb + layout.p;
  }
  if (cursor < a.rows()) parts.push_back(slice_rows(a, cursor, a.rows() - cursor));
  return concat_rows(parts);
}

Tensor encode_with_plugins(const BoundModel& bm, std::span<const int> x, const PluginCombo& combo,
                           std::span<const BoundPlugin> bound,
                           const std::map<std::string, AspectValue>& values, ActivationTrace* trace,
                           PluginLayout* layout) {
  if (bound.size() != combo.plugins.size()) throw ShapeError("encode_with_plugins: binding count mismatch");
  const ModelConfig& cfg = bm.model->config;
  for (const Plugin& p : combo.plugins) p.check_shapes(cfg);
  PluginLayout lay;
  const SegmentedInput in = build_input(x, combo, values, cfg, &lay);
  if (combo.empty()) {
    if (layout) *layout = lay;
    return encode_input(bm, in, nullptr, trace);
  }
  EncoderInjection inj;
  const Family fam = combo.family();
  if (fam == Family::kPrefix) {
    inj.prefixes.resize(static_cast<std::size_t>(cfg.enc_layers));
    for (std::size_t l = 0; l < inj.prefixes.size(); ++l)
      for (int h = 0; h < cfg.heads; ++h) {
        std::vector<Tensor> ks, vs;
        for (const BoundPlugin& b : bound) {
          ks.push_back(b.prefix[l][static_cast<std::size_t>(h)].keys);
          vs.push_back(b.prefix[l][static_cast<std::size_t>(h)].values);
        }
        if (ks.size() == 1) inj.prefixes[l].push_back(HeadPrefix{ks[0], vs[0]});
        else inj.prefixes[l].push_back(HeadPrefix{concat_rows(ks), concat_rows(vs)});
      }
  } else {
    for (const BoundPlugin& b : bound) inj.appended_rows.push_back(b.prompt);
    if (fam == Family::kGated)
      inj.post_attention = [&lay, bound](int layer, Tensor a) { return apply_gating(a, lay, bound, layer); };
  }
  Tensor out = encode_input(bm, in, &inj, trace);
  if (layout) *layout = lay;
  return out;
}

PluggedForward forward_with_plugins(const BaseModel& m, const PluginCombo& combo,
                                    std::span<const int> x, std::span<const int> y,
                                    const std::map<std::string, AspectValue>& values, bool trace) {
  Graph g;
  BoundModel bm = bind(g, m, false);
  std::vector<BoundPlugin> bound;
  for (const Plugin& p : combo.plugins) bound.push_back(bind_plugin(g, p, false));
  PluggedForward out;
  Tensor enc = encode_with_plugins(bm, x, combo, bound, values, trace ? &out.trace : nullptr, &out.layout);
  out.logits = decoder_forward(bm, decoder_inputs(y), enc).value();
  return out;
}

std::vector<int> decode_with_plugins(const BaseModel& m, const PluginCombo& combo,
                                     std::span<const int> x,
                                     const std::map<std::string, AspectValue>& values, int max_steps) {
  Graph g;
  BoundModel bm = bind(g, m, false);
  std::vector<BoundPlugin> bound;
  for (const Plugin& p : combo.plugins) bound.push_back(bind_plugin(g, p, false));
  Tensor enc = encode_with_plugins(bm, x, combo, bound, values);
  return greedy_decode(bm, enc, max_steps);
}

std::vector<std::vector<int>> decode_corpus(const BaseModel& m, const PluginCombo& combo,
                                            std::span<const Example> data, int max_steps) {
  std::vector<std::vector<int>> out;
  out.reserve(data.size());
  for (const Example& e : data) out.push_back(decode_with_plugins(m, combo, e.x, e.aspects, max_steps));
  return out;
}

namespace {

void check_corpus_covers(std::span<const Example> corpus, const std::vector<Plugin>& plugins) {
  if (corpus.empty()) throw ConfigError("plugin training: empty corpus");
  for (const Plugin& p : plugins) {
    const AspectChoice c = p.choice();
    for (const Example& e : corpus) {
      auto it = e.aspects.find(c.name);
      if (it == e.aspects.end())
        throw ConfigError("plugin training: example lacks a label for aspect " + c.name);
      if (c.value && it->second != *c.value)
        throw ConfigError("plugin training: plugin " + p.aspect + " given an example with " + c.name +
                          "=" + to_string(it->second));
    }
  }
}

PluginTrainResult optimize(const BaseModel& m, std::span<const Example> corpus,
                           std::vector<Plugin> plugins, const PluginTrainSettings& settings,
                           Rng& batch_rng, const std::function<void(int, double)>& progress) {
  if (settings.batch <= 0 || settings.steps < 0) throw ConfigError("plugin training: bad settings");
  check_corpus_covers(corpus, plugins);
  const auto t0 = std::chrono::steady_clock::now();
  PluginCombo combo = combine_plugins(plugins);
  for (const Plugin& p : combo.plugins) p.check_shapes(m.config);
  std::vector<Matrix*> params;
  for (Plugin& p : combo.plugins)
    for (Matrix* x : p.parameters()) params.push_back(x);
  Adam opt(params, settings.adam);
  PluginTrainResult res;
  const double inv_b = 1.0 / settings.batch;
  for (int step = 0; step < settings.steps; ++step) {
    opt.set_lr(warmup_cosine(settings.adam.lr, step, settings.warmup, settings.steps));
    Graph g;
    BoundModel bm = bind(g, m, false);
    std::vector<BoundPlugin> bound;
    for (const Plugin& p : combo.plugins) bound.push_back(bind_plugin(g, p, true));
    Tensor total;
    for (int b = 0; b < settings.batch; ++b) {
      const Example& ex =
          corpus[static_cast<std::size_t>(batch_rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))];
      Tensor enc = encode_with_plugins(bm, ex.x, combo, bound, ex.aspects);
      Tensor l = cross_entropy(decoder_forward(bm, decoder_inputs(ex.y), enc), decoder_labels(ex.y));
      total = total.valid() ? add(total, l) : l;
    }
    Tensor loss = scale(total, inv_b);
    const double lv = loss.item();
    if (!std::isfinite(lv)) throw NumericError("plugin training: loss diverged");
    res.loss_curve.push_back(lv);
    g.backward(loss);
    std::vector<Matrix> grads;
    grads.reserve(params.size());
    for (const BoundPlugin& b : bound)
      for (const Tensor& t : b.leaves) grads.push_back(t.grad());
    opt.step(grads);
    if (progress && settings.log_every > 0 && (step + 1) % settings.log_every == 0) progress(step + 1, lv);
  }
  res.plugins = std::move(combo.plugins);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace

PluginTrainResult train_plugin(const BaseModel& m, std::span<const Example> corpus,
                               const AspectChoice& aspect, Family family,
                               const PluginTrainSettings& settings, std::uint64_t seed,
                               const std::function<void(int, double)>& progress) {
  Rng rng(seed);
  Rng init_rng = rng.fork(1);
  Rng batch_rng = rng.fork(2);
  std::vector<Plugin> start{Plugin::init(aspect, family, m.config, init_rng)};
  return optimize(m, corpus, std::move(start), settings, batch_rng, progress);
}

PluginTrainResult joint_train_plugins(const BaseModel& m, std::span<const Example> corpus,
                                      std::vector<Plugin> start, const PluginTrainSettings& settings,
                                      std::uint64_t seed,
                                      const std::function<void(int, double)>& progress) {
  if (start.empty()) throw ConfigError("joint training needs at least one plugin");
  Rng rng(seed);
  (void)rng.fork(1);  // keeps the batch stream aligned with train_plugin
  Rng batch_rng = rng.fork(2);
  return optimize(m, corpus, std::move(start), settings, batch_rng, progress);
}

namespace {
constexpr char kPluginMagic[] = "MCTGP1";
}

std::string serialize_plugin(const Plugin& p) {
  std::ostringstream os(std::ios::binary);
  os.write(kPluginMagic, 6);
  write_string(os, p.aspect);
  write_string(os, to_string(p.family));
  write_string(os, p.constraint_template);
  const std::size_t layers = p.family == Family::kPrefix ? p.prefix_k.size() : p.layer_p.size();
  const std::size_t heads = p.family == Family::kPrefix && !p.prefix_k.empty() ? p.prefix_k[0].size() : 0;
  write_u32(os, static_cast<std::uint32_t>(layers));
  write_u32(os, static_cast<std::uint32_t>(heads));
  std::uint32_t count = 0;
  p.visit([&](const std::string&, const Matrix&) { ++count; });
  write_u32(os, count);
  p.visit([&](const std::string& name, const Matrix& m) { write_block(os, name, m); });
  return os.str();
}

Plugin deserialize_plugin(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[6];
  if (!is.read(magic, 6) || std::memcmp(magic, kPluginMagic, 6) != 0)
    throw ArtifactError("not a plugin file (bad magic)");
  Plugin p;
  p.aspect = read_string(is);
  try {
    (void)p.choice();
    p.family = parse_family(read_string(is));
  } catch (const ConfigError& e) {
    throw ArtifactError(std::string("plugin header: ") + e.what());
  }
  p.constraint_template = read_string(is);
  const std::uint32_t layers = read_u32(is), heads = read_u32(is), count = read_u32(is);
  if (layers > 1024 || heads > 1024) throw ArtifactError("implausible plugin dimensions");
  if (p.family == Family::kPrefix) {
    p.prefix_k.assign(layers, std::vector<Matrix>(heads));
    p.prefix_v.assign(layers, std::vector<Matrix>(heads));
  } else if (p.family == Family::kGated) {
    p.layer_p.resize(layers);
    p.gates.resize(layers);
  }
  std::uint32_t seen = 0;
  p.visit([&](const std::string& name, Matrix& m) {
    m = read_block(is, name);
    ++seen;
  });
  if (seen != count) throw ArtifactError("plugin block count mismatch");
  if (is.peek() != std::char_traits<char>::eof()) throw ArtifactError("trailing bytes in plugin file");
  return p;
}

void save_plugin(const Plugin& p, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("cannot write " + path);
  const std::string b = serialize_plugin(p);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

Plugin load_plugin(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("missing plugin file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_plugin(ss.str());
}

}  // namespace mctg
