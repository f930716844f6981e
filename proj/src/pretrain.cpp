#include "mctg/pretrain.hpp"

#include <algorithm>
#include <cmath>

#include "mctg/errors.hpp"

namespace mctg {

namespace {
constexpr double kTriggerStd = 0.5;

std::vector<int> random_keywords(Rng& rng) {
  const int n = rng.uniform_int(1, 3);
  std::vector<int> k;
  while (static_cast<int>(k.size()) < n) {
    const int t = rng.uniform_int(vocab::kKeywordBegin, vocab::kKeywordEnd - 1);
    if (std::find(k.begin(), k.end(), t) == k.end()) k.push_back(t);
  }
  return k;
}
}  // namespace

TriggerCodebook TriggerCodebook::make(const ModelConfig& cfg, Rng& rng) {
  TriggerCodebook b;
  const std::size_t p = static_cast<std::size_t>(cfg.prompt_len);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  for (const AspectSpec& spec : default_aspects()) {
    std::vector<std::string> keys;
    if (spec.kind == AspectKind::kFreeForm) keys.push_back(spec.name);
    else
      for (const auto& v : spec.values) keys.push_back(spec.name + "=" + v);
    for (const auto& k : keys) {
      Matrix m(p, d);
      for (double& x : m.values()) x = rng.gaussian(0.0, kTriggerStd);
      b.codes.emplace(k, std::move(m));
    }
  }
  return b;
}

std::string TriggerCodebook::key(const std::string& aspect, const AspectValue& v) {
  return find_aspect(aspect).kind == AspectKind::kFreeForm ? aspect : aspect + "=" + to_string(v);
}

const Matrix& TriggerCodebook::code(const std::string& aspect, const AspectValue& v) const {
  auto it = codes.find(key(aspect, v));
  if (it == codes.end()) throw ConfigError("no trigger code for " + key(aspect, v));
  return it->second;
}

PretrainInput make_pretrain_input(const Example& e, const TriggerCodebook& book, Rng& rng,
                                  double jitter) {
  PretrainInput in;
  in.segments.segments.push_back(Segment{e.x, 0});
  // A categorical constraint text that carries no information about y.
  if (rng.uniform() < 0.5) {
    const AspectSpec& spec = default_aspects()[static_cast<std::size_t>(rng.uniform_int(0, 2))];
    const std::string& v = spec.values[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(spec.values.size()) - 1))];
    in.segments.segments.push_back(Segment{render_constraint(spec.name, v), spec.segment_id});
  }
  auto kw = e.aspects.find("KEYWORD");
  const int kw_seg = find_aspect("KEYWORD").segment_id;
  if (kw != e.aspects.end()) {
    in.segments.segments.push_back(Segment{render_constraint("KEYWORD", kw->second), kw_seg});
  } else if (rng.uniform() < 0.25) {
    // Keyword text without its trigger must not be copied.
    in.segments.segments.push_back(Segment{random_keywords(rng), kw_seg});
  }
  for (const auto& [name, value] : e.aspects) {
    Matrix m = book.code(name, value);
    if (jitter > 0.0)
      for (double& x : m.values()) x += rng.gaussian(0.0, jitter);
    in.trigger_rows.push_back(std::move(m));
  }
  // Fisher-Yates so the base sees triggers in every order.
  for (std::size_t i = in.trigger_rows.size(); i > 1; --i)
    std::swap(in.trigger_rows[i - 1], in.trigger_rows[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
  return in;
}

namespace {

Tensor encode_pretrain(Graph& g, const BoundModel& bm, const PretrainInput& in) {
  EncoderInjection inj;
  for (const Matrix& m : in.trigger_rows) inj.appended_rows.push_back(g.constant(m));
  return encode_input(bm, in.segments, inj.appended_rows.empty() ? nullptr : &inj);
}

}  // namespace

PretrainResult pretrain_base(std::span<const Example> corpus, const ModelConfig& cfg,
                             const PretrainSettings& settings, std::uint64_t seed,
                             const std::function<void(int, double)>& progress) {
  if (corpus.empty()) throw ConfigError("pretrain_base: empty corpus");
  if (settings.batch <= 0 || settings.steps < 0) throw ConfigError("pretrain_base: bad settings");
  Rng rng(seed);
  Rng init_rng = rng.fork(1);
  Rng batch_rng = rng.fork(2);
  Rng code_rng = rng.fork(3);
  PretrainResult res;
  res.model = BaseModel::init(cfg, init_rng);
  res.codebook = TriggerCodebook::make(cfg, code_rng);
  std::vector<Matrix*> params = res.model.parameters();
  Adam opt(params, settings.adam);
  const double inv_b = 1.0 / settings.batch;
  for (int step = 0; step < settings.steps; ++step) {
    opt.set_lr(warmup_cosine(settings.adam.lr, step, settings.warmup, settings.steps));
    Graph g;
    BoundModel bm = bind(g, res.model, true);
    Tensor total;
    for (int b = 0; b < settings.batch; ++b) {
      const Example& ex =
          corpus[static_cast<std::size_t>(batch_rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))];
      const PretrainInput in = make_pretrain_input(ex, res.codebook, batch_rng, settings.trigger_jitter);
      Tensor enc = encode_pretrain(g, bm, in);
      Tensor l = cross_entropy(decoder_forward(bm, decoder_inputs(ex.y), enc), decoder_labels(ex.y));
      total = total.valid() ? add(total, l) : l;
    }
    Tensor loss = scale(total, inv_b);
    const double lv = loss.item();
    if (!std::isfinite(lv)) throw NumericError("pretrain_base: loss diverged");
    res.loss_curve.push_back(lv);
    g.backward(loss);
    std::vector<Matrix> grads;
    grads.reserve(bm.leaves.size());
    for (const Tensor& t : bm.leaves) grads.push_back(t.grad());
    opt.step(grads);
    if (progress && settings.log_every > 0 && (step + 1) % settings.log_every == 0) progress(step + 1, lv);
  }
  res.model.frozen = true;
  return res;
}

double copy_token_accuracy(const BaseModel& m, std::span<const Example> data) {
  std::size_t correct = 0, total = 0;
  for (const Example& ex : data) {
    const int steps = std::min(static_cast<int>(ex.x.size()) + 2, m.config.max_len - 1);
    std::vector<int> out = greedy_decode(m, SegmentedInput{{Segment{ex.x, 0}}}, steps);
    if (static_cast<int>(out.size()) < steps) out.push_back(kEos);
    const auto ref = decoder_labels(ex.x);
    const std::size_t n = std::max(ref.size(), out.size());
    for (std::size_t i = 0; i < n; ++i)
      if (i < ref.size() && i < out.size() && ref[i] == out[i]) ++correct;
    total += n;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

Metrics triggered_accuracy(const BaseModel& m, const TriggerCodebook& book,
                           std::span<const Example> data, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<int>> outs;
  outs.reserve(data.size());
  for (const Example& ex : data) {
    Graph g;
    BoundModel bm = bind(g, m, false);
    const PretrainInput in = make_pretrain_input(ex, book, rng, 0.0);
    outs.push_back(greedy_decode(bm, encode_pretrain(g, bm, in), std::min(24, m.config.max_len - 1)));
  }
  return evaluate(outs, data);
}

}  // namespace mctg
