#include "mctg/transformer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace mctg {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model config: ") + name + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(heads, "heads");
  positive(enc_layers, "enc_layers");
  positive(dec_layers, "dec_layers");
  positive(max_len, "max_len");
  positive(prompt_len, "prompt_len");
  positive(segments_max, "segments_max");
  positive(ffn_mult, "ffn_mult");
  if (d_model % heads != 0) throw ConfigError("model config: d_model must be divisible by heads");
  if (segments_max < 2) throw ConfigError("model config: segments_max must be >= 2");
}

std::string ModelConfig::to_json() const {
  json j = {{"vocab_size", vocab_size}, {"d_model", d_model},   {"heads", heads},
            {"enc_layers", enc_layers}, {"dec_layers", dec_layers}, {"max_len", max_len},
            {"prompt_len", prompt_len}, {"segments_max", segments_max}, {"ffn_mult", ffn_mult}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
  ModelConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (!it->is_number_integer()) throw ConfigError("model config: " + k + " must be an integer");
    const int v = it->get<int>();
    if (k == "vocab_size") c.vocab_size = v;
    else if (k == "d_model") c.d_model = v;
    else if (k == "heads") c.heads = v;
    else if (k == "enc_layers") c.enc_layers = v;
    else if (k == "dec_layers") c.dec_layers = v;
    else if (k == "max_len") c.max_len = v;
    else if (k == "prompt_len") c.prompt_len = v;
    else if (k == "segments_max") c.segments_max = v;
    else if (k == "ffn_mult") c.ffn_mult = v;
    else throw ConfigError("model config: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// BaseModel

namespace {

// Single source of truth for parameter order; works on BaseModel and BoundModel.
template <class M, class F>
void walk(M& m, F&& f) {
  f(std::string("tok_emb"), m.tok_emb);
  f(std::string("pos_emb"), m.pos_emb);
  f(std::string("seg_emb"), m.seg_emb);
  auto attn = [&f](const std::string& p, auto& a) {
    f(p + "wq", a.wq);
    f(p + "wk", a.wk);
    f(p + "wv", a.wv);
    f(p + "wo", a.wo);
  };
  for (std::size_t i = 0; i < m.enc.size(); ++i) {
    const std::string p = "enc." + std::to_string(i) + ".";
    auto& l = m.enc[i];
    attn(p + "attn.", l.attn);
    f(p + "ln1_g", l.ln1_g);
    f(p + "ln1_b", l.ln1_b);
    f(p + "w1", l.w1);
    f(p + "w2", l.w2);
    f(p + "ln2_g", l.ln2_g);
    f(p + "ln2_b", l.ln2_b);
  }
  for (std::size_t i = 0; i < m.dec.size(); ++i) {
    const std::string p = "dec." + std::to_string(i) + ".";
    auto& l = m.dec[i];
    attn(p + "self.", l.self_attn);
    f(p + "ln1_g", l.ln1_g);
    f(p + "ln1_b", l.ln1_b);
    attn(p + "cross.", l.cross_attn);
    f(p + "ln2_g", l.ln2_g);
    f(p + "ln2_b", l.ln2_b);
    f(p + "w1", l.w1);
    f(p + "w2", l.w2);
    f(p + "ln3_g", l.ln3_g);
    f(p + "ln3_b", l.ln3_b);
  }
  f(std::string("out"), m.out);
}

Matrix gaussian_matrix(std::size_t r, std::size_t c, double sd, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.gaussian(0.0, sd);
  return m;
}

AttentionWeights init_attention(int d, Rng& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  return {gaussian_matrix(d, d, sd, rng), gaussian_matrix(d, d, sd, rng),
          gaussian_matrix(d, d, sd, rng), gaussian_matrix(d, d, sd, rng)};
}

}  // namespace

BaseModel BaseModel::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto f = static_cast<std::size_t>(cfg.ffn_dim());
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_f = 1.0 / std::sqrt(static_cast<double>(f));
  BaseModel m;
  m.config = cfg;
  m.tok_emb = gaussian_matrix(cfg.vocab_size, d, 0.5, rng);
  m.pos_emb = gaussian_matrix(cfg.max_len, d, 0.5, rng);
  m.seg_emb = gaussian_matrix(cfg.segments_max, d, 0.5, rng);
  for (int i = 0; i < cfg.enc_layers; ++i) {
    EncoderLayerWeights l;
    l.attn = init_attention(cfg.d_model, rng);
    l.ln1_g = Matrix(1, d, 1.0);
    l.ln1_b = Matrix(1, d);
    l.w1 = gaussian_matrix(d, f, sd_d, rng);
    l.w2 = gaussian_matrix(f, d, sd_f, rng);
    l.ln2_g = Matrix(1, d, 1.0);
    l.ln2_b = Matrix(1, d);
    m.enc.push_back(std::move(l));
  }
  for (int i = 0; i < cfg.dec_layers; ++i) {
    DecoderLayerWeights l;
    l.self_attn = init_attention(cfg.d_model, rng);
    l.ln1_g = Matrix(1, d, 1.0);
    l.ln1_b = Matrix(1, d);
    l.cross_attn = init_attention(cfg.d_model, rng);
    l.ln2_g = Matrix(1, d, 1.0);
    l.ln2_b = Matrix(1, d);
    l.w1 = gaussian_matrix(d, f, sd_d, rng);
    l.w2 = gaussian_matrix(f, d, sd_f, rng);
    l.ln3_g = Matrix(1, d, 1.0);
    l.ln3_b = Matrix(1, d);
    m.dec.push_back(std::move(l));
  }
  m.out = gaussian_matrix(d, cfg.vocab_size, sd_d, rng);
  return m;
}

void BaseModel::visit(const std::function<void(const std::string&, Matrix&)>& f) {
  walk(*this, f);
}

void BaseModel::visit(const std::function<void(const std::string&, const Matrix&)>& f) const {
  walk(*this, f);
}

std::vector<Matrix*> BaseModel::parameters() {
  std::vector<Matrix*> out;
  walk(*this, [&out](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

std::size_t BaseModel::parameter_count() const {
  std::size_t n = 0;
  walk(*this, [&n](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

std::size_t SegmentedInput::length() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.tokens.size();
  return n;
}

BoundModel bind(Graph& g, const BaseModel& m, bool trainable) {
  const bool tr = trainable && !m.frozen;
  std::vector<const Matrix*> src;
  walk(m, [&src](const std::string&, const Matrix& x) { src.push_back(&x); });
  BoundModel bm;
  bm.model = &m;
  bm.enc.resize(m.enc.size());
  bm.dec.resize(m.dec.size());
  std::size_t k = 0;
  walk(bm, [&](const std::string&, Tensor& t) {
    t = g.parameter(*src[k++], tr);
    bm.leaves.push_back(t);
  });
  return bm;
}

// ---------------------------------------------------------------------------
// Forward

Tensor multi_head_attention(const BoundAttention& w, Tensor q_in, Tensor kv_in, int heads,
                            const std::vector<HeadPrefix>* prefixes, bool causal,
                            AttentionTrace* trace) {
  const std::size_t d = q_in.cols();
  if (kv_in.cols() != d || d % static_cast<std::size_t>(heads) != 0)
    throw ShapeError("multi_head_attention: width mismatch");
  if (prefixes && prefixes->size() != static_cast<std::size_t>(heads))
    throw ShapeError("multi_head_attention: need one prefix per head");
  const std::size_t hd = d / static_cast<std::size_t>(heads);
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor q = matmul(q_in, w.wq);
  Tensor k = matmul(kv_in, w.wk);
  Tensor v = matmul(kv_in, w.wv);
  std::vector<Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  if (trace) trace->heads.assign(static_cast<std::size_t>(heads), {});
  for (int h = 0; h < heads; ++h) {
    const std::size_t c0 = static_cast<std::size_t>(h) * hd;
    Tensor qh = slice_cols(q, c0, hd);
    Tensor kh = slice_cols(k, c0, hd);
    Tensor vh = slice_cols(v, c0, hd);
    std::size_t npre = 0;
    if (prefixes) {
      const HeadPrefix& p = (*prefixes)[static_cast<std::size_t>(h)];
      if (p.keys.valid() && p.keys.rows() > 0) {
        if (p.keys.cols() != hd || p.values.cols() != hd || p.keys.rows() != p.values.rows())
          throw ShapeError("multi_head_attention: prefix shape mismatch");
        npre = p.keys.rows();
        const Tensor kp[] = {p.keys, kh};
        const Tensor vp[] = {p.values, vh};
        kh = concat_rows(kp);
        vh = concat_rows(vp);
      }
    }
    Tensor scores = scale(matmul_nt(qh, kh), inv_scale);
    Tensor att = causal ? causal_softmax_rows(scores, npre) : softmax_rows(scores);
    Tensor oh = matmul(att, vh);
    if (trace) {
      auto& ht = trace->heads[static_cast<std::size_t>(h)];
      ht.weights = att.value();
      ht.values = vh.value();
      ht.output = oh.value();
    }
    outs.push_back(oh);
  }
  return matmul(concat_cols(outs), w.wo);
}

Tensor build_embeddings(const BoundModel& bm, const SegmentedInput& input) {
  const ModelConfig& cfg = bm.model->config;
  const std::size_t len = input.length();
  if (len == 0) throw ShapeError("build_embeddings: empty input");
  if (len > static_cast<std::size_t>(cfg.max_len))
    throw ShapeError("build_embeddings: input length " + std::to_string(len) + " exceeds max_len " +
                     std::to_string(cfg.max_len));
  std::vector<int> tok, pos, seg;
  tok.reserve(len);
  pos.reserve(len);
  seg.reserve(len);
  for (const Segment& s : input.segments) {
    if (s.segment_id < 0 || s.segment_id >= cfg.segments_max)
      throw ShapeError("build_embeddings: segment id " + std::to_string(s.segment_id) +
                       " outside [0," + std::to_string(cfg.segments_max) + ")");
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      const int t = s.tokens[i];
      if (t < 0 || t >= cfg.vocab_size)
        throw std::out_of_range("build_embeddings: unknown token " + std::to_string(t));
      tok.push_back(t);
      pos.push_back(static_cast<int>(i));  // row i holds position i+1
      seg.push_back(s.segment_id);
    }
  }
  return add(add(gather_rows(bm.tok_emb, tok), gather_rows(bm.pos_emb, pos)),
             gather_rows(bm.seg_emb, seg));
}

Tensor encoder_layer_forward(const BoundEncoderLayer& w, Tensor h_in, int heads, int layer,
                             const std::vector<HeadPrefix>* prefixes, const PostAttentionHook* hook,
                             EncoderLayerTrace* trace) {
  Tensor att = multi_head_attention(w.attn, h_in, h_in, heads, prefixes, false,
                                    trace ? &trace->attention : nullptr);
  Tensor a = layer_norm(add(h_in, att), w.ln1_g, w.ln1_b);
  Tensor gated = a;
  if (hook && *hook) {
    gated = (*hook)(layer, a);
    if (gated.rows() != a.rows() || gated.cols() != a.cols())
      throw ShapeError("encoder_layer_forward: hook changed shape " + a.value().shape_str() +
                       " -> " + gated.value().shape_str());
  }
  Tensor ffn = matmul(relu(matmul(gated, w.w1)), w.w2);
  Tensor out = layer_norm(add(gated, ffn), w.ln2_g, w.ln2_b);
  if (trace) {
    trace->input = h_in.value();
    trace->attention_out = a.value();
    trace->gated = gated.value();
    trace->output = out.value();
  }
  return out;
}

Tensor encode(const BoundModel& bm, Tensor h0, const EncoderInjection* inj, ActivationTrace* trace) {
  const ModelConfig& cfg = bm.model->config;
  if (inj && !inj->prefixes.empty() && inj->prefixes.size() != bm.enc.size())
    throw ShapeError("encode: need prefixes for every encoder layer");
  if (trace) {
    trace->embeddings = h0.value();
    trace->layers.assign(bm.enc.size(), {});
  }
  Tensor h = h0;
  for (std::size_t l = 0; l < bm.enc.size(); ++l) {
    const std::vector<HeadPrefix>* pre =
        (inj && !inj->prefixes.empty()) ? &inj->prefixes[l] : nullptr;
    const PostAttentionHook* hook = (inj && inj->post_attention) ? &inj->post_attention : nullptr;
    h = encoder_layer_forward(bm.enc[l], h, cfg.heads, static_cast<int>(l) + 1, pre, hook,
                              trace ? &trace->layers[l] : nullptr);
  }
  return h;
}

Tensor encode_input(const BoundModel& bm, const SegmentedInput& input, const EncoderInjection* inj,
                    ActivationTrace* trace) {
  Tensor h0 = build_embeddings(bm, input);
  if (inj && !inj->appended_rows.empty()) {
    std::vector<Tensor> parts{h0};
    parts.insert(parts.end(), inj->appended_rows.begin(), inj->appended_rows.end());
    h0 = concat_rows(parts);
    if (h0.rows() > static_cast<std::size_t>(bm.model->config.max_len))
      throw ShapeError("encode_input: " + std::to_string(h0.rows()) + " rows exceed max_len");
  }
  return encode(bm, h0, inj, trace);
}

Tensor decoder_forward(const BoundModel& bm, std::span<const int> dec_in, Tensor enc_out) {
  const ModelConfig& cfg = bm.model->config;
  if (dec_in.empty()) throw ShapeError("decoder_forward: empty target prefix");
  if (dec_in.size() > static_cast<std::size_t>(cfg.max_len))
    throw ShapeError("decoder_forward: target length exceeds max_len");
  std::vector<int> pos(dec_in.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  Tensor x = add(gather_rows(bm.tok_emb, dec_in), gather_rows(bm.pos_emb, pos));
  for (const BoundDecoderLayer& l : bm.dec) {
    Tensor sa = multi_head_attention(l.self_attn, x, x, cfg.heads, nullptr, true);
    x = layer_norm(add(x, sa), l.ln1_g, l.ln1_b);
    Tensor ca = multi_head_attention(l.cross_attn, x, enc_out, cfg.heads);
    x = layer_norm(add(x, ca), l.ln2_g, l.ln2_b);
    Tensor f = matmul(relu(matmul(x, l.w1)), l.w2);
    x = layer_norm(add(x, f), l.ln3_g, l.ln3_b);
  }
  return matmul(x, bm.out);
}

std::vector<int> greedy_decode(const BoundModel& bm, Tensor enc_out, int max_steps) {
  const int max_len = bm.model->config.max_len;
  if (max_steps < 0 || max_steps >= max_len)
    throw ShapeError("greedy_decode: max_steps must be in [0, max_len)");
  std::vector<int> dec_in{kBos};
  std::vector<int> out;
  for (int step = 0; step < max_steps; ++step) {
    Tensor logits = decoder_forward(bm, dec_in, enc_out);
    auto last = logits.value().row(logits.rows() - 1);
    int best = 0;
    for (std::size_t j = 1; j < last.size(); ++j)
      if (last[j] > last[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
    if (best == kEos) break;
    out.push_back(best);
    dec_in.push_back(best);
  }
  return out;
}

std::vector<int> greedy_decode(const BaseModel& m, const SegmentedInput& input, int max_steps) {
  Graph g;
  BoundModel bm = bind(g, m, false);
  Tensor enc = encode_input(bm, input);
  return greedy_decode(bm, enc, max_steps);
}

std::vector<int> decoder_inputs(std::span<const int> y) {
  std::vector<int> v{kBos};
  v.insert(v.end(), y.begin(), y.end());
  return v;
}

std::vector<int> decoder_labels(std::span<const int> y) {
  std::vector<int> v(y.begin(), y.end());
  v.push_back(kEos);
  return v;
}

// ---------------------------------------------------------------------------
// Binary IO

void write_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw ArtifactError("truncated file (u32)");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  if (n > (1u << 24)) throw ArtifactError("implausible string length in file");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw ArtifactError("truncated file (string)");
  return s;
}

void write_block(std::ostream& os, const std::string& name, const Matrix& m) {
  write_string(os, name);
  write_u32(os, static_cast<std::uint32_t>(m.rows()));
  write_u32(os, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.values()) {
    std::uint64_t u = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
  }
}

Matrix read_block(std::istream& is, const std::string& expected_name) {
  const std::string name = read_string(is);
  if (!expected_name.empty() && name != expected_name)
    throw ArtifactError("expected block '" + expected_name + "', found '" + name + "'");
  const std::uint32_t r = read_u32(is), c = read_u32(is);
  if (static_cast<std::uint64_t>(r) * c > (1ull << 26)) throw ArtifactError("implausible block size");
  Matrix m(r, c);
  for (double& v : m.values()) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw ArtifactError("truncated block '" + name + "'");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    v = std::bit_cast<double>(u);
  }
  return m;
}

namespace {
constexpr char kCheckpointMagic[] = "MCTG1";
}

std::string serialize_checkpoint(const BaseModel& m) {
  std::ostringstream os(std::ios::binary);
  os.write(kCheckpointMagic, 5);
  write_string(os, m.config.to_json());
  write_u32(os, 0);  // patched below
  std::uint32_t count = 0;
  m.visit([&](const std::string& name, const Matrix& x) {
    write_block(os, name, x);
    ++count;
  });
  std::string bytes = os.str();
  const std::size_t off = 5 + 4 + m.config.to_json().size();
  for (int i = 0; i < 4; ++i) bytes[off + static_cast<std::size_t>(i)] = static_cast<char>((count >> (8 * i)) & 0xFF);
  return bytes;
}

BaseModel deserialize_checkpoint(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  char magic[5];
  if (!is.read(magic, 5) || std::memcmp(magic, kCheckpointMagic, 5) != 0)
    throw ArtifactError("not a checkpoint (bad magic)");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(read_string(is));
  } catch (const ConfigError& e) {
    throw ArtifactError(std::string("checkpoint config: ") + e.what());
  }
  const std::uint32_t count = read_u32(is);
  Rng dummy(0);
  BaseModel m = BaseModel::init(cfg, dummy);
  std::uint32_t seen = 0;
  m.visit([&](const std::string& name, Matrix& x) {
    Matrix v = read_block(is, name);
    if (!v.same_shape(x)) throw ArtifactError("checkpoint block '" + name + "' has wrong shape");
    x = std::move(v);
    ++seen;
  });
  if (seen != count) throw ArtifactError("checkpoint block count mismatch");
  if (is.peek() != std::char_traits<char>::eof()) throw ArtifactError("trailing bytes after checkpoint");
  m.frozen = true;
  return m;
}

void save_checkpoint(const BaseModel& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("cannot write " + path);
  const std::string b = serialize_checkpoint(m);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

BaseModel load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArtifactError("missing checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace mctg
