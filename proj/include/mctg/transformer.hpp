#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mctg/adam.hpp"
#include "mctg/rng.hpp"
#include "mctg/tensor.hpp"

namespace mctg {

/// Architecture of the toy encoder-decoder backbone.
struct ModelConfig {
  int vocab_size = 64;
  int d_model = 32;
  int heads = 4;
  int enc_layers = 4;
  int dec_layers = 2;
  int max_len = 48;
  int prompt_len = 4;  // p: continuous vectors per plugin per layer
  int segments_max = 6;
  int ffn_mult = 4;

  int head_dim() const { return d_model / heads; }
  int ffn_dim() const { return d_model * ffn_mult; }
  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;

  std::string to_json() const;
  /// Unknown keys are rejected.
  static ModelConfig from_json(const std::string& text);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct AttentionWeights {
  Matrix wq, wk, wv, wo;
};

struct EncoderLayerWeights {
  AttentionWeights attn;
  Matrix ln1_g, ln1_b;
  Matrix w1, w2;
  Matrix ln2_g, ln2_b;
};

struct DecoderLayerWeights {
  AttentionWeights self_attn;
  Matrix ln1_g, ln1_b;
  AttentionWeights cross_attn;
  Matrix ln2_g, ln2_b;
  Matrix w1, w2;
  Matrix ln3_g, ln3_b;
};

/// Pretrained backbone parameters (theta). Once `frozen`, plugin code binds
/// these as non-trainable leaves and never writes to them.
struct BaseModel {
  ModelConfig config;
  Matrix tok_emb;  // V x d
  Matrix pos_emb;  // max_len x d, row k is position k+1
  Matrix seg_emb;  // segments_max x d
  std::vector<EncoderLayerWeights> enc;
  std::vector<DecoderLayerWeights> dec;
  Matrix out;  // d x V
  bool frozen = false;

  static BaseModel init(const ModelConfig& cfg, Rng& rng);

  /// Visits every parameter in the fixed checkpoint order.
  void visit(const std::function<void(const std::string&, Matrix&)>& f);
  void visit(const std::function<void(const std::string&, const Matrix&)>& f) const;
  std::vector<Matrix*> parameters();
  std::size_t parameter_count() const;
};

/// One textual segment of the encoder input. Positions restart at 1.
struct Segment {
  std::vector<int> tokens;
  int segment_id = 0;
};

struct SegmentedInput {
  std::vector<Segment> segments;
  std::size_t length() const;
};

// ---------------------------------------------------------------------------
// Graph binding

struct BoundAttention {
  Tensor wq, wk, wv, wo;
};
struct BoundEncoderLayer {
  BoundAttention attn;
  Tensor ln1_g, ln1_b, w1, w2, ln2_g, ln2_b;
};
struct BoundDecoderLayer {
  BoundAttention self_attn;
  Tensor ln1_g, ln1_b;
  BoundAttention cross_attn;
  Tensor ln2_g, ln2_b, w1, w2, ln3_g, ln3_b;
};

/// The model's parameters entered on a graph as leaves.
struct BoundModel {
  const BaseModel* model = nullptr;
  Tensor tok_emb, pos_emb, seg_emb, out;
  std::vector<BoundEncoderLayer> enc;
  std::vector<BoundDecoderLayer> dec;
  /// Leaves in BaseModel::visit order (for reading gradients).
  std::vector<Tensor> leaves;
};

/// `trainable` is ignored (forced false) for a frozen model.
BoundModel bind(Graph& g, const BaseModel& m, bool trainable);

/// Extra key/value rows prepended inside one attention head.
struct HeadPrefix {
  Tensor keys;    // rows x head_dim
  Tensor values;  // rows x head_dim
};

/// Per-head record of one attention call.
struct HeadTrace {
  Matrix weights;  // queries x keys (prefix keys first)
  Matrix values;   // keys x head_dim
  Matrix output;   // queries x head_dim (before W_o)
};

struct AttentionTrace {
  std::vector<HeadTrace> heads;
};

/// Scaled dot-product multi-head attention. Keys/values of head h are
/// [prefixes[h]; kv_in W_{k,v}] when prefixes are given.
Tensor multi_head_attention(const BoundAttention& w, Tensor q_in, Tensor kv_in, int heads,
                            const std::vector<HeadPrefix>* prefixes = nullptr, bool causal = false,
                            AttentionTrace* trace = nullptr);

/// Token + per-segment position (restarting at 1) + segment embeddings.
Tensor build_embeddings(const BoundModel& bm, const SegmentedInput& input);

/// Called after the attention sublayer (A = LN(H + MHA(H))) of encoder layer
/// `layer` (1-based); returns the replacement A~ fed to the FFN sublayer.
using PostAttentionHook = std::function<Tensor(int layer, Tensor attention_out)>;

struct EncoderLayerTrace {
  Matrix input;           // H^(j-1)
  Matrix attention_out;   // A^(j)
  Matrix gated;           // A~^(j)
  Matrix output;          // H^(j)
  AttentionTrace attention;
};

struct ActivationTrace {
  Matrix embeddings;  // H^(0)
  std::vector<EncoderLayerTrace> layers;
};

Tensor encoder_layer_forward(const BoundEncoderLayer& w, Tensor h_in, int heads, int layer,
                             const std::vector<HeadPrefix>* prefixes = nullptr,
                             const PostAttentionHook* hook = nullptr,
                             EncoderLayerTrace* trace = nullptr);

/// Plugin wiring for one encoder pass.
struct EncoderInjection {
  /// Rows appended after the embedded segments, in order.
  std::vector<Tensor> appended_rows;
  /// prefixes[layer-1][head]; empty outer vector means none.
  std::vector<std::vector<HeadPrefix>> prefixes;
  PostAttentionHook post_attention;
};

/// Runs the encoder stack over `h0` (already embedded, plugin rows included).
Tensor encode(const BoundModel& bm, Tensor h0, const EncoderInjection* inj = nullptr,
              ActivationTrace* trace = nullptr);

/// Embeds `input`, appends injected rows, runs the encoder.
Tensor encode_input(const BoundModel& bm, const SegmentedInput& input,
                    const EncoderInjection* inj = nullptr, ActivationTrace* trace = nullptr);

/// Logits (T x V) for decoder inputs `dec_in` (BOS-prefixed) over `enc_out`.
Tensor decoder_forward(const BoundModel& bm, std::span<const int> dec_in, Tensor enc_out);

/// Iterative argmax; ties go to the lowest id. Stops at EOS (excluded from the
/// result) or after max_steps tokens.
std::vector<int> greedy_decode(const BoundModel& bm, Tensor enc_out, int max_steps);
std::vector<int> greedy_decode(const BaseModel& m, const SegmentedInput& input, int max_steps);

/// Special token ids shared by all modules.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;

/// Decoder input (BOS + y) and labels (y + EOS) for target y.
std::vector<int> decoder_inputs(std::span<const int> y);
std::vector<int> decoder_labels(std::span<const int> y);

// ---------------------------------------------------------------------------
// Binary float blocks shared by checkpoint and plugin files:
// name (u32 length + UTF-8), rows (u32), cols (u32), rows*cols little-endian f64.

void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is);
void write_string(std::ostream& os, const std::string& s);
std::string read_string(std::istream& is);
void write_block(std::ostream& os, const std::string& name, const Matrix& m);
Matrix read_block(std::istream& is, const std::string& expected_name);

/// Checkpoint: "MCTG1", u32 JSON length + config JSON, u32 block count, blocks
/// in BaseModel::visit order.
void save_checkpoint(const BaseModel& m, const std::string& path);
BaseModel load_checkpoint(const std::string& path);
std::string serialize_checkpoint(const BaseModel& m);
BaseModel deserialize_checkpoint(const std::string& bytes);

}  // namespace mctg
