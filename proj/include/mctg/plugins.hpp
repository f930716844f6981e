#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mctg/taskgen.hpp"
#include "mctg/transformer.hpp"

namespace mctg {

enum class Family { kPrompt, kPrefix, kGated };

std::string to_string(Family f);
/// "prompt", "prefix" or "gated"; throws ConfigError otherwise.
Family parse_family(const std::string& s);

/// Trainable parameters of one aspect, attached to a frozen base model.
struct Plugin {
  std::string aspect;  // AspectChoice label: "SHIFT" or "SHIFT=+1"
  Family family = Family::kGated;
  std::string constraint_template;  // "[ASPECT,VALUE]", "keywords" or "none"
  Matrix prompt;                    // P^(0), p x d (prompt, gated)
  std::vector<Matrix> layer_p;      // P^(j), p x d per encoder layer (gated)
  std::vector<Matrix> gates;        // G^(j), p x d per encoder layer (gated)
  std::vector<std::vector<Matrix>> prefix_k, prefix_v;  // [layer][head], p x head_dim (prefix)

  /// P ~ N(0, 0.02^2), G = 0.
  static Plugin init(const AspectChoice& aspect, Family family, const ModelConfig& cfg, Rng& rng);

  AspectChoice choice() const { return AspectChoice::parse(aspect); }
  std::string aspect_name() const;
  /// Whether the constraint text c is placed in the encoder input.
  bool uses_constraint_text() const { return constraint_template != "none"; }
  /// Number of continuous rows appended to the encoder input.
  std::size_t input_rows() const { return family == Family::kPrefix ? 0 : prompt.rows(); }

  void visit(const std::function<void(const std::string&, Matrix&)>& f);
  void visit(const std::function<void(const std::string&, const Matrix&)>& f) const;
  std::vector<Matrix*> parameters();
  /// Throws ShapeError when shapes disagree with `cfg`.
  void check_shapes(const ModelConfig& cfg) const;
  friend bool operator==(const Plugin&, const Plugin&) = default;
};

/// Plugins in concatenation order. Holds copies; combining never mutates inputs.
struct PluginCombo {
  std::vector<Plugin> plugins;
  bool empty() const { return plugins.empty(); }
  Family family() const;
};

/// Throws ConfigError on mixed families or a repeated aspect.
PluginCombo combine_plugins(std::span<const Plugin> plugins);

/// Row positions of one plugged encoder input.
struct PluginLayout {
  std::size_t x_len = 0;
  std::vector<std::size_t> c_begin, c_len;  // per plugin; c_len 0 when no c
  std::vector<std::size_t> row_begin;       // per plugin: first continuous row
  std::size_t p = 0;                        // continuous rows per plugin
  std::size_t total = 0;                    // encoder rows
};

/// Segments [x, c_1, ..., c_n] with segment id 0 for x and the aspect's id for
/// c_i; values for unpinned plugins come from `values`.
SegmentedInput build_input(std::span<const int> x, const PluginCombo& combo,
                           const std::map<std::string, AspectValue>& values, const ModelConfig& cfg,
                           PluginLayout* layout = nullptr);

/// A plugin's parameters entered on a graph.
struct BoundPlugin {
  Tensor prompt;
  std::vector<Tensor> layer_p, gates;
  std::vector<std::vector<HeadPrefix>> prefix;  // [layer][head]
  std::vector<Tensor> leaves;                   // Plugin::visit order
};

BoundPlugin bind_plugin(Graph& g, const Plugin& p, bool trainable);

/// Rows of plugin i are replaced by sigmoid(G_i) * (A_{P_i} + P_i); others pass through.
Tensor apply_gating(Tensor a, const PluginLayout& layout, std::span<const BoundPlugin> plugins,
                    int layer);

/// Encoder output of a plugged forward pass (family dispatch).
Tensor encode_with_plugins(const BoundModel& bm, std::span<const int> x, const PluginCombo& combo,
                           std::span<const BoundPlugin> bound,
                           const std::map<std::string, AspectValue>& values,
                           ActivationTrace* trace = nullptr, PluginLayout* layout = nullptr);

struct PluggedForward {
  Matrix logits;  // decoder logits for BOS + y
  ActivationTrace trace;
  PluginLayout layout;
};

PluggedForward forward_with_plugins(const BaseModel& m, const PluginCombo& combo,
                                    std::span<const int> x, std::span<const int> y,
                                    const std::map<std::string, AspectValue>& values, bool trace);

std::vector<int> decode_with_plugins(const BaseModel& m, const PluginCombo& combo,
                                     std::span<const int> x,
                                     const std::map<std::string, AspectValue>& values, int max_steps);

/// Greedy outputs for every example, using each example's aspect values.
std::vector<std::vector<int>> decode_corpus(const BaseModel& m, const PluginCombo& combo,
                                            std::span<const Example> data, int max_steps);

struct PluginTrainSettings {
  AdamSettings adam{3e-3};  // peak learning rate
  int warmup = 50;          // then cosine decay to 0.1 x peak
  int steps = 2000;
  int batch = 32;
  int log_every = 100;
};

struct PluginTrainResult {
  std::vector<Plugin> plugins;
  std::vector<double> loss_curve;
  double seconds = 0.0;
};

/// Separate training on single-aspect data. Base parameters stay untouched.
PluginTrainResult train_plugin(const BaseModel& m, std::span<const Example> corpus,
                               const AspectChoice& aspect, Family family,
                               const PluginTrainSettings& settings, std::uint64_t seed,
                               const std::function<void(int, double)>& progress = {});

/// All plugins plugged together and optimized jointly, starting from `start`
/// (fresh or separately trained). Examples must carry every aspect.
PluginTrainResult joint_train_plugins(const BaseModel& m, std::span<const Example> corpus,
                                      std::vector<Plugin> start, const PluginTrainSettings& settings,
                                      std::uint64_t seed,
                                      const std::function<void(int, double)>& progress = {});

/// Plugin file: "MCTGP1", aspect, family, constraint template (length-prefixed
/// strings), u32 enc_layers, u32 heads, u32 block count, blocks in visit order.
std::string serialize_plugin(const Plugin& p);
Plugin deserialize_plugin(const std::string& bytes);
void save_plugin(const Plugin& p, const std::string& path);
Plugin load_plugin(const std::string& path);

}  // namespace mctg
