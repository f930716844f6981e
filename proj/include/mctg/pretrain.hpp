#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mctg/adam.hpp"
#include "mctg/taskgen.hpp"
#include "mctg/transformer.hpp"

namespace mctg {

/// Fixed continuous rows (p x d) that trigger each transform during base
/// pretraining. They stand in for the latent skills of a pretrained model and
/// are discarded afterwards: plugins never see them.
struct TriggerCodebook {
  std::map<std::string, Matrix> codes;  // "SHIFT=+1", ..., "KEYWORD"
  static TriggerCodebook make(const ModelConfig& cfg, Rng& rng);
  static std::string key(const std::string& aspect, const AspectValue& v);
  const Matrix& code(const std::string& aspect, const AspectValue& v) const;
};

/// Encoder input used during pretraining: x, optional distractor constraint
/// text, optional keyword text, and trigger rows.
struct PretrainInput {
  SegmentedInput segments;
  std::vector<Matrix> trigger_rows;  // jittered copies of the codes
};

/// Builds the pretraining input for `e`. `rng` decides distractors, trigger
/// order and the Gaussian jitter (std `jitter`) added to trigger rows.
PretrainInput make_pretrain_input(const Example& e, const TriggerCodebook& book, Rng& rng,
                                  double jitter);

struct PretrainSettings {
  AdamSettings adam{3e-3};  // peak learning rate
  int warmup = 200;         // then cosine decay to 0.1 x peak
  double trigger_jitter = 0.25;
  int steps = 4500;
  int batch = 32;
  int log_every = 100;
};

struct PretrainResult {
  BaseModel model;
  TriggerCodebook codebook;
  std::vector<double> loss_curve;  // one entry per step
};

/// Trains every base parameter on the mixture corpus, then freezes.
/// Throws NumericError on divergence.
PretrainResult pretrain_base(std::span<const Example> corpus, const ModelConfig& cfg,
                             const PretrainSettings& settings, std::uint64_t seed,
                             const std::function<void(int step, double loss)>& progress = {});

/// Position-wise greedy accuracy on plain copy (x as the only segment; EOS
/// counts as a position). Aspect labels of `data` are ignored.
double copy_token_accuracy(const BaseModel& m, std::span<const Example> data);

/// Verifier accuracy of the base driven by its own trigger rows.
Metrics triggered_accuracy(const BaseModel& m, const TriggerCodebook& book,
                           std::span<const Example> data, std::uint64_t seed);

}  // namespace mctg
