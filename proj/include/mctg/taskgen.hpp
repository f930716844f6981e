#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace mctg {

/// Token layout of the synthetic task (vocab size 64).
namespace vocab {
inline constexpr int kAspectShift = 3;
inline constexpr int kAspectMark = 4;
inline constexpr int kAspectOrder = 5;
inline constexpr int kPlus1 = 6;
inline constexpr int kPlus2 = 7;
inline constexpr int kFwd = 8;
inline constexpr int kRev = 9;
/// Content band [10, 40). Source content is drawn from [10, 38) so a SHIFT of
/// up to +2 stays inside the band.
inline constexpr int kContentBegin = 10;
inline constexpr int kContentEnd = 40;
inline constexpr int kSourceEnd = 38;
inline constexpr int kMarker1 = 40;
inline constexpr int kMarker2 = 41;
inline constexpr int kMarker3 = 42;
/// Keyword band [43, 64): untouched by SHIFT and ORDER.
inline constexpr int kKeywordBegin = 43;
inline constexpr int kKeywordEnd = 64;
inline constexpr int kSize = 64;

inline bool is_content(int t) { return t >= kContentBegin && t < kContentEnd; }
inline bool is_marker(int t) { return t >= kMarker1 && t <= kMarker3; }
}  // namespace vocab

/// Categorical label ("+1", "m2", "rev") or free-form keyword tokens.
using AspectValue = std::variant<std::string, std::vector<int>>;

std::string to_string(const AspectValue& v);

enum class AspectKind { kCategorical, kFreeForm };

struct AspectSpec {
  std::string name;
  AspectKind kind = AspectKind::kCategorical;
  std::vector<std::string> values;  // categorical labels
  int segment_id = 1;               // segment embedding used for this aspect's constraint text
  std::function<std::vector<int>(std::span<const int> y, const AspectValue& v)> transform;
  /// Score in [0,1] of `out` for value `v` given source `x`: 0/1 for
  /// categorical aspects, CSR for free-form.
  std::function<double(std::span<const int> out, const AspectValue& v, std::span<const int> x)> verify;
};

/// SHIFT, MARK, ORDER, KEYWORD in canonical composition order.
const std::vector<AspectSpec>& default_aspects();
const AspectSpec& find_aspect(const std::string& name);
/// Position of `name` in the canonical order.
int aspect_rank(const std::string& name);

struct Example {
  std::vector<int> x;
  std::vector<int> y;
  std::map<std::string, AspectValue> aspects;
  friend bool operator==(const Example&, const Example&) = default;
};

/// Aspect optionally pinned to one value, parsed from "NAME" or "NAME=VALUE".
struct AspectChoice {
  std::string name;
  std::optional<AspectValue> value;
  static AspectChoice parse(const std::string& text);
  /// "NAME" or "NAME=VALUE"; used for plugin identity.
  std::string label() const;
};

struct LengthRange {
  int min = 3;
  int max = 6;
};

std::vector<Example> gen_base_corpus(std::size_t n, LengthRange len, std::uint64_t seed);
std::vector<Example> gen_single_aspect(const AspectChoice& aspect, std::size_t n, LengthRange len,
                                       std::uint64_t seed);
/// y = transforms composed in canonical order. Throws ConfigError for an
/// unregistered aspect.
std::vector<Example> gen_multi_aspect(std::span<const AspectChoice> aspects, std::size_t n,
                                      LengthRange len, std::uint64_t seed);

/// Base-pretraining mixture: each aspect is attached independently with
/// probability `aspect_prob`; examples without aspects are plain copies.
std::vector<Example> gen_pretrain_corpus(std::size_t n, LengthRange len, std::uint64_t seed,
                                         double aspect_prob = 0.5);

/// Applies every aspect of `values` in canonical order.
std::vector<int> compose_transforms(std::span<const int> y,
                                    const std::map<std::string, AspectValue>& values);

/// Categorical: [ASPECT, VALUE]; free-form: the keyword tokens.
std::vector<int> render_constraint(const std::string& aspect, const AspectValue& value);

struct Metrics {
  std::map<std::string, double> per_aspect;  // accuracy, or CSR for KEYWORD
  double average = 0.0;
};

Metrics evaluate(std::span<const std::vector<int>> outputs, std::span<const Example> examples);

/// multi - single per aspect; negative means degeneration.
std::map<std::string, double> performance_gap(const Metrics& single, const Metrics& multi);

// JSON Lines corpus IO: {"x":[..],"y":[..],"aspects":{"SHIFT":"+1","KEYWORD":[44]}}
std::string example_to_json(const Example& e);
Example example_from_json(const std::string& line);
void write_corpus(const std::string& path, std::span<const Example> data);
std::vector<Example> read_corpus(const std::string& path);

}  // namespace mctg
