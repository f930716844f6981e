#include "mctg/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "json.hpp"
#include "mctg/errors.hpp"
#include "mctg/rng.hpp"

namespace mctg {

using json = nlohmann::json;

std::string to_string(const AspectValue& v) {
  if (const auto* s = std::get_if<std::string>(&v)) return *s;
  std::string out;
  for (int t : std::get<std::vector<int>>(v)) {
    if (!out.empty()) out += ' ';
    out += std::to_string(t);
  }
  return out;
}

namespace {

const std::string& label_of(const AspectValue& v, const char* aspect) {
  const auto* s = std::get_if<std::string>(&v);
  if (!s) throw ConfigError(std::string(aspect) + ": expected a categorical value");
  return *s;
}

int shift_amount(const AspectValue& v) {
  const std::string& s = label_of(v, "SHIFT");
  if (s == "+1") return 1;
  if (s == "+2") return 2;
  throw ConfigError("SHIFT: unknown value '" + s + "'");
}

int marker_token(const AspectValue& v) {
  const std::string& s = label_of(v, "MARK");
  if (s == "m1") return vocab::kMarker1;
  if (s == "m2") return vocab::kMarker2;
  if (s == "m3") return vocab::kMarker3;
  throw ConfigError("MARK: unknown value '" + s + "'");
}

bool order_reversed(const AspectValue& v) {
  const std::string& s = label_of(v, "ORDER");
  if (s == "fwd") return false;
  if (s == "rev") return true;
  throw ConfigError("ORDER: unknown value '" + s + "'");
}

const std::vector<int>& keywords_of(const AspectValue& v) {
  const auto* k = std::get_if<std::vector<int>>(&v);
  if (!k || k->empty()) throw ConfigError("KEYWORD: expected a non-empty token list");
  return *k;
}

std::vector<int> content_of(std::span<const int> y) {
  std::vector<int> c;
  for (int t : y)
    if (vocab::is_content(t)) c.push_back(t);
  return c;
}

std::vector<AspectSpec> build_aspects() {
  std::vector<AspectSpec> a;

  AspectSpec shift;
  shift.name = "SHIFT";
  shift.values = {"+1", "+2"};
  shift.segment_id = 1;
  shift.transform = [](std::span<const int> y, const AspectValue& v) {
    const int k = shift_amount(v);
    std::vector<int> out(y.begin(), y.end());
    for (int& t : out)
      if (vocab::is_content(t)) t += k;
    return out;
  };
  shift.verify = [](std::span<const int> out, const AspectValue& v, std::span<const int> x) {
    const int k = shift_amount(v);
    std::vector<int> want = content_of(x);
    for (int& t : want) t += k;
    std::vector<int> got = content_of(out);
    std::sort(want.begin(), want.end());
    std::sort(got.begin(), got.end());
    return got == want ? 1.0 : 0.0;
  };
  a.push_back(std::move(shift));

  AspectSpec mark;
  mark.name = "MARK";
  mark.values = {"m1", "m2", "m3"};
  mark.segment_id = 2;
  mark.transform = [](std::span<const int> y, const AspectValue& v) {
    std::vector<int> out{marker_token(v)};
    out.insert(out.end(), y.begin(), y.end());
    return out;
  };
  mark.verify = [](std::span<const int> out, const AspectValue& v, std::span<const int>) {
    return (!out.empty() && out[0] == marker_token(v)) ? 1.0 : 0.0;
  };
  a.push_back(std::move(mark));

  AspectSpec order;
  order.name = "ORDER";
  order.values = {"fwd", "rev"};
  order.segment_id = 3;
  // Reverses the content tokens in place; markers and keywords keep their slots.
  order.transform = [](std::span<const int> y, const AspectValue& v) {
    std::vector<int> out(y.begin(), y.end());
    if (!order_reversed(v)) return out;
    std::vector<std::size_t> slots;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (vocab::is_content(out[i])) slots.push_back(i);
    for (std::size_t i = 0, j = slots.size(); i + 1 < j; ++i, --j)
      std::swap(out[slots[i]], out[slots[j - 1]]);
    return out;
  };
  // Content must equal the source content in the requested order, up to a
  // uniform SHIFT of 0..2 (so the check composes with SHIFT).
  order.verify = [](std::span<const int> out, const AspectValue& v, std::span<const int> x) {
    std::vector<int> want = content_of(x);
    if (order_reversed(v)) std::reverse(want.begin(), want.end());
    const std::vector<int> got = content_of(out);
    if (got.size() != want.size()) return 0.0;
    for (int k = 0; k <= 2; ++k) {
      bool ok = true;
      for (std::size_t i = 0; i < got.size() && ok; ++i) ok = got[i] == want[i] + k;
      if (ok) return 1.0;
    }
    return 0.0;
  };
  a.push_back(std::move(order));

  AspectSpec kw;
  kw.name = "KEYWORD";
  kw.kind = AspectKind::kFreeForm;
  kw.segment_id = 4;
  // Inserted in order right after any leading marker tokens.
  kw.transform = [](std::span<const int> y, const AspectValue& v) {
    const auto& k = keywords_of(v);
    std::size_t at = 0;
    while (at < y.size() && vocab::is_marker(y[at])) ++at;
    std::vector<int> out(y.begin(), y.begin() + static_cast<std::ptrdiff_t>(at));
    out.insert(out.end(), k.begin(), k.end());
    out.insert(out.end(), y.begin() + static_cast<std::ptrdiff_t>(at), y.end());
    return out;
  };
  kw.verify = [](std::span<const int> out, const AspectValue& v, std::span<const int>) {
    const auto& k = keywords_of(v);
    std::size_t hit = 0;
    for (int t : k)
      if (std::find(out.begin(), out.end(), t) != out.end()) ++hit;
    return static_cast<double>(hit) / static_cast<double>(k.size());
  };
  a.push_back(std::move(kw));
  return a;
}

std::vector<int> random_source(Rng& rng, LengthRange len) {
  const int n = rng.uniform_int(len.min, len.max);
  std::vector<int> x(static_cast<std::size_t>(n));
  for (int& t : x) t = rng.uniform_int(vocab::kContentBegin, vocab::kSourceEnd - 1);
  return x;
}

AspectValue sample_value(const AspectSpec& spec, Rng& rng) {
  if (spec.kind == AspectKind::kCategorical)
    return spec.values[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(spec.values.size()) - 1))];
  const int n = rng.uniform_int(1, 3);
  std::vector<int> k;
  while (static_cast<int>(k.size()) < n) {
    const int t = rng.uniform_int(vocab::kKeywordBegin, vocab::kKeywordEnd - 1);
    if (std::find(k.begin(), k.end(), t) == k.end()) k.push_back(t);
  }
  return k;
}

void check_range(LengthRange len) {
  if (len.min < 1 || len.max < len.min) throw ConfigError("length range must satisfy 1 <= min <= max");
}

}  // namespace

const std::vector<AspectSpec>& default_aspects() {
  static const std::vector<AspectSpec> aspects = build_aspects();
  return aspects;
}

const AspectSpec& find_aspect(const std::string& name) {
  for (const auto& a : default_aspects())
    if (a.name == name) return a;
  throw ConfigError("unknown aspect '" + name + "'");
}

int aspect_rank(const std::string& name) {
  const auto& all = default_aspects();
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i].name == name) return static_cast<int>(i);
  throw ConfigError("unknown aspect '" + name + "'");
}

AspectChoice AspectChoice::parse(const std::string& text) {
  AspectChoice c;
  const auto eq = text.find('=');
  c.name = text.substr(0, eq);
  const AspectSpec& spec = find_aspect(c.name);
  if (eq != std::string::npos) {
    const std::string v = text.substr(eq + 1);
    if (spec.kind == AspectKind::kFreeForm)
      throw ConfigError(c.name + " is free-form and cannot be pinned to a value");
    if (std::find(spec.values.begin(), spec.values.end(), v) == spec.values.end())
      throw ConfigError("unknown value '" + v + "' for aspect " + c.name);
    c.value = v;
  }
  return c;
}

std::string AspectChoice::label() const {
  return value ? name + "=" + to_string(*value) : name;
}

std::vector<int> compose_transforms(std::span<const int> y,
                                    const std::map<std::string, AspectValue>& values) {
  std::vector<int> out(y.begin(), y.end());
  for (const auto& spec : default_aspects()) {
    auto it = values.find(spec.name);
    if (it != values.end()) out = spec.transform(out, it->second);
  }
  for (const auto& [name, _] : values) (void)find_aspect(name);
  return out;
}

std::vector<Example> gen_base_corpus(std::size_t n, LengthRange len, std::uint64_t seed) {
  check_range(len);
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.x = random_source(rng, len);
    e.y = e.x;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Example> gen_multi_aspect(std::span<const AspectChoice> aspects, std::size_t n,
                                      LengthRange len, std::uint64_t seed) {
  check_range(len);
  std::vector<AspectChoice> sorted(aspects.begin(), aspects.end());
  std::set<std::string> seen;
  for (const auto& a : sorted) {
    (void)find_aspect(a.name);
    if (!seen.insert(a.name).second) throw ConfigError("duplicate aspect " + a.name);
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const AspectChoice& a, const AspectChoice& b) { return aspect_rank(a.name) < aspect_rank(b.name); });
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.x = random_source(rng, len);
    for (const auto& a : sorted) {
      const AspectSpec& spec = find_aspect(a.name);
      e.aspects[a.name] = a.value ? *a.value : sample_value(spec, rng);
    }
    e.y = compose_transforms(e.x, e.aspects);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<Example> gen_single_aspect(const AspectChoice& aspect, std::size_t n, LengthRange len,
                                       std::uint64_t seed) {
  return gen_multi_aspect(std::span<const AspectChoice>(&aspect, 1), n, len, seed);
}

std::vector<Example> gen_pretrain_corpus(std::size_t n, LengthRange len, std::uint64_t seed,
                                         double aspect_prob) {
  check_range(len);
  if (!(aspect_prob >= 0.0 && aspect_prob <= 1.0)) throw ConfigError("aspect_prob must lie in [0,1]");
  Rng rng(seed);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example e;
    e.x = random_source(rng, len);
    for (const auto& spec : default_aspects())
      if (rng.uniform() < aspect_prob) e.aspects[spec.name] = sample_value(spec, rng);
    e.y = compose_transforms(e.x, e.aspects);
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<int> render_constraint(const std::string& aspect, const AspectValue& value) {
  if (aspect == "SHIFT") return {vocab::kAspectShift, shift_amount(value) == 1 ? vocab::kPlus1 : vocab::kPlus2};
  if (aspect == "MARK") return {vocab::kAspectMark, marker_token(value)};
  if (aspect == "ORDER") return {vocab::kAspectOrder, order_reversed(value) ? vocab::kRev : vocab::kFwd};
  if (aspect == "KEYWORD") {
    const auto& k = keywords_of(value);
    for (int t : k)
      if (t < 0 || t >= vocab::kSize) throw ConfigError("KEYWORD: token outside vocabulary");
    return k;
  }
  throw ConfigError("unknown aspect '" + aspect + "'");
}

Metrics evaluate(std::span<const std::vector<int>> outputs, std::span<const Example> examples) {
  if (outputs.size() != examples.size())
    throw ConfigError("evaluate: " + std::to_string(outputs.size()) + " outputs for " +
                      std::to_string(examples.size()) + " examples");
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    for (const auto& [name, value] : examples[i].aspects) {
      auto& slot = acc[name];
      slot.first += find_aspect(name).verify(outputs[i], value, examples[i].x);
      ++slot.second;
    }
  }
  Metrics m;
  for (const auto& spec : default_aspects()) {
    auto it = acc.find(spec.name);
    if (it == acc.end()) continue;
    m.per_aspect[spec.name] = it->second.first / static_cast<double>(it->second.second);
  }
  if (!m.per_aspect.empty()) {
    double s = 0.0;
    for (const auto& spec : default_aspects()) {
      auto it = m.per_aspect.find(spec.name);
      if (it != m.per_aspect.end()) s += it->second;
    }
    m.average = s / static_cast<double>(m.per_aspect.size());
  }
  return m;
}

std::map<std::string, double> performance_gap(const Metrics& single, const Metrics& multi) {
  std::map<std::string, double> gap;
  for (const auto& [name, v] : multi.per_aspect) {
    auto it = single.per_aspect.find(name);
    if (it == single.per_aspect.end()) throw ConfigError("performance_gap: aspect mismatch on " + name);
    gap[name] = v - it->second;
  }
  if (gap.size() != single.per_aspect.size()) throw ConfigError("performance_gap: aspect mismatch");
  return gap;
}

std::string example_to_json(const Example& e) {
  json asp = json::object();
  for (const auto& [name, v] : e.aspects) {
    if (const auto* s = std::get_if<std::string>(&v)) asp[name] = *s;
    else asp[name] = std::get<std::vector<int>>(v);
  }
  json j = {{"x", e.x}, {"y", e.y}, {"aspects", asp}};
  return j.dump();
}

Example example_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& ex) {
    throw ArtifactError(std::string("corpus line: ") + ex.what());
  }
  Example e;
  try {
    e.x = j.at("x").get<std::vector<int>>();
    e.y = j.at("y").get<std::vector<int>>();
    if (j.contains("aspects")) {
      for (auto it = j["aspects"].begin(); it != j["aspects"].end(); ++it) {
        (void)find_aspect(it.key());
        if (it->is_string()) e.aspects[it.key()] = it->get<std::string>();
        else e.aspects[it.key()] = it->get<std::vector<int>>();
      }
    }
  } catch (const json::exception& ex) {
    throw ArtifactError(std::string("corpus line: ") + ex.what());
  }
  for (int t : e.x)
    if (t < 0 || t >= vocab::kSize) throw ArtifactError("corpus line: token outside vocabulary");
  for (int t : e.y)
    if (t < 0 || t >= vocab::kSize) throw ArtifactError("corpus line: token outside vocabulary");
  return e;
}

void write_corpus(const std::string& path, std::span<const Example> data) {
  std::ofstream f(path);
  if (!f) throw ArtifactError("cannot write " + path);
  for (const auto& e : data) f << example_to_json(e) << '\n';
}

std::vector<Example> read_corpus(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ArtifactError("missing corpus " + path);
  std::vector<Example> out;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(example_from_json(line));
  return out;
}

}  // namespace mctg
