#include "mctg/interference.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mctg/errors.hpp"

namespace mctg {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double row_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double norm(const Matrix& m) { return frobenius_norm(m); }

Matrix diff(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

const HeadTrace& head_trace(const TracedForward& f, int layer, int head) {
  if (layer < 1 || static_cast<std::size_t>(layer) > f.trace.layers.size())
    throw ConfigError("layer " + std::to_string(layer) + " out of range");
  const auto& heads = f.trace.layers[static_cast<std::size_t>(layer - 1)].attention.heads;
  if (head < 0 || static_cast<std::size_t>(head) >= heads.size())
    throw ConfigError("head " + std::to_string(head) + " out of range");
  const HeadTrace& ht = heads[static_cast<std::size_t>(head)];
  if (ht.weights.cols() != f.owners.size()) throw ShapeError("key ownership does not match trace");
  return ht;
}

/// Sums of w_k v_k grouped by key owner (-1 first, then plugins in order)
/// together with the matching attention masses.
struct MassSplit {
  std::vector<double> mass;  // [0] original keys, [1 + i] plugin i
  std::vector<Matrix> sum;
};

MassSplit split_masses(const TracedForward& f, const HeadTrace& ht, std::size_t q, std::size_t groups) {
  if (q >= ht.weights.rows()) throw ConfigError("query position out of range");
  const std::size_t hd = ht.values.cols();
  MassSplit s;
  s.mass.assign(groups, 0.0);
  s.sum.assign(groups, Matrix(1, hd));
  for (std::size_t k = 0; k < f.owners.size(); ++k) {
    const std::size_t g = static_cast<std::size_t>(f.owners[k] + 1);
    if (g >= groups) throw ConfigError("more plugins in the trace than expected");
    const double w = ht.weights(q, k);
    s.mass[g] += w;
    for (std::size_t c = 0; c < hd; ++c) s.sum[g][c] += w * ht.values(k, c);
  }
  return s;
}

Matrix scaled(const Matrix& m, double f) {
  Matrix out = m;
  for (double& v : out.values()) v *= f;
  return out;
}

Matrix output_row(const HeadTrace& ht, std::size_t q) {
  Matrix h(1, ht.output.cols());
  for (std::size_t c = 0; c < h.cols(); ++c) h[c] = ht.output(q, c);
  return h;
}

Matrix offset(const Matrix& sum, double mass, const Matrix& h, const Matrix& h_bar) {
  if (mass > 0.0) return scaled(sum, 1.0 / mass);
  if (norm(diff(h, h_bar)) > 1e-10) throw NumericError("plugin mass vanished while the output moved");
  return Matrix(1, sum.cols());
}

}  // namespace

std::vector<int> key_owners(const PluginCombo& combo, const PluginLayout& layout) {
  std::vector<int> owners;
  if (!combo.empty() && combo.family() == Family::kPrefix) {
    for (std::size_t i = 0; i < combo.plugins.size(); ++i) {
      const Plugin& p = combo.plugins[i];
      const std::size_t rows = p.prefix_k.empty() || p.prefix_k[0].empty() ? 0 : p.prefix_k[0][0].rows();
      owners.insert(owners.end(), rows, static_cast<int>(i));
    }
  }
  owners.insert(owners.end(), layout.x_len, -1);
  for (std::size_t i = 0; i < layout.c_len.size(); ++i) owners.insert(owners.end(), layout.c_len[i], static_cast<int>(i));
  for (std::size_t i = 0; i < combo.plugins.size(); ++i)
    owners.insert(owners.end(), combo.plugins[i].input_rows(), static_cast<int>(i));
  return owners;
}

TracedForward trace_forward(const BaseModel& m, const PluginCombo& combo, const Example& ex) {
  TracedForward f;
  Graph g;
  BoundModel bm = bind(g, m, false);
  std::vector<BoundPlugin> bound;
  for (const Plugin& p : combo.plugins) bound.push_back(bind_plugin(g, p, false));
  (void)encode_with_plugins(bm, ex.x, combo, bound, ex.aspects, &f.trace, &f.layout);
  f.owners = key_owners(combo, f.layout);
  return f;
}

MIReport measure_mi(const BaseModel& m, const PluginCombo& separate, const PluginCombo& joint,
                    std::span<const Example> eval) {
  if (eval.empty()) throw ConfigError("measure_mi: empty evaluation set");
  if (separate.plugins.size() != joint.plugins.size() || separate.family() != joint.family())
    throw ConfigError("measure_mi: separate and joint plugins differ in family or count");
  for (std::size_t i = 0; i < separate.plugins.size(); ++i)
    if (separate.plugins[i].aspect != joint.plugins[i].aspect)
      throw ConfigError("measure_mi: aspect order differs between settings");
  MIReport r;
  r.family = to_string(separate.family());
  r.per_layer.assign(static_cast<std::size_t>(m.config.enc_layers), 0.0);
  for (const Example& ex : eval) {
    const TracedForward a = trace_forward(m, separate, ex);
    const TracedForward b = trace_forward(m, joint, ex);
    if (a.layout.total != b.layout.total) throw ShapeError("measure_mi: settings produce different shapes");
    for (std::size_t l = 0; l < r.per_layer.size(); ++l) {
      const Matrix& ha = a.trace.layers[l].output;
      const Matrix& hb = b.trace.layers[l].output;
      double s = 0.0;
      for (std::size_t i = 0; i < ex.x.size(); ++i) s += row_distance(ha.row(i), hb.row(i));
      r.per_layer[l] += s / static_cast<double>(ex.x.size());
    }
  }
  for (double& v : r.per_layer) v /= static_cast<double>(eval.size());
  r.examples = eval.size();
  return r;
}

std::string mi_curve_csv(std::span<const MIReport> reports) {
  std::string out = "family,seed,layer,mi\n";
  for (const MIReport& r : reports)
    for (std::size_t l = 0; l < r.per_layer.size(); ++l)
      out += r.family + "," + std::to_string(r.seed) + "," + std::to_string(l + 1) + "," + fmt(r.per_layer[l]) + "\n";
  return out;
}

std::vector<MICurvePoint> mi_layer_curve(std::span<const MIReport> reports) {
  std::vector<std::string> families;
  for (const MIReport& r : reports)
    if (std::find(families.begin(), families.end(), r.family) == families.end()) families.push_back(r.family);
  std::vector<MICurvePoint> out;
  for (const std::string& fam : families) {
    std::vector<const MIReport*> rs;
    for (const MIReport& r : reports)
      if (r.family == fam) rs.push_back(&r);
    const std::size_t layers = rs.front()->per_layer.size();
    for (const MIReport* r : rs)
      if (r->per_layer.size() != layers) throw ConfigError("mi_layer_curve: layer counts differ");
    for (std::size_t l = 0; l < layers; ++l) {
      MICurvePoint p;
      p.family = fam;
      p.layer = static_cast<int>(l + 1);
      p.seeds = rs.size();
      for (const MIReport* r : rs) p.mean += r->per_layer[l];
      p.mean /= static_cast<double>(rs.size());
      if (rs.size() > 1) {
        double v = 0.0;
        for (const MIReport* r : rs) v += (r->per_layer[l] - p.mean) * (r->per_layer[l] - p.mean);
        p.sd = std::sqrt(v / static_cast<double>(rs.size() - 1));
      }
      out.push_back(p);
    }
  }
  return out;
}

HeadDecomposition decompose_head(const TracedForward& f, int layer, int head, std::size_t query_pos) {
  const HeadTrace& ht = head_trace(f, layer, head);
  int groups = 1;
  for (int o : f.owners) groups = std::max(groups, o + 2);
  const MassSplit ms = split_masses(f, ht, query_pos, static_cast<std::size_t>(groups));
  HeadDecomposition d;
  d.layer = layer;
  d.head = head;
  d.query_pos = query_pos;
  d.h = output_row(ht, query_pos);
  d.s = ms.mass[0];
  if (!(d.s > 0.0)) throw NumericError("decompose_head: no attention mass on source keys");
  Matrix plug(1, d.h.cols());
  d.t = 0.0;
  for (std::size_t g = 1; g < ms.mass.size(); ++g) {
    d.t += ms.mass[g];
    for (std::size_t c = 0; c < plug.cols(); ++c) plug[c] += ms.sum[g][c];
  }
  d.h_bar = scaled(ms.sum[0], 1.0 / d.s);
  d.delta = offset(plug, d.t, d.h, d.h_bar);
  d.delta_norm = norm(d.delta);
  Matrix rec(1, d.h.cols());
  for (std::size_t c = 0; c < rec.cols(); ++c) rec[c] = d.s * d.h_bar[c] + d.t * d.delta[c];
  d.residual = norm(diff(d.h, rec));
  d.mass_error = std::abs(d.s + d.t - 1.0);
  return d;
}

HeadDecomposition decompose_head(const BaseModel& m, int layer, int head, std::size_t query_pos,
                                 const Example& ex, const Plugin& plugin) {
  const PluginCombo c = combine_plugins(std::span<const Plugin>(&plugin, 1));
  return decompose_head(trace_forward(m, c, ex), layer, head, query_pos);
}

TwoPluginDecomposition decompose_two(const TracedForward& both, int layer, int head,
                                     std::size_t query_pos) {
  const HeadTrace& ht = head_trace(both, layer, head);
  const MassSplit ms = split_masses(both, ht, query_pos, 3);
  TwoPluginDecomposition d;
  d.layer = layer;
  d.head = head;
  d.query_pos = query_pos;
  d.h = output_row(ht, query_pos);
  d.gamma = ms.mass[0];
  d.alpha = ms.mass[1];
  d.beta = ms.mass[2];
  if (!(d.gamma > 0.0)) throw NumericError("decompose_two: no attention mass on source keys");
  d.h_bar = scaled(ms.sum[0], 1.0 / d.gamma);
  d.delta_i = d.alpha > 0.0 ? scaled(ms.sum[1], 1.0 / d.alpha) : Matrix(1, d.h.cols());
  d.delta_j = d.beta > 0.0 ? scaled(ms.sum[2], 1.0 / d.beta) : Matrix(1, d.h.cols());
  Matrix rec(1, d.h.cols());
  for (std::size_t c = 0; c < rec.cols(); ++c)
    rec[c] = d.gamma * d.h_bar[c] + d.alpha * d.delta_i[c] + d.beta * d.delta_j[c];
  d.residual = norm(diff(d.h, rec));
  d.mass_error = std::abs(d.gamma + d.alpha + d.beta - 1.0);
  return d;
}

TwoPluginDecomposition decompose_two(const BaseModel& m, int layer, int head, std::size_t query_pos,
                                     const Example& ex, const Plugin& pi, const Plugin& pj) {
  const Plugin both[] = {pi, pj};
  TwoPluginDecomposition d = decompose_two(trace_forward(m, combine_plugins(both), ex), layer, head, query_pos);
  const HeadDecomposition a = decompose_head(m, layer, head, query_pos, ex, pi);
  const HeadDecomposition b = decompose_head(m, layer, head, query_pos, ex, pj);
  d.conditions_hold = d.gamma < a.s && d.gamma < b.s && d.alpha < a.t && d.beta < b.t;
  return d;
}

PairTraces trace_pair(const BaseModel& m, const Example& ex, const Plugin& pi, const Plugin& pj,
                      const Plugin& joint_i, const Plugin& joint_j) {
  PairTraces t;
  t.single_i = trace_forward(m, combine_plugins(std::span<const Plugin>(&pi, 1)), ex);
  t.single_j = trace_forward(m, combine_plugins(std::span<const Plugin>(&pj, 1)), ex);
  const Plugin zs[] = {pi, pj};
  const Plugin jt[] = {joint_i, joint_j};
  t.zero_shot = trace_forward(m, combine_plugins(zs), ex);
  t.joint = trace_forward(m, combine_plugins(jt), ex);
  return t;
}

namespace {

double assumption_margin(const PairTraces& t, int layer, int head, std::size_t q) {
  const TwoPluginDecomposition jd = decompose_two(t.joint, layer, head, q);
  const HeadDecomposition a = decompose_head(t.single_i, layer, head, q);
  const HeadDecomposition b = decompose_head(t.single_j, layer, head, q);
  return norm(diff(jd.h, jd.h_bar)) - (norm(diff(a.h, a.h_bar)) + norm(diff(b.h, b.h_bar)));
}

}  // namespace

AssumptionCheck check_assumption(const PairTraces& t, int layer) {
  AssumptionCheck c;
  const std::size_t heads = t.joint.trace.layers.at(static_cast<std::size_t>(layer - 1)).attention.heads.size();
  std::size_t holds = 0;
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t q = 0; q < t.joint.layout.x_len; ++q) {
      const double m = assumption_margin(t, layer, static_cast<int>(h), q);
      c.margins.push_back(m);
      if (m > 0.0) ++holds;
    }
  c.fraction = c.margins.empty() ? 0.0 : static_cast<double>(holds) / static_cast<double>(c.margins.size());
  return c;
}

AssumptionCheck check_assumption(const BaseModel& m, int layer, const Example& ex, const Plugin& pi,
                                 const Plugin& pj, const Plugin& joint_i, const Plugin& joint_j) {
  return check_assumption(trace_pair(m, ex, pi, pj, joint_i, joint_j), layer);
}

BoundEstimate single_head_bound(const PairTraces& t, int layer, int head, std::size_t query_pos) {
  const TwoPluginDecomposition zs = decompose_two(t.zero_shot, layer, head, query_pos);
  const TwoPluginDecomposition jt = decompose_two(t.joint, layer, head, query_pos);
  const HeadDecomposition a = decompose_head(t.single_i, layer, head, query_pos);
  const HeadDecomposition b = decompose_head(t.single_j, layer, head, query_pos);
  BoundEstimate e;
  e.layer = layer;
  e.head = head;
  e.query_pos = query_pos;
  e.lhs = norm(diff(jt.h, zs.h));
  e.ti_minus_alpha = a.t - zs.alpha;
  e.tj_minus_beta = b.t - zs.beta;
  e.delta_i_norm = a.delta_norm;
  e.delta_j_norm = b.delta_norm;
  e.rhs = e.ti_minus_alpha * e.delta_i_norm + e.tj_minus_beta * e.delta_j_norm;
  e.rhs_centered = e.ti_minus_alpha * norm(diff(a.delta, a.h_bar)) + e.tj_minus_beta * norm(diff(b.delta, b.h_bar));
  e.assumption_margin = norm(diff(jt.h, jt.h_bar)) - (norm(diff(a.h, a.h_bar)) + norm(diff(b.h, b.h_bar)));
  e.assumption_holds = e.assumption_margin > 0.0;
  e.mass_conditions = zs.gamma < a.s && zs.gamma < b.s && zs.alpha < a.t && zs.beta < b.t;
  return e;
}

QRResult householder_qr(const Matrix& a) {
  const std::size_t m = a.rows(), n = a.cols();
  QRResult res;
  res.r = a;
  res.q = Matrix::identity(m);
  const double scale = std::max(1.0, frobenius_norm(a));
  for (std::size_t k = 0; k < std::min(m - (m > 0 ? 1 : 0), n); ++k) {
    double xn = 0.0;
    for (std::size_t i = k; i < m; ++i) xn += res.r(i, k) * res.r(i, k);
    xn = std::sqrt(xn);
    if (xn <= 1e-14 * scale) {
      res.rank_deficient = true;
      continue;
    }
    std::vector<double> v(m - k);
    for (std::size_t i = k; i < m; ++i) v[i - k] = res.r(i, k);
    v[0] += (v[0] >= 0.0 ? xn : -xn);
    double vn = 0.0;
    for (double x : v) vn += x * x;
    vn = std::sqrt(vn);
    for (double& x : v) x /= vn;
    // R <- (I - 2 v v^T) R on rows k.., Q <- Q (I - 2 v v^T) on cols k..
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t i = k; i < m; ++i) d += v[i - k] * res.r(i, j);
      for (std::size_t i = k; i < m; ++i) res.r(i, j) -= 2.0 * v[i - k] * d;
    }
    for (std::size_t i = 0; i < m; ++i) {
      double d = 0.0;
      for (std::size_t j = k; j < m; ++j) d += res.q(i, j) * v[j - k];
      for (std::size_t j = k; j < m; ++j) res.q(i, j) -= 2.0 * d * v[j - k];
    }
    for (std::size_t i = k + 1; i < m; ++i) res.r(i, k) = 0.0;
  }
  for (std::size_t k = 0; k < std::min(m, n); ++k)
    if (std::abs(res.r(k, k)) <= 1e-12 * scale) res.rank_deficient = true;
  return res;
}

MultiHeadBound multi_head_bound(const BaseModel& m, const PairTraces& t, int layer, std::size_t query_pos) {
  if (layer < 1 || layer > m.config.enc_layers) throw ConfigError("layer out of range");
  const Matrix& wo = m.enc[static_cast<std::size_t>(layer - 1)].attn.wo;
  MultiHeadBound b;
  b.layer = layer;
  b.query_pos = query_pos;
  b.heads = m.config.heads;
  const std::size_t hd = static_cast<std::size_t>(m.config.head_dim());
  Matrix cat(1, static_cast<std::size_t>(m.config.d_model));
  double sq = 0.0;
  for (int k = 0; k < b.heads; ++k) {
    const Matrix hj = output_row(head_trace(t.joint, layer, k), query_pos);
    const Matrix hz = output_row(head_trace(t.zero_shot, layer, k), query_pos);
    const Matrix dk = diff(hj, hz);
    for (std::size_t c = 0; c < hd; ++c) cat[static_cast<std::size_t>(k) * hd + c] = dk[c];
    sq += frobenius_norm(dk) * frobenius_norm(dk);
    b.head_terms.push_back(single_head_bound(t, layer, k, query_pos).rhs);
  }
  b.lhs = frobenius_norm(matmul(cat, wo));
  const QRResult qr = householder_qr(wo);
  b.rank_deficient = qr.rank_deficient;
  double lam = 0.0;
  const std::size_t n = std::min(qr.r.rows(), qr.r.cols());
  for (std::size_t k = 0; k < n; ++k) lam += std::abs(qr.r(k, k));
  b.lambda_o = lam / static_cast<double>(n);
  b.approx = b.lambda_o * std::sqrt(sq);
  b.approx_residual = b.lhs - b.approx;
  double terms = 0.0;
  for (double x : b.head_terms) terms += x;
  b.rhs = b.lambda_o / std::sqrt(static_cast<double>(b.heads)) * terms;
  return b;
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) return std::nullopt;
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

GateStats gate_stats(const Plugin& p) {
  if (p.family != Family::kGated) throw ConfigError("gate_stats: plugin " + p.aspect + " is not gated");
  GateStats s;
  std::vector<double> g, l1;
  for (std::size_t l = 0; l < p.gates.size(); ++l) {
    GateLayerStats st;
    st.layer = static_cast<int>(l + 1);
    double gs = 0.0;
    for (double x : p.gates[l].values()) gs += x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    st.gate_mean = gs / static_cast<double>(p.gates[l].size());
    double ps = 0.0;
    const Matrix& pm = p.layer_p[l];
    for (std::size_t r = 0; r < pm.rows(); ++r)
      for (double x : pm.row(r)) ps += std::abs(x);
    st.p_l1_mean = pm.rows() ? ps / static_cast<double>(pm.rows()) : 0.0;
    g.push_back(st.gate_mean);
    l1.push_back(st.p_l1_mean);
    s.layers.push_back(st);
  }
  s.correlation = pearson(g, l1);
  return s;
}

std::string gates_csv(const GateStats& s) {
  std::string out = "layer,gate_mean,p_l1_mean\n";
  for (const auto& l : s.layers)
    out += std::to_string(l.layer) + "," + fmt(l.gate_mean) + "," + fmt(l.p_l1_mean) + "\n";
  return out;
}

}  // namespace mctg
