#pragma once

// Brute-force reference implementation of the encoder-decoder forward pass,
// written with plain loops and independent of the autodiff library.

#include <cmath>
#include <functional>
#include <vector>

#include "mctg/plugins.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat from(const mctg::Matrix& m) {
  Mat out(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out[i][j] = m(i, j);
  return out;
}

inline Mat mul(const Mat& a, const Mat& b) {
  Mat out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < b.size(); ++k) s += a[i][k] * b[k][j];
      out[i][j] = s;
    }
  return out;
}

inline Mat cols(const Mat& a, std::size_t c0, std::size_t n) {
  Mat out(a.size(), std::vector<double>(n));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < n; ++j) out[i][j] = a[i][c0 + j];
  return out;
}

inline Mat plus(const Mat& a, const Mat& b) {
  Mat out = a;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[i][j] += b[i][j];
  return out;
}

inline Mat layer_norm(const Mat& a, const mctg::Matrix& g, const mctg::Matrix& b) {
  Mat out = a;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double n = static_cast<double>(a[i].size());
    double mean = 0.0;
    for (double v : a[i]) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : a[i]) var += (v - mean) * (v - mean);
    var /= n;
    for (std::size_t j = 0; j < a[i].size(); ++j) out[i][j] = (a[i][j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return out;
}

inline Mat relu(Mat a) {
  for (auto& r : a)
    for (double& v : r) v = v > 0.0 ? v : 0.0;
  return a;
}

/// Per-head extra key/value rows placed before the regular keys.
struct Prefix {
  Mat k, v;
};

/// Attention of one head; row i attends to keys [0, limit(i)).
inline Mat head_attention(const Mat& q, const Mat& k, const Mat& v, bool causal, std::size_t offset,
                          Mat* weights = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
  Mat out(q.size(), std::vector<double>(v[0].size(), 0.0));
  if (weights) weights->assign(q.size(), std::vector<double>(k.size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    const std::size_t lim = causal ? std::min(k.size(), i + offset + 1) : k.size();
    std::vector<double> s(lim);
    double mx = -1e300;
    for (std::size_t j = 0; j < lim; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < q[i].size(); ++c) d += q[i][c] * k[j][c];
      s[j] = d * scale;
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (double& x : s) z += (x = std::exp(x - mx));
    for (std::size_t j = 0; j < lim; ++j) {
      const double w = s[j] / z;
      if (weights) (*weights)[i][j] = w;
      for (std::size_t c = 0; c < v[0].size(); ++c) out[i][c] += w * v[j][c];
    }
  }
  return out;
}

inline Mat mha(const mctg::AttentionWeights& w, const Mat& qin, const Mat& kvin, int heads, bool causal,
               const std::vector<Prefix>* prefixes = nullptr) {
  const Mat q = mul(qin, from(w.wq)), k = mul(kvin, from(w.wk)), v = mul(kvin, from(w.wv));
  const std::size_t d = q[0].size(), hd = d / static_cast<std::size_t>(heads);
  Mat cat(qin.size(), std::vector<double>(d));
  for (int h = 0; h < heads; ++h) {
    Mat kh = cols(k, static_cast<std::size_t>(h) * hd, hd), vh = cols(v, static_cast<std::size_t>(h) * hd, hd);
    std::size_t off = 0;
    if (prefixes) {
      const Prefix& p = (*prefixes)[static_cast<std::size_t>(h)];
      off = p.k.size();
      kh.insert(kh.begin(), p.k.begin(), p.k.end());
      vh.insert(vh.begin(), p.v.begin(), p.v.end());
    }
    const Mat oh = head_attention(cols(q, static_cast<std::size_t>(h) * hd, hd), kh, vh, causal, off);
    for (std::size_t i = 0; i < oh.size(); ++i)
      for (std::size_t c = 0; c < hd; ++c) cat[i][static_cast<std::size_t>(h) * hd + c] = oh[i][c];
  }
  return mul(cat, from(w.wo));
}

inline Mat embed(const mctg::BaseModel& m, const mctg::SegmentedInput& in) {
  Mat h;
  for (const auto& s : in.segments)
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      std::vector<double> row(static_cast<std::size_t>(m.config.d_model));
      for (std::size_t c = 0; c < row.size(); ++c)
        row[c] = m.tok_emb(static_cast<std::size_t>(s.tokens[i]), c) + m.pos_emb(i, c) +
                 m.seg_emb(static_cast<std::size_t>(s.segment_id), c);
      h.push_back(row);
    }
  return h;
}

struct EncoderHooks {
  Mat appended;                                   // rows after the text embeddings
  std::vector<std::vector<Prefix>> prefixes;      // [layer][head], empty for none
  std::function<Mat(int layer, const Mat&)> post;  // applied to LN(H + MHA(H))
};

inline Mat encode(const mctg::BaseModel& m, Mat h, const EncoderHooks& hooks = {}) {
  h.insert(h.end(), hooks.appended.begin(), hooks.appended.end());
  for (std::size_t l = 0; l < m.enc.size(); ++l) {
    const auto& w = m.enc[l];
    const auto* pre = hooks.prefixes.empty() ? nullptr : &hooks.prefixes[l];
    Mat a = layer_norm(plus(h, mha(w.attn, h, h, m.config.heads, false, pre)), w.ln1_g, w.ln1_b);
    if (hooks.post) a = hooks.post(static_cast<int>(l) + 1, a);
    h = layer_norm(plus(a, mul(relu(mul(a, from(w.w1))), from(w.w2))), w.ln2_g, w.ln2_b);
  }
  return h;
}

inline Mat decode(const mctg::BaseModel& m, const std::vector<int>& dec_in, const Mat& enc) {
  Mat x;
  for (std::size_t i = 0; i < dec_in.size(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.config.d_model));
    for (std::size_t c = 0; c < row.size(); ++c)
      row[c] = m.tok_emb(static_cast<std::size_t>(dec_in[i]), c) + m.pos_emb(i, c);
    x.push_back(row);
  }
  for (const auto& l : m.dec) {
    x = layer_norm(plus(x, mha(l.self_attn, x, x, m.config.heads, true)), l.ln1_g, l.ln1_b);
    x = layer_norm(plus(x, mha(l.cross_attn, x, enc, m.config.heads, false)), l.ln2_g, l.ln2_b);
    x = layer_norm(plus(x, mul(relu(mul(x, from(l.w1))), from(l.w2))), l.ln3_g, l.ln3_b);
  }
  return mul(x, from(m.out));
}

inline double max_abs_diff(const Mat& a, const mctg::Matrix& b) {
  if (a.size() != b.rows() || (a.size() && a[0].size() != b.cols())) return 1e300;
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) e = std::max(e, std::abs(a[i][j] - b(i, j)));
  return e;
}

/// Plugged encoder reference for every family, rows laid out as text,
/// then continuous plugin rows.
inline Mat encode_plugged(const mctg::BaseModel& m, const mctg::PluginCombo& combo, const mctg::SegmentedInput& in,
                          const mctg::PluginLayout& lay) {
  EncoderHooks hooks;
  if (!combo.empty() && combo.family() == mctg::Family::kPrefix) {
    hooks.prefixes.resize(m.enc.size());
    for (std::size_t l = 0; l < m.enc.size(); ++l)
      for (int h = 0; h < m.config.heads; ++h) {
        Prefix p;
        for (const auto& pl : combo.plugins) {
          const Mat k = from(pl.prefix_k[l][static_cast<std::size_t>(h)]);
          const Mat v = from(pl.prefix_v[l][static_cast<std::size_t>(h)]);
          p.k.insert(p.k.end(), k.begin(), k.end());
          p.v.insert(p.v.end(), v.begin(), v.end());
        }
        hooks.prefixes[l].push_back(p);
      }
  } else {
    for (const auto& pl : combo.plugins) {
      const Mat r = from(pl.prompt);
      hooks.appended.insert(hooks.appended.end(), r.begin(), r.end());
    }
    if (!combo.empty() && combo.family() == mctg::Family::kGated)
      hooks.post = [&combo, &lay](int layer, const Mat& a) {
        Mat out = a;
        for (std::size_t i = 0; i < combo.plugins.size(); ++i) {
          const auto& g = combo.plugins[i].gates[static_cast<std::size_t>(layer - 1)];
          const auto& p = combo.plugins[i].layer_p[static_cast<std::size_t>(layer - 1)];
          for (std::size_t r = 0; r < lay.p; ++r)
            for (std::size_t c = 0; c < out[0].size(); ++c) {
              const double s = 1.0 / (1.0 + std::exp(-g(r, c)));
              out[lay.row_begin[i] + r][c] = s * (a[lay.row_begin[i] + r][c] + p(r, c));
            }
        }
        return out;
      };
  }
  return encode(m, embed(m, in), hooks);
}

}  // namespace oracle
