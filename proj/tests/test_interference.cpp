#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "mctg/errors.hpp"
#include "mctg/interference.hpp"
#include "oracle.hpp"

using namespace mctg;

namespace {

ModelConfig small_config(int heads = 2) {
  ModelConfig c;
  c.d_model = 16;
  c.heads = heads;
  c.enc_layers = 2;
  c.dec_layers = 1;
  c.max_len = 32;
  c.prompt_len = 3;
  return c;
}

BaseModel frozen_model(std::uint64_t seed, int heads = 2) {
  Rng rng(seed);
  BaseModel m = BaseModel::init(small_config(heads), rng);
  m.frozen = true;
  return m;
}

Plugin random_plugin(const std::string& aspect, Family f, Rng& rng, int heads = 2) {
  Plugin p = Plugin::init(AspectChoice::parse(aspect), f, small_config(heads), rng);
  for (Matrix* m : p.parameters())
    for (double& v : m->values()) v = rng.gaussian(0.0, 0.5);
  return p;
}

Example example(Rng& rng) {
  Example e;
  for (int i = 0, n = rng.uniform_int(3, 6); i < n; ++i) e.x.push_back(rng.uniform_int(10, 37));
  e.aspects = {{"SHIFT", std::string("+1")}, {"MARK", std::string("m2")}};
  e.y = compose_transforms(e.x, e.aspects);
  return e;
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.gaussian();
  return m;
}

/// One-layer, one-head trace built by hand: rows of `values` owned by `owners`.
TracedForward hand_trace(std::vector<double> weights, Matrix values, std::vector<int> owners) {
  TracedForward f;
  HeadTrace ht;
  ht.weights = Matrix(1, weights.size(), weights);
  ht.values = values;
  ht.output = matmul(ht.weights, values);
  EncoderLayerTrace lt;
  lt.attention.heads.push_back(ht);
  f.trace.layers.push_back(lt);
  f.owners = std::move(owners);
  f.layout.x_len = 1;
  return f;
}

}  // namespace

TEST(Owners, OrderMatchesKeyLayout) {
  Rng rng(1);
  const Example ex = example(rng);
  for (Family fam : {Family::kPrompt, Family::kPrefix, Family::kGated}) {
    const Plugin both[] = {random_plugin("SHIFT=+1", fam, rng), random_plugin("MARK=m2", fam, rng)};
    const PluginCombo combo = combine_plugins(both);
    PluginLayout lay;
    build_input(ex.x, combo, ex.aspects, small_config(), &lay);
    const std::vector<int> o = key_owners(combo, lay);
    std::vector<int> want;
    if (fam == Family::kPrefix) want = {0, 0, 0, 1, 1, 1};
    want.insert(want.end(), ex.x.size(), -1);
    if (fam != Family::kPrefix) {
      for (int v : {0, 0, 1, 1}) want.push_back(v);
      for (int v : {0, 0, 0, 1, 1, 1}) want.push_back(v);
    }
    EXPECT_EQ(o, want) << to_string(fam);
  }
}

TEST(Decomposition, SinglePluginReconstructsWithRestrictedSoftmax) {
  const BaseModel m = frozen_model(2);
  Rng rng(3);
  for (Family fam : {Family::kPrompt, Family::kPrefix, Family::kGated}) {
    const Plugin p = random_plugin("SHIFT=+1", fam, rng);
    const Example ex = example(rng);
    const TracedForward f = trace_forward(m, combine_plugins(std::span<const Plugin>(&p, 1)), ex);
    for (int layer = 1; layer <= 2; ++layer) {
      const EncoderLayerTrace& lt = f.trace.layers[static_cast<std::size_t>(layer - 1)];
      const auto& aw = m.enc[static_cast<std::size_t>(layer - 1)].attn;
      // Reference: the head attending over source keys only.
      const oracle::Mat in = oracle::from(lt.input);
      const oracle::Mat src(in.begin(), in.begin() + static_cast<std::ptrdiff_t>(ex.x.size()));
      const oracle::Mat q = oracle::mul(in, oracle::from(aw.wq)), k = oracle::mul(src, oracle::from(aw.wk)),
                        v = oracle::mul(src, oracle::from(aw.wv));
      for (int h = 0; h < 2; ++h) {
        const oracle::Mat ref = oracle::head_attention(oracle::cols(q, 8u * h, 8), oracle::cols(k, 8u * h, 8),
                                                       oracle::cols(v, 8u * h, 8), false, 0);
        for (std::size_t pos = 0; pos < ex.x.size(); ++pos) {
          const HeadDecomposition d = decompose_head(f, layer, h, pos);
          EXPECT_LT(d.residual, 1e-10);
          EXPECT_LT(d.mass_error, 1e-12);
          EXPECT_GT(d.t, 0.0);
          EXPECT_LT(d.t, 1.0);
          for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(d.h_bar[c], ref[pos][c], 1e-10);
        }
      }
    }
  }
}

TEST(Decomposition, TwoPluginsAndConditions) {
  const BaseModel m = frozen_model(4);
  Rng rng(5);
  const Plugin pi = random_plugin("SHIFT=+1", Family::kGated, rng);
  const Plugin pj = random_plugin("MARK=m2", Family::kGated, rng);
  const Example ex = example(rng);
  const TwoPluginDecomposition d = decompose_two(m, 1, 0, 0, ex, pi, pj);
  EXPECT_LT(d.residual, 1e-10);
  EXPECT_LT(d.mass_error, 1e-12);
  ASSERT_TRUE(d.conditions_hold.has_value());
  const HeadDecomposition a = decompose_head(m, 1, 0, 0, ex, pi);
  const HeadDecomposition b = decompose_head(m, 1, 0, 0, ex, pj);
  // Adding a second plugin can only take mass from the first plugin and the source.
  EXPECT_LT(d.gamma, a.s);
  EXPECT_LT(d.alpha, a.t);
  EXPECT_LT(d.beta, b.t);
  // At layer 1 the source rows and plugin-i rows are identical across forwards,
  // so the restricted-softmax pieces coincide.
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_NEAR(d.h_bar[c], a.h_bar[c], 1e-12);
    EXPECT_NEAR(d.delta_i[c], a.delta[c], 1e-12);
    EXPECT_NEAR(d.delta_j[c], b.delta[c], 1e-12);
  }
  EXPECT_THROW(decompose_head(m, 3, 0, 0, ex, pi), ConfigError);
  EXPECT_THROW(decompose_head(m, 1, 2, 0, ex, pi), ConfigError);
}

TEST(Bound, HandBuiltClosedForm) {
  // Values: source (1,0), plugin i (0,2), plugin j (0,-1). Masses chosen by hand.
  const Matrix v{{1, 0}, {0, 2}, {0, -1}};
  PairTraces t;
  t.single_i = hand_trace({0.6, 0.4}, Matrix{{1, 0}, {0, 2}}, {-1, 0});
  t.single_j = hand_trace({0.7, 0.3}, Matrix{{1, 0}, {0, -1}}, {-1, 0});
  t.zero_shot = hand_trace({0.5, 0.3, 0.2}, v, {-1, 0, 1});
  t.joint = hand_trace({0.2, 0.5, 0.3}, v, {-1, 0, 1});
  const BoundEstimate e = single_head_bound(t, 1, 0, 0);
  // h_zs = (0.5, 0.4), h_joint = (0.2, 0.7).
  EXPECT_NEAR(e.lhs, std::sqrt(0.09 + 0.09), 1e-15);
  EXPECT_NEAR(e.ti_minus_alpha, 0.1, 1e-15);
  EXPECT_NEAR(e.tj_minus_beta, 0.1, 1e-15);
  EXPECT_NEAR(e.rhs, 0.1 * 2 + 0.1 * 1, 1e-15);
  EXPECT_NEAR(e.rhs_centered, 0.1 * std::sqrt(5.0) + 0.1 * std::sqrt(2.0), 1e-15);
  EXPECT_TRUE(e.mass_conditions);
  // Joint |h - h_bar| = |(-0.8, 0.7)|; singles |(-0.4, 0.8)|, |(-0.3, -0.3)|.
  EXPECT_NEAR(e.assumption_margin, std::sqrt(1.13) - std::sqrt(0.8) - std::sqrt(0.18), 1e-15);
  EXPECT_FALSE(e.assumption_holds);
}

TEST(Bound, UncentredFormFailsUnderItsOwnConditions) {
  // Every plugin value equals the source value, so plugins move nothing except
  // the joint pair, which moves the output by 0.1.
  PairTraces t;
  t.single_i = hand_trace({0.6, 0.4}, Matrix{{1, 0}, {1, 0}}, {-1, 0});
  t.single_j = hand_trace({0.6, 0.4}, Matrix{{1, 0}, {1, 0}}, {-1, 0});
  t.zero_shot = hand_trace({0.5, 0.25, 0.25}, Matrix{{1, 0}, {1, 0}, {1, 0}}, {-1, 0, 1});
  t.joint = hand_trace({0.5, 0.25, 0.25}, Matrix{{1, 0}, {1, 0}, {1, 0.4}}, {-1, 0, 1});
  const BoundEstimate e = single_head_bound(t, 1, 0, 0);
  EXPECT_TRUE(e.assumption_holds);
  EXPECT_TRUE(e.mass_conditions);
  EXPECT_NEAR(e.lhs, 0.1, 1e-15);
  EXPECT_NEAR(e.rhs, 0.3, 1e-15);
  EXPECT_LT(e.lhs, e.rhs - 0.1);
  EXPECT_NEAR(e.rhs_centered, 0.0, 1e-15);
}

TEST(Bound, CentredFormHoldsWhenSourceOutputIsShared) {
  // With one source key every configuration shares h_bar, and the centred
  // bound follows from the triangle inequality.
  Rng rng(21);
  const std::vector<double> src{rng.gaussian(), rng.gaussian()};
  auto weights = [&rng](std::size_t n) {
    std::vector<double> w(n);
    double s = 0.0;
    for (double& v : w) s += (v = rng.uniform() + 1e-3);
    for (double& v : w) v /= s;
    return w;
  };
  auto values = [&](std::size_t plugin_rows) {
    Matrix v(1 + plugin_rows, 2);
    v(0, 0) = src[0];
    v(0, 1) = src[1];
    for (std::size_t r = 1; r <= plugin_rows; ++r)
      for (std::size_t c = 0; c < 2; ++c) v(r, c) = rng.gaussian(0.0, 2.0);
    return v;
  };
  std::size_t conditional = 0;
  for (int trial = 0; trial < 20000; ++trial) {
    PairTraces t;
    const Matrix vi = values(1), vj = values(1);
    Matrix both(3, 2);
    for (std::size_t c = 0; c < 2; ++c) {
      both(0, c) = src[c];
      both(1, c) = vi(1, c);
      both(2, c) = vj(1, c);
    }
    t.single_i = hand_trace(weights(2), vi, {-1, 0});
    t.single_j = hand_trace(weights(2), vj, {-1, 0});
    t.zero_shot = hand_trace(weights(3), both, {-1, 0, 1});
    t.joint = hand_trace(weights(3), values(2), {-1, 0, 1});
    const BoundEstimate e = single_head_bound(t, 1, 0, 0);
    if (!e.assumption_holds || !e.mass_conditions) continue;
    ++conditional;
    EXPECT_GE(e.lhs, e.rhs_centered - 1e-12);
  }
  EXPECT_GT(conditional, 100u);
}

TEST(Bound, ZeroPluginMassWithMovedOutputIsNumericError) {
  const TracedForward f = hand_trace({1.0, 0.0}, Matrix{{1, 0}, {0, 2}}, {-1, 0});
  EXPECT_EQ(decompose_head(f, 1, 0, 0).t, 0.0);
  EXPECT_EQ(decompose_head(f, 1, 0, 0).delta_norm, 0.0);
  const TracedForward none = hand_trace({0.0, 1.0}, Matrix{{1, 0}, {0, 2}}, {-1, 0});
  EXPECT_THROW(decompose_head(none, 1, 0, 0), NumericError);
}

TEST(QR, MatchesEigenAndReconstructs) {
  Rng rng(6);
  for (std::size_t n : {1u, 4u, 16u, 32u}) {
    const Matrix a = random_matrix(n, n, rng);
    const QRResult qr = householder_qr(a);
    EXPECT_FALSE(qr.rank_deficient);
    EXPECT_LT(max_abs_diff(matmul(transpose(qr.q), qr.q), Matrix::identity(n)), 1e-10);
    EXPECT_LT(max_abs_diff(matmul(qr.q, qr.r), a), 1e-10);
    Eigen::MatrixXd e(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) e(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a(i, j);
    const Eigen::MatrixXd r = Eigen::HouseholderQR<Eigen::MatrixXd>(e).matrixQR().triangularView<Eigen::Upper>();
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      EXPECT_NEAR(std::abs(qr.r(i, i)), std::abs(r(ii, ii)), 1e-10);
      for (std::size_t j = 0; j < i; ++j) EXPECT_EQ(qr.r(i, j), 0.0);
    }
  }
  const Matrix rect = random_matrix(6, 3, rng);
  const QRResult rq = householder_qr(rect);
  EXPECT_LT(max_abs_diff(matmul(rq.q, rq.r), rect), 1e-10);
  Matrix sing = random_matrix(4, 4, rng);
  for (std::size_t i = 0; i < 4; ++i) sing(i, 3) = sing(i, 0) * 2.0;
  EXPECT_TRUE(householder_qr(sing).rank_deficient);
}

TEST(MultiHead, SingleHeadReductionAndApproximation) {
  Rng rng(7);
  for (int heads : {1, 2}) {
    const BaseModel m = frozen_model(8, heads);
    const Plugin pi = random_plugin("SHIFT=+1", Family::kGated, rng, heads);
    const Plugin pj = random_plugin("MARK=m2", Family::kGated, rng, heads);
    const Plugin ji = random_plugin("SHIFT=+1", Family::kGated, rng, heads);
    const Plugin jj = random_plugin("MARK=m2", Family::kGated, rng, heads);
    const Example ex = example(rng);
    const PairTraces t = trace_pair(m, ex, pi, pj, ji, jj);
    const MultiHeadBound b = multi_head_bound(m, t, 2, 1);
    const QRResult qr = householder_qr(m.enc[1].attn.wo);
    double lam = 0;
    for (std::size_t k = 0; k < 16; ++k) lam += std::abs(qr.r(k, k));
    EXPECT_DOUBLE_EQ(b.lambda_o, lam / 16.0);
    double terms = 0;
    for (int k = 0; k < heads; ++k) {
      EXPECT_EQ(b.head_terms[static_cast<std::size_t>(k)], single_head_bound(t, 2, k, 1).rhs);
      terms += b.head_terms[static_cast<std::size_t>(k)];
    }
    if (heads == 1) {
      EXPECT_EQ(b.rhs, b.lambda_o * b.head_terms[0]);
      EXPECT_NEAR(b.approx, b.lambda_o * single_head_bound(t, 2, 0, 1).lhs, 1e-12);
    }
    EXPECT_NEAR(b.rhs, b.lambda_o / std::sqrt(heads) * terms, 1e-14);
    EXPECT_NEAR(b.approx_residual, b.lhs - b.approx, 1e-15);
  }
}

TEST(MutualInterference, IdenticalPluginsGiveExactZero) {
  const BaseModel m = frozen_model(9);
  Rng rng(10);
  std::vector<Example> eval;
  for (int i = 0; i < 5; ++i) eval.push_back(example(rng));
  for (Family fam : {Family::kPrompt, Family::kPrefix, Family::kGated}) {
    const Plugin both[] = {random_plugin("SHIFT=+1", fam, rng), random_plugin("MARK=m2", fam, rng)};
    const PluginCombo c = combine_plugins(both);
    const MIReport r = measure_mi(m, c, c, eval);
    ASSERT_EQ(r.per_layer.size(), 2u);
    for (double v : r.per_layer) EXPECT_EQ(v, 0.0);
    // Different plugins interfere at every layer.
    const Plugin other[] = {random_plugin("SHIFT=+1", fam, rng), random_plugin("MARK=m2", fam, rng)};
    for (double v : measure_mi(m, c, combine_plugins(other), eval).per_layer) EXPECT_GT(v, 0.0);
    const Plugin swapped[] = {both[1], both[0]};
    EXPECT_THROW(measure_mi(m, c, combine_plugins(swapped), eval), ConfigError);
  }
}

TEST(MutualInterference, CsvAndSeedCurve) {
  std::vector<MIReport> rs(2);
  rs[0] = {"gated", 1, {0.5, 1.0}, 3};
  rs[1] = {"gated", 2, {1.5, 2.0}, 3};
  EXPECT_EQ(mi_curve_csv(rs), "family,seed,layer,mi\ngated,1,1,0.5\ngated,1,2,1\ngated,2,1,1.5\ngated,2,2,2\n");
  const auto curve = mi_layer_curve(rs);
  ASSERT_EQ(curve.size(), 2u);
  EXPECT_DOUBLE_EQ(curve[0].mean, 1.0);
  EXPECT_DOUBLE_EQ(curve[0].sd, std::sqrt(0.5));
  EXPECT_EQ(curve[1].seeds, 2u);
}

TEST(GateStats, ZeroGatesAndCorrelation) {
  Rng rng(11);
  Plugin p = Plugin::init(AspectChoice::parse("SHIFT"), Family::kGated, small_config(), rng);
  p.layer_p[0].fill(1.0);
  p.layer_p[1].fill(-2.0);
  const GateStats s = gate_stats(p);
  ASSERT_EQ(s.layers.size(), 2u);
  EXPECT_EQ(s.layers[0].gate_mean, 0.5);
  EXPECT_DOUBLE_EQ(s.layers[0].p_l1_mean, 16.0);
  EXPECT_DOUBLE_EQ(s.layers[1].p_l1_mean, 32.0);
  EXPECT_FALSE(s.correlation.has_value());
  EXPECT_EQ(gates_csv(s), "layer,gate_mean,p_l1_mean\n1,0.5,16\n2,0.5,32\n");
  p.gates[0].fill(-30.0);
  p.gates[1].fill(30.0);
  const GateStats e = gate_stats(p);
  EXPECT_GT(e.layers[0].gate_mean, 0.0);
  EXPECT_LT(e.layers[0].gate_mean, 1e-12);
  EXPECT_LT(e.layers[1].gate_mean, 1.0);
  EXPECT_GT(e.layers[1].gate_mean, 1.0 - 1e-12);
  ASSERT_TRUE(e.correlation.has_value());
  EXPECT_NEAR(*e.correlation, 1.0, 1e-12);
  EXPECT_THROW(gate_stats(Plugin::init(AspectChoice::parse("SHIFT"), Family::kPrompt, small_config(), rng)),
               ConfigError);
}

TEST(Pearson, KnownValues) {
  const std::vector<double> a{1, 2, 3, 4}, b{2, 4, 6, 8}, c{4, 3, 2, 1};
  EXPECT_NEAR(*pearson(a, b), 1.0, 1e-15);
  EXPECT_NEAR(*pearson(a, c), -1.0, 1e-15);
  EXPECT_FALSE(pearson(a, std::vector<double>{1, 2}).has_value());
}
