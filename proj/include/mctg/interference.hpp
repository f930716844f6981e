#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mctg/plugins.hpp"

namespace mctg {

/// Per-layer mutual interference: mean over examples and x positions of the
/// L2 distance between zero-shot and jointly trained encoder states.
struct MIReport {
  std::string family;
  std::uint64_t seed = 0;
  std::vector<double> per_layer;  // index j-1 holds MI at encoder layer j
  std::size_t examples = 0;
};

MIReport measure_mi(const BaseModel& m, const PluginCombo& separate, const PluginCombo& joint,
                    std::span<const Example> eval);

/// mi_curve.csv rows: family,seed,layer,mi
std::string mi_curve_csv(std::span<const MIReport> reports);

/// Mean and sample standard deviation over seeds, per family and layer.
struct MICurvePoint {
  std::string family;
  int layer = 0;
  double mean = 0.0;
  double sd = 0.0;
  std::size_t seeds = 0;
};
std::vector<MICurvePoint> mi_layer_curve(std::span<const MIReport> reports);

/// Owner of each attention key at a layer of a plugged forward: -1 for source
/// positions, i for rows contributed by plugin i (its prefix rows, its
/// constraint text and its continuous rows).
std::vector<int> key_owners(const PluginCombo& combo, const PluginLayout& layout);

/// A plugged forward with its activation trace.
struct TracedForward {
  ActivationTrace trace;
  PluginLayout layout;
  std::vector<int> owners;
};

TracedForward trace_forward(const BaseModel& m, const PluginCombo& combo, const Example& ex);

struct HeadDecomposition {
  int layer = 0;  // 1-based
  int head = 0;
  std::size_t query_pos = 0;
  Matrix h;      // observed head output (1 x head_dim)
  Matrix h_bar;  // head output with plugin keys removed
  double s = 1.0, t = 0.0;
  Matrix delta;  // offset; zero when t == 0
  double delta_norm = 0.0;
  double residual = 0.0;    // ||h - (s h_bar + t delta)||
  double mass_error = 0.0;  // |s + t - 1|
};

/// h = s h_bar + t delta from one traced forward (plugin 0 owns all plugin keys).
HeadDecomposition decompose_head(const TracedForward& f, int layer, int head, std::size_t query_pos);
HeadDecomposition decompose_head(const BaseModel& m, int layer, int head, std::size_t query_pos,
                                 const Example& ex, const Plugin& plugin);

struct TwoPluginDecomposition {
  int layer = 0;
  int head = 0;
  std::size_t query_pos = 0;
  Matrix h, h_bar;
  double gamma = 1.0, alpha = 0.0, beta = 0.0;
  Matrix delta_i, delta_j;
  double residual = 0.0;
  double mass_error = 0.0;  // |gamma + alpha + beta - 1|
  /// gamma < s_i, gamma < s_j, alpha < t_i, beta < t_j against the single
  /// plugin forwards; unset when those were not supplied.
  std::optional<bool> conditions_hold;
};

TwoPluginDecomposition decompose_two(const TracedForward& both, int layer, int head,
                                     std::size_t query_pos);
TwoPluginDecomposition decompose_two(const BaseModel& m, int layer, int head, std::size_t query_pos,
                                     const Example& ex, const Plugin& pi, const Plugin& pj);

/// Traces needed by the bound: plugins i and j alone, both separately trained
/// plugins together (zero-shot) and the jointly trained pair.
struct PairTraces {
  TracedForward single_i, single_j, zero_shot, joint;
};

PairTraces trace_pair(const BaseModel& m, const Example& ex, const Plugin& pi, const Plugin& pj,
                      const Plugin& joint_i, const Plugin& joint_j);

struct AssumptionCheck {
  double fraction = 0.0;        // share of (head, position) pairs where it holds
  std::vector<double> margins;  // lhs - rhs per pair, head-major
};

/// ||h~_ij - h_bar_ij|| > ||h^_i - h_bar_i|| + ||h^_j - h_bar_j|| over every head
/// and source position of `layer`.
AssumptionCheck check_assumption(const PairTraces& t, int layer);
AssumptionCheck check_assumption(const BaseModel& m, int layer, const Example& ex, const Plugin& pi,
                                 const Plugin& pj, const Plugin& joint_i, const Plugin& joint_j);

struct BoundEstimate {
  int layer = 0;
  int head = 0;
  std::size_t query_pos = 0;
  double lhs = 0.0;  // ||h~_ij - h^_ij||
  double rhs = 0.0;  // (t_i - alpha)||dh_i|| + (t_j - beta)||dh_j||
  /// Same with offsets measured from h_bar: (t_i - alpha)||dh_i - h_bar_i|| + ...
  double rhs_centered = 0.0;
  bool assumption_holds = false;  // the interaction predicate above
  bool mass_conditions = false;   // gamma < s_i, s_j; alpha < t_i; beta < t_j
  double assumption_margin = 0.0;
  double ti_minus_alpha = 0.0, tj_minus_beta = 0.0;
  double delta_i_norm = 0.0, delta_j_norm = 0.0;
  double margin() const { return lhs - rhs; }
};

BoundEstimate single_head_bound(const PairTraces& t, int layer, int head, std::size_t query_pos);

/// Householder QR: a = q r with q orthogonal (m x m), r upper triangular (m x n).
struct QRResult {
  Matrix q, r;
  bool rank_deficient = false;
};
QRResult householder_qr(const Matrix& a);

struct MultiHeadBound {
  int layer = 0;
  std::size_t query_pos = 0;
  double lhs = 0.0;          // ||concat_k(h~^k - h^^k) W_o||
  double approx = 0.0;       // lambda_o * sqrt(sum_k ||h~^k - h^^k||^2)
  double approx_residual = 0.0;  // lhs - approx
  double rhs = 0.0;          // lambda_o / sqrt(K) * sum_k head_terms[k]
  double lambda_o = 0.0;     // mean |diag R| of W_o
  int heads = 0;
  std::vector<double> head_terms;  // per-head single-head right-hand sides
  bool rank_deficient = false;
};

MultiHeadBound multi_head_bound(const BaseModel& m, const PairTraces& t, int layer, std::size_t query_pos);

struct GateLayerStats {
  int layer = 0;
  double gate_mean = 0.0;  // mean sigmoid(G^(j))
  double p_l1_mean = 0.0;  // mean L1 norm of the rows of P^(j)
};

struct GateStats {
  std::vector<GateLayerStats> layers;
  /// Pearson correlation of gate_mean and p_l1_mean across layers; unset when
  /// either has zero variance.
  std::optional<double> correlation;
};

GateStats gate_stats(const Plugin& p);
/// gates.csv rows: layer,gate_mean,p_l1_mean
std::string gates_csv(const GateStats& s);

std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

}  // namespace mctg
