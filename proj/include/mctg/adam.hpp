#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "mctg/tensor.hpp"

namespace mctg {

struct AdamSettings {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Linear warmup over `warmup` steps, then cosine decay to `floor` x peak at
/// step `total`.
inline double warmup_cosine(double peak, int step, int warmup, int total, double floor = 0.1) {
  if (warmup > 0 && step < warmup) return peak * static_cast<double>(step + 1) / warmup;
  if (total <= warmup) return peak;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  const double c = 0.5 * (1.0 + std::cos(3.14159265358979323846 * std::min(1.0, t)));
  return peak * (floor + (1.0 - floor) * c);
}

/// Adam with bias correction over a fixed list of parameter matrices.
class Adam {
 public:
  Adam(std::vector<Matrix*> params, AdamSettings s) : params_(std::move(params)), s_(s) {
    for (Matrix* p : params_) {
      m_.emplace_back(p->rows(), p->cols());
      v_.emplace_back(p->rows(), p->cols());
    }
  }

  /// grads[i] must match params[i] in shape.
  void step(std::span<const Matrix> grads) {
    if (grads.size() != params_.size()) throw ShapeError("Adam::step: gradient count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Matrix& p = *params_[k];
      const Matrix& g = grads[k];
      if (!g.same_shape(p)) throw ShapeError("Adam::step: gradient shape mismatch");
      Matrix& m = m_[k];
      Matrix& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = s_.beta1 * m[i] + (1.0 - s_.beta1) * g[i];
        v[i] = s_.beta2 * v[i] + (1.0 - s_.beta2) * g[i] * g[i];
        p[i] -= s_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + s_.eps);
      }
    }
  }

  long steps() const { return t_; }
  void set_lr(double lr) { s_.lr = lr; }
  double lr() const { return s_.lr; }

 private:
  std::vector<Matrix*> params_;
  AdamSettings s_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace mctg
