#include "mctg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace mctg {

// ---------------------------------------------------------------------------
// Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: data length " + std::to_string(data_.size()) +
                     " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ ? rows.begin()->size() : 0;
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw ShapeError("Matrix: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Matrix::shape_str() const {
  std::ostringstream os;
  os << rows_ << "x" << cols_;
  return os.str();
}

namespace {

// c += a * b, with a (m x k), b (k x n). Sum over k is sequential per entry.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c += a^T * b, with a (k x m), b (k x n).
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
                 std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), "matmul: " + a.shape_str() + " x " + b.shape_str());
  Matrix c(a.rows(), b.cols());
  gemm_acc(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double frobenius_norm(const Matrix& a) { return l2_norm(a.values()); }

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), "max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Tensor / Graph

const Matrix& Tensor::value() const { return graph_->value_of(id_); }

const Matrix& Tensor::grad() const { return graph_->nodes_[id_].grad; }

bool Tensor::requires_grad() const { return graph_->requires_grad_of(id_); }

double Tensor::item() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("item() on " + v.shape_str() + " tensor");
  return v[0];
}

const Matrix& Graph::value_of(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

Matrix& Graph::accum(std::size_t id) {
  Node& n = nodes_[id];
  if (n.work.empty()) {
    const Matrix& v = value_of(id);
    n.work = Matrix(v.rows(), v.cols());
  }
  return n.work;
}

Tensor Graph::constant(Matrix m) {
  if (!m.all_finite()) throw NumericError("constant: non-finite value");
  nodes_.push_back(Node{std::move(m), nullptr, {}, {}, false, {}});
  return Tensor(this, nodes_.size() - 1);
}

Tensor Graph::variable(Matrix m) {
  if (!m.all_finite()) throw NumericError("variable: non-finite value");
  Matrix g(m.rows(), m.cols());
  nodes_.push_back(Node{std::move(m), nullptr, std::move(g), {}, true, {}});
  return Tensor(this, nodes_.size() - 1);
}

Tensor Graph::parameter(const Matrix& m, bool trainable) {
  Node n;
  n.external = &m;
  n.requires_grad = trainable;
  if (trainable) n.grad = Matrix(m.rows(), m.cols());
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

Tensor Graph::record(Matrix value, std::vector<Tensor> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError("forward op produced a non-finite value");
  bool rg = false;
  for (const Tensor& t : inputs) {
    if (t.graph_ != this) throw std::logic_error("Graph::record: input from another graph");
    rg = rg || nodes_[t.id_].requires_grad;
  }
  Node n;
  n.owned = std::move(value);
  n.requires_grad = rg;
  if (rg) {
    n.grad = Matrix(n.owned.rows(), n.owned.cols());
    n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return Tensor(this, nodes_.size() - 1);
}

void Graph::backward(Tensor loss) {
  if (loss.graph_ != this) throw std::logic_error("backward: loss from another graph");
  if (value_of(loss.id_).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + value_of(loss.id_).shape_str());
  }
  if (!nodes_[loss.id_].requires_grad) return;
  accum(loss.id_)[0] += 1.0;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.work.empty()) continue;
    if (n.backward) n.backward(*this, i);
    Matrix& g = n.grad;
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.work[k];
    n.work = Matrix();
  }
}

void Graph::zero_grad() {
  for (Node& n : nodes_)
    if (n.requires_grad) n.grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(Tensor a, Tensor b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  require(av.cols() == bv.rows(), "matmul: " + av.shape_str() + " x " + bv.shape_str());
  Graph& g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(mctg::matmul(av, bv), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    const Matrix& av = g.value_of(ia);
    const Matrix& bv = g.value_of(ib);
    if (g.requires_grad_of(ia)) {
      // da = gy * b^T
      const Matrix bt = transpose(bv);
      gemm_acc(gy.data(), bt.data(), g.accum(ia).data(), gy.rows(), gy.cols(), bt.cols());
    }
    if (g.requires_grad_of(ib)) {
      // db = a^T * gy
      gemm_tn_acc(av.data(), gy.data(), g.accum(ib).data(), av.rows(), av.cols(), gy.cols());
    }
  });
}

Tensor matmul_nt(Tensor a, Tensor b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  require(av.cols() == bv.cols(), "matmul_nt: " + av.shape_str() + " x " + bv.shape_str() + "^T");
  Matrix y = mctg::matmul(av, transpose(bv));
  Graph& g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(y), {a, b}, [ia, ib](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    const Matrix& av = g.value_of(ia);
    const Matrix& bv = g.value_of(ib);
    // y = a b^T: da = gy b, db = gy^T a
    if (g.requires_grad_of(ia)) gemm_acc(gy.data(), bv.data(), g.accum(ia).data(), gy.rows(), gy.cols(), bv.cols());
    if (g.requires_grad_of(ib)) gemm_tn_acc(gy.data(), av.data(), g.accum(ib).data(), gy.rows(), gy.cols(), av.cols());
  });
}

namespace {

template <class F, class DA, class DB>
Tensor binary_elementwise(Tensor a, Tensor b, const char* name, F f, DA da_fn, DB db_fn) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  require(av.same_shape(bv), std::string(name) + ": " + av.shape_str() + " vs " + bv.shape_str());
  Matrix y(av.rows(), av.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i], bv[i]);
  Graph& g = a.graph();
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(y), {a, b}, [ia, ib, da_fn, db_fn](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    const Matrix& av = g.value_of(ia);
    const Matrix& bv = g.value_of(ib);
    if (g.requires_grad_of(ia)) {
      Matrix& da = g.accum(ia);
      for (std::size_t i = 0; i < gy.size(); ++i) da[i] += da_fn(gy[i], av[i], bv[i]);
    }
    if (g.requires_grad_of(ib)) {
      Matrix& db = g.accum(ib);
      for (std::size_t i = 0; i < gy.size(); ++i) db[i] += db_fn(gy[i], av[i], bv[i]);
    }
  });
}

}  // namespace

Tensor add(Tensor a, Tensor b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(Tensor a, Tensor b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor hadamard(Tensor a, Tensor b) {
  return binary_elementwise(
      a, b, "hadamard", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor scale(Tensor a, double s) {
  const Matrix& av = a.value();
  Matrix y(av.rows(), av.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * s;
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia, s](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    Matrix& da = g.accum(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) da[i] += gy[i] * s;
  });
}

Tensor add_row(Tensor a, Tensor row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  require(rv.rows() == 1 && rv.cols() == av.cols(),
          "add_row: " + av.shape_str() + " + " + rv.shape_str());
  Matrix y = av;
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += rv(0, j);
  const std::size_t ia = a.id(), ir = row.id();
  return a.graph().record(std::move(y), {a, row}, [ia, ir](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    if (g.requires_grad_of(ia)) {
      Matrix& da = g.accum(ia);
      for (std::size_t i = 0; i < gy.size(); ++i) da[i] += gy[i];
    }
    if (g.requires_grad_of(ir)) {
      Matrix& dr = g.accum(ir);
      for (std::size_t i = 0; i < gy.rows(); ++i)
        for (std::size_t j = 0; j < gy.cols(); ++j) dr(0, j) += gy(i, j);
    }
  });
}

Tensor sigmoid(Tensor a) {
  const Matrix& av = a.value();
  Matrix y(av.rows(), av.cols());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double x = av[i];
    // Branch keeps exp() argument non-positive.
    if (x >= 0) {
      y[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      y[i] = e / (1.0 + e);
    }
  }
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    const Matrix& y = g.value_of(self);
    Matrix& da = g.accum(ia);
    for (std::size_t i = 0; i < gy.size(); ++i) da[i] += gy[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor relu(Tensor a) {
  const Matrix& av = a.value();
  Matrix y(av.rows(), av.cols());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] > 0 ? av[i] : 0.0;
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    const Matrix& av = g.value_of(ia);
    Matrix& da = g.accum(ia);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (av[i] > 0) da[i] += gy[i];
  });
}

namespace {

// Softmax over the first `visible(i)` columns of each row; the rest are 0.
template <class Visible>
Tensor softmax_impl(Tensor a, Visible visible) {
  const Matrix& av = a.value();
  Matrix y(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.rows(); ++i) {
    const std::size_t n = visible(i);
    if (n == 0) continue;
    double mx = av(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, av(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y(i, j) = std::exp(av(i, j) - mx);
      s += y(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) y(i, j) /= s;
  }
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    const Matrix& y = g.value_of(self);
    Matrix& da = g.accum(ia);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) dot += gy(i, j) * y(i, j);
      for (std::size_t j = 0; j < y.cols(); ++j) da(i, j) += y(i, j) * (gy(i, j) - dot);
    }
  });
}

}  // namespace

Tensor softmax_rows(Tensor a) {
  const std::size_t n = a.cols();
  return softmax_impl(a, [n](std::size_t) { return n; });
}

Tensor causal_softmax_rows(Tensor a, std::size_t offset) {
  const std::size_t n = a.cols();
  return softmax_impl(a, [n, offset](std::size_t i) { return std::min(n, i + offset + 1); });
}

Tensor layer_norm(Tensor a, Tensor gain, Tensor bias, double eps) {
  const Matrix& av = a.value();
  const std::size_t m = av.rows(), n = av.cols();
  require(gain.rows() == 1 && gain.cols() == n && bias.rows() == 1 && bias.cols() == n,
          "layer_norm: gain/bias must be 1x" + std::to_string(n));
  if (!(eps > 0)) throw std::invalid_argument("layer_norm: eps must be > 0");
  const Matrix& gv = gain.value();
  const Matrix& bv = bias.value();
  // Saved: normalized values xhat (m x n) and inverse std per row (m x 1).
  Matrix xhat(m, n), inv_std(m, 1), y(m, n);
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += av(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = av(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(i, 0) = is;
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (av(i, j) - mean) * is;
      y(i, j) = xhat(i, j) * gv(0, j) + bv(0, j);
    }
  }
  const std::size_t ia = a.id(), ig = gain.id(), ib = bias.id();
  return a.graph().record(
      std::move(y), {a, gain, bias},
      [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, std::size_t self) {
        const Matrix& gy = g.incoming(self);
        const Matrix& gv = g.value_of(ig);
        const std::size_t m = gy.rows(), n = gy.cols();
        if (g.requires_grad_of(ig)) {
          Matrix& dg = g.accum(ig);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dg(0, j) += gy(i, j) * xhat(i, j);
        }
        if (g.requires_grad_of(ib)) {
          Matrix& db = g.accum(ib);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) db(0, j) += gy(i, j);
        }
        if (g.requires_grad_of(ia)) {
          Matrix& da = g.accum(ia);
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = gy(i, j) * gv(0, j);
              s1 += gh;
              s2 += gh * xhat(i, j);
            }
            for (std::size_t j = 0; j < n; ++j) {
              const double gh = gy(i, j) * gv(0, j);
              da(i, j) += inv_std(i, 0) * (gh - inv_n * s1 - xhat(i, j) * inv_n * s2);
            }
          }
        }
      });
}

Tensor cross_entropy(Tensor logits, std::span<const int> targets) {
  const Matrix& lv = logits.value();
  const std::size_t T = lv.rows(), V = lv.cols();
  require(targets.size() == T, "cross_entropy: " + std::to_string(targets.size()) +
                                   " targets for " + lv.shape_str() + " logits");
  if (T == 0) throw ShapeError("cross_entropy: empty sequence");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= V)
      throw std::out_of_range("cross_entropy: target id " + std::to_string(t) + " outside [0," +
                              std::to_string(V) + ")");
  Matrix probs(T, V);
  double loss = 0.0;
  for (std::size_t i = 0; i < T; ++i) {
    double mx = lv(i, 0);
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, lv(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      probs(i, j) = std::exp(lv(i, j) - mx);
      s += probs(i, j);
    }
    for (std::size_t j = 0; j < V; ++j) probs(i, j) /= s;
    loss += -(lv(i, targets[i]) - mx - std::log(s));
  }
  loss /= static_cast<double>(T);
  std::vector<int> tg(targets.begin(), targets.end());
  const std::size_t il = logits.id();
  return logits.graph().record(
      Matrix(1, 1, loss), {logits},
      [il, probs = std::move(probs), tg = std::move(tg)](Graph& g, std::size_t self) {
        const double gl = g.incoming(self)[0] / static_cast<double>(tg.size());
        Matrix& dl = g.accum(il);
        for (std::size_t i = 0; i < probs.rows(); ++i) {
          for (std::size_t j = 0; j < probs.cols(); ++j) dl(i, j) += gl * probs(i, j);
          dl(i, tg[i]) -= gl;
        }
      });
}

Tensor sum(Tensor a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.graph().record(Matrix(1, 1, s), {a}, [ia](Graph& g, std::size_t self) {
    const double gs = g.incoming(self)[0];
    Matrix& da = g.accum(ia);
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += gs;
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const Tensor& t : parts) {
    require(t.cols() == n, "concat_rows: column mismatch");
    m += t.rows();
  }
  Matrix y(m, n);
  std::size_t off = 0;
  std::vector<std::size_t> ids, offsets;
  for (const Tensor& t : parts) {
    const Matrix& v = t.value();
    std::copy(v.values().begin(), v.values().end(), y.data() + off * n);
    ids.push_back(t.id());
    offsets.push_back(off);
    off += v.rows();
  }
  Graph& g = parts[0].graph();
  return g.record(std::move(y), std::vector<Tensor>(parts.begin(), parts.end()),
                  [ids = std::move(ids), offsets = std::move(offsets)](Graph& g, std::size_t self) {
                    const Matrix& gy = g.incoming(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!g.requires_grad_of(ids[k])) continue;
                      Matrix& d = g.accum(ids[k]);
                      const double* src = gy.data() + offsets[k] * gy.cols();
                      for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
                    }
                  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const Tensor& t : parts) {
    require(t.rows() == m, "concat_cols: row mismatch");
    n += t.cols();
  }
  Matrix y(m, n);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    const Matrix& v = t.value();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < v.cols(); ++j) y(i, off + j) = v(i, j);
    ids.push_back(t.id());
    offsets.push_back(off);
    off += v.cols();
  }
  Graph& g = parts[0].graph();
  return g.record(std::move(y), std::vector<Tensor>(parts.begin(), parts.end()),
                  [ids = std::move(ids), offsets = std::move(offsets)](Graph& g, std::size_t self) {
                    const Matrix& gy = g.incoming(self);
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      if (!g.requires_grad_of(ids[k])) continue;
                      Matrix& d = g.accum(ids[k]);
                      for (std::size_t i = 0; i < d.rows(); ++i)
                        for (std::size_t j = 0; j < d.cols(); ++j) d(i, j) += gy(i, offsets[k] + j);
                    }
                  });
}

Tensor slice_rows(Tensor a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  require(begin + count <= av.rows(), "slice_rows: [" + std::to_string(begin) + "," +
                                          std::to_string(begin + count) + ") of " + av.shape_str());
  Matrix y(count, av.cols());
  std::copy(av.data() + begin * av.cols(), av.data() + (begin + count) * av.cols(), y.data());
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia, begin](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    Matrix& da = g.accum(ia);
    double* dst = da.data() + begin * da.cols();
    for (std::size_t i = 0; i < gy.size(); ++i) dst[i] += gy[i];
  });
}

Tensor slice_cols(Tensor a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  require(begin + count <= av.cols(), "slice_cols: out of range on " + av.shape_str());
  Matrix y(av.rows(), count);
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) y(i, j) = av(i, begin + j);
  const std::size_t ia = a.id();
  return a.graph().record(std::move(y), {a}, [ia, begin](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    Matrix& da = g.accum(ia);
    for (std::size_t i = 0; i < gy.rows(); ++i)
      for (std::size_t j = 0; j < gy.cols(); ++j) da(i, begin + j) += gy(i, j);
  });
}

Tensor gather_rows(Tensor table, std::span<const int> ids) {
  const Matrix& tv = table.value();
  Matrix y(ids.size(), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows())
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    auto src = tv.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), y.row(i).begin());
  }
  std::vector<int> idv(ids.begin(), ids.end());
  const std::size_t it = table.id();
  return table.graph().record(std::move(y), {table}, [it, idv = std::move(idv)](Graph& g, std::size_t self) {
    const Matrix& gy = g.incoming(self);
    Matrix& dt = g.accum(it);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < gy.cols(); ++j) dt(static_cast<std::size_t>(idv[i]), j) += gy(i, j);
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

namespace {

double eval_loss(const LossBuilder& f, std::span<Matrix* const> params) {
  Graph g;
  std::vector<Tensor> leaves;
  leaves.reserve(params.size());
  for (Matrix* p : params) leaves.push_back(g.parameter(*p, false));
  const double v = f(g, leaves).item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckReport grad_check_against(const LossBuilder& f, std::span<Matrix* const> params,
                                   std::span<const Matrix> analytic, double step, double tol,
                                   std::size_t max_entries_per_param) {
  if (!(step > 0) || !(tol > 0)) throw std::invalid_argument("grad_check: step and tol must be > 0");
  if (analytic.size() != params.size()) throw ShapeError("grad_check: analytic/param count mismatch");
  GradCheckReport rep;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& p = *params[k];
    require(analytic[k].same_shape(p), "grad_check: analytic gradient shape mismatch");
    std::size_t stride = 1;
    if (max_entries_per_param > 0 && p.size() > max_entries_per_param)
      stride = (p.size() + max_entries_per_param - 1) / max_entries_per_param;
    for (std::size_t i = 0; i < p.size(); i += stride) {
      const double orig = p[i];
      p[i] = orig + step;
      const double fp = eval_loss(f, params);
      p[i] = orig - step;
      const double fm = eval_loss(f, params);
      p[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max(1e-6, std::max(std::abs(a), std::abs(numeric)));
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      rep.max_rel_error = std::max(rep.max_rel_error, rel);
      ++rep.entries_checked;
    }
  }
  rep.passed = rep.max_rel_error < tol;
  return rep;
}

GradCheckReport grad_check(const LossBuilder& f, std::span<Matrix* const> params, double step,
                           double tol, std::size_t max_entries_per_param) {
  Graph g;
  std::vector<Tensor> leaves;
  for (Matrix* p : params) leaves.push_back(g.parameter(*p, true));
  Tensor loss = f(g, leaves);
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
  g.backward(loss);
  std::vector<Matrix> analytic;
  for (const Tensor& t : leaves) analytic.push_back(t.grad());
  return grad_check_against(f, params, analytic, step, tol, max_entries_per_param);
}

}  // namespace mctg
