#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mctg/errors.hpp"

namespace mctg {

/// Dense row-major matrix of doubles. Value type; rank <= 2 (vectors are 1xn).
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  void fill(double v);
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const;
  std::string shape_str() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Plain (graph-free) kernels. All sums run in row-major sequential order.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
double frobenius_norm(const Matrix& a);
double l2_norm(std::span<const double> v);
double max_abs_diff(const Matrix& a, const Matrix& b);

class Graph;

/// Handle to a node on a Graph. Cheap to copy; valid while its graph lives.
class Tensor {
 public:
  Tensor() = default;

  const Matrix& value() const;
  /// Gradient buffer; empty Matrix when the node does not require grad.
  const Matrix& grad() const;
  bool requires_grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  /// Scalar value of a 1x1 tensor.
  double item() const;

  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Tensor(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run tape. Nodes are appended in creation order, which is a
/// topological order; backward walks it in reverse.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf holding a copy of `m`.
  Tensor constant(Matrix m);
  /// Leaf with gradient buffer holding a copy of `m`.
  Tensor variable(Matrix m);
  /// Leaf referencing external storage (no copy). `m` must outlive the graph.
  Tensor parameter(const Matrix& m, bool trainable);

  /// Accumulates d(loss)/d(node) into every node that requires grad.
  void backward(Tensor loss);
  void zero_grad();
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;
  Tensor record(Matrix value, std::vector<Tensor> inputs, BackwardFn backward);
  const Matrix& value_of(std::size_t id) const;
  /// Gradient flowing into `id` during the current backward pass.
  const Matrix& incoming(std::size_t id) const { return nodes_[id].work; }
  /// Per-pass accumulator for `id`, zero-initialized on first use.
  Matrix& accum(std::size_t id);
  bool requires_grad_of(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  friend class Tensor;
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix grad;
    Matrix work;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

// Differentiable ops.
Tensor matmul(Tensor a, Tensor b);
/// a * b^T
Tensor matmul_nt(Tensor a, Tensor b);
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor hadamard(Tensor a, Tensor b);
Tensor scale(Tensor a, double s);
/// a + row, row is 1 x cols(a), broadcast over rows.
Tensor add_row(Tensor a, Tensor row);
Tensor sigmoid(Tensor a);
Tensor relu(Tensor a);
Tensor softmax_rows(Tensor a);
/// Row i may only see columns j <= i + offset.
Tensor causal_softmax_rows(Tensor a, std::size_t offset = 0);
Tensor layer_norm(Tensor a, Tensor gain, Tensor bias, double eps = 1e-5);
/// Mean over positions of -log softmax(logits)[t, targets[t]].
Tensor cross_entropy(Tensor logits, std::span<const int> targets);
Tensor sum(Tensor a);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_rows(Tensor a, std::size_t begin, std::size_t count);
Tensor slice_cols(Tensor a, std::size_t begin, std::size_t count);
/// Rows of `table` selected by `ids`.
Tensor gather_rows(Tensor table, std::span<const int> ids);

/// Result of comparing analytic gradients with central differences.
struct GradCheckReport {
  std::size_t entries_checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = false;
};

/// Builds a scalar loss on the given graph from leaves bound to `params`.
using LossBuilder = std::function<Tensor(Graph&, std::span<const Tensor> params)>;

/// Central-difference gradient check. Perturbs the parameter matrices in place
/// (and restores them). `max_entries_per_param` = 0 checks every entry;
/// otherwise a deterministic stride sample is taken. Relative error is
/// |a-n| / max(1e-6, |a|, |n|).
GradCheckReport grad_check(const LossBuilder& f, std::span<Matrix* const> params,
                           double step = 1e-5, double tol = 1e-4,
                           std::size_t max_entries_per_param = 0);

/// Same check but against caller-supplied analytic gradients.
GradCheckReport grad_check_against(const LossBuilder& f, std::span<Matrix* const> params,
                                   std::span<const Matrix> analytic, double step,
                                   double tol, std::size_t max_entries_per_param = 0);

}  // namespace mctg
