#include <gtest/gtest.h>

#include <cmath>

#include "mctg/adam.hpp"
#include "mctg/rng.hpp"
#include "mctg/tensor.hpp"

using namespace mctg;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double sd = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.gaussian(0.0, sd);
  return m;
}

/// Central differences computed here, independently of grad_check.
Matrix numeric_grad(const std::function<double()>& f, Matrix& p, double h = 1e-6) {
  Matrix g(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double o = p[i];
    p[i] = o + h;
    const double a = f();
    p[i] = o - h;
    const double b = f();
    p[i] = o;
    g[i] = (a - b) / (2 * h);
  }
  return g;
}

using Op = std::function<Tensor(Graph&, Tensor, Tensor)>;

/// Checks the gradient of sum(w .* op(a, b)) for both inputs.
void expect_op_gradients(const Op& op, Matrix a, Matrix b, double tol = 1e-6) {
  Rng rng(99);
  Graph probe;
  const Matrix out = op(probe, probe.constant(a), probe.constant(b)).value();
  const Matrix w = random_matrix(out.rows(), out.cols(), rng);
  auto loss_value = [&]() {
    Graph g;
    return sum(hadamard(op(g, g.constant(a), g.constant(b)), g.constant(w))).item();
  };
  Graph g;
  Tensor ta = g.variable(a), tb = g.variable(b);
  g.backward(sum(hadamard(op(g, ta, tb), g.constant(w))));
  const Matrix na = numeric_grad(loss_value, a), nb = numeric_grad(loss_value, b);
  EXPECT_LT(max_abs_diff(ta.grad(), na), tol);
  EXPECT_LT(max_abs_diff(tb.grad(), nb), tol);
}

}  // namespace

TEST(Matrix, MatmulMatchesLoops) {
  Rng rng(1);
  const Matrix a = random_matrix(3, 4, rng), b = random_matrix(4, 5, rng);
  const Matrix c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-14);
    }
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Matrix, TransposeAndNorms) {
  const Matrix a{{1, 2}, {3, 4}, {5, 6}};
  const Matrix t = transpose(a);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t(1, 2), 6.0);
  EXPECT_DOUBLE_EQ(frobenius_norm(a), std::sqrt(91.0));
  EXPECT_EQ(Matrix::identity(3)(1, 1), 1.0);
  EXPECT_EQ(Matrix::identity(3)(0, 1), 0.0);
}

TEST(Ops, SoftmaxRowsSumToOneAndMatchFormula) {
  Rng rng(2);
  Graph g;
  const Matrix a = random_matrix(3, 5, rng, 3.0);
  const Matrix s = softmax_rows(g.constant(a)).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double z = 0, tot = 0;
    for (std::size_t j = 0; j < 5; ++j) z += std::exp(a(i, j));
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_NEAR(s(i, j), std::exp(a(i, j)) / z, 1e-14);
      tot += s(i, j);
    }
    EXPECT_NEAR(tot, 1.0, 1e-14);
  }
}

TEST(Ops, SoftmaxIsStableForLargeLogits) {
  Graph g;
  const Matrix s = softmax_rows(g.constant(Matrix{{1000.0, 1000.0}})).value();
  EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
}

TEST(Ops, CausalSoftmaxMasksFuture) {
  Graph g;
  const Matrix s = causal_softmax_rows(g.constant(Matrix(3, 3, 0.0))).value();
  EXPECT_DOUBLE_EQ(s(0, 0), 1.0);
  EXPECT_EQ(s(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(s(1, 1), 0.5);
  EXPECT_NEAR(s(2, 2), 1.0 / 3.0, 1e-15);
  const Matrix o = causal_softmax_rows(g.constant(Matrix(2, 4, 0.0)), 2).value();
  EXPECT_NEAR(o(0, 2), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(o(0, 3), 0.0);
}

TEST(Ops, LayerNormNormalizesRows) {
  Rng rng(3);
  Graph g;
  const Matrix a = random_matrix(2, 6, rng, 2.0);
  const Matrix y = layer_norm(g.constant(a), g.constant(Matrix(1, 6, 1.0)), g.constant(Matrix(1, 6))).value();
  for (std::size_t i = 0; i < 2; ++i) {
    double m = 0, v = 0;
    for (std::size_t j = 0; j < 6; ++j) m += y(i, j);
    m /= 6;
    for (std::size_t j = 0; j < 6; ++j) v += (y(i, j) - m) * (y(i, j) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 6, 1.0, 1e-4);
  }
}

TEST(Ops, CrossEntropyMatchesFormula) {
  Graph g;
  const Matrix logits{{1.0, 2.0, 0.5}, {0.0, 0.0, 3.0}};
  const int targets[] = {1, 0};
  const double got = cross_entropy(g.constant(logits), targets).item();
  auto nll = [](double a, double b, double c, double t) { return -(t - std::log(std::exp(a) + std::exp(b) + std::exp(c))); };
  EXPECT_NEAR(got, 0.5 * (nll(1, 2, 0.5, 2) + nll(0, 0, 3, 0)), 1e-14);
  const int bad[] = {1, 7};
  EXPECT_THROW(cross_entropy(g.constant(logits), bad), std::out_of_range);
}

TEST(Ops, GatherConcatSlice) {
  Graph g;
  const Matrix t{{1, 2}, {3, 4}, {5, 6}};
  const int ids[] = {2, 0, 2};
  const Matrix r = gather_rows(g.constant(t), ids).value();
  EXPECT_EQ(r(0, 1), 6.0);
  EXPECT_EQ(r(1, 0), 1.0);
  const int oob[] = {3};
  EXPECT_THROW(gather_rows(g.constant(t), oob), std::out_of_range);
  const Tensor parts[] = {g.constant(t), g.constant(Matrix{{7, 8}})};
  EXPECT_EQ(concat_rows(parts).value()(3, 1), 8.0);
  EXPECT_EQ(slice_cols(g.constant(t), 1, 1).value()(2, 0), 6.0);
  EXPECT_EQ(slice_rows(g.constant(t), 1, 2).value()(0, 0), 3.0);
}

TEST(Graph, NonFiniteValuesAreRejected) {
  Graph g;
  EXPECT_THROW(g.constant(Matrix{{std::nan("")}}), NumericError);
  EXPECT_THROW(g.variable(Matrix{{INFINITY}}), NumericError);
}

TEST(Graph, ParameterGradientAccumulatesIntoPersistentBuffer) {
  Matrix w{{2.0}};
  Graph g;
  Tensor p = g.parameter(w, true);
  Tensor x = g.constant(Matrix{{3.0}});
  g.backward(matmul(x, p));
  EXPECT_DOUBLE_EQ(p.grad()(0, 0), 3.0);
  Tensor frozen = g.parameter(w, false);
  EXPECT_FALSE(frozen.requires_grad());
}

TEST(Gradients, BinaryOps) {
  Rng rng(4);
  const Matrix a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng), c = random_matrix(3, 4, rng);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return matmul(x, y); }, a, b);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return matmul_nt(x, y); }, a, c);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return add(x, y); }, a, c);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return sub(x, y); }, a, c);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return hadamard(x, y); }, a, c);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return add_row(x, slice_rows(y, 0, 1)); }, a, c);
}

TEST(Gradients, UnaryAndStructuralOps) {
  Rng rng(5);
  const Matrix a = random_matrix(3, 4, rng), b = random_matrix(3, 4, rng);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return add(sigmoid(x), scale(y, 0.3)); }, a, b);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return add(relu(x), y); }, a, b);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return hadamard(softmax_rows(x), y); }, a, b);
  expect_op_gradients([](Graph&, Tensor x, Tensor y) { return hadamard(causal_softmax_rows(x, 1), y); }, a, b);
  expect_op_gradients(
      [](Graph&, Tensor x, Tensor y) { return layer_norm(x, slice_rows(y, 0, 1), slice_rows(y, 1, 1)); }, a, b);
  expect_op_gradients(
      [](Graph&, Tensor x, Tensor y) {
        const Tensor p[] = {x, y};
        return concat_cols(p);
      },
      a, b);
  expect_op_gradients(
      [](Graph&, Tensor x, Tensor y) {
        const Tensor p[] = {slice_cols(x, 1, 2), slice_rows(y, 0, 3)};
        return concat_rows(std::span<const Tensor>(p, 1));
      },
      a, b);
  expect_op_gradients(
      [](Graph&, Tensor x, Tensor y) {
        const int ids[] = {2, 0, 2, 1};
        return add(gather_rows(x, ids), slice_rows(concat_rows(std::vector<Tensor>{y, y}), 0, 4));
      },
      a, b);
}

TEST(Gradients, CrossEntropy) {
  Rng rng(6);
  Matrix logits = random_matrix(3, 5, rng);
  const int t[] = {4, 0, 2};
  auto f = [&]() {
    Graph g;
    return cross_entropy(g.constant(logits), t).item();
  };
  Graph g;
  Tensor x = g.variable(logits);
  g.backward(cross_entropy(x, t));
  EXPECT_LT(max_abs_diff(x.grad(), numeric_grad(f, logits)), 1e-8);
}

TEST(GradCheck, DetectsWrongAnalyticGradient) {
  Rng rng(7);
  Matrix a = random_matrix(2, 2, rng);
  std::vector<Matrix*> params{&a};
  const LossBuilder f = [](Graph& g, std::span<const Tensor> p) {
    (void)g;
    return sum(hadamard(p[0], p[0]));
  };
  const GradCheckReport ok = grad_check(f, params);
  EXPECT_TRUE(ok.passed);
  EXPECT_EQ(ok.entries_checked, 4u);
  std::vector<Matrix> wrong{Matrix(2, 2, 1.0)};
  EXPECT_FALSE(grad_check_against(f, params, wrong, 1e-5, 1e-4).passed);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
  Matrix p{{1.0, -2.0}};
  Adam opt({&p}, AdamSettings{0.1});
  opt.step(std::vector<Matrix>{Matrix{{0.5, -3.0}}});
  EXPECT_NEAR(p(0, 0), 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p(0, 1), -2.0 + 0.1 * 3.0 / (3.0 + 1e-8), 1e-12);
  EXPECT_THROW(opt.step(std::vector<Matrix>{Matrix(2, 2)}), ShapeError);
}

TEST(Adam, WarmupCosineSchedule) {
  EXPECT_DOUBLE_EQ(warmup_cosine(1.0, 0, 10, 110), 0.1);
  EXPECT_DOUBLE_EQ(warmup_cosine(1.0, 9, 10, 110), 1.0);
  EXPECT_DOUBLE_EQ(warmup_cosine(1.0, 10, 10, 110), 1.0);
  EXPECT_NEAR(warmup_cosine(1.0, 60, 10, 110), 0.55, 1e-12);
  EXPECT_NEAR(warmup_cosine(1.0, 110, 10, 110), 0.1, 1e-12);
}

TEST(Rng, DeterministicAndForkIndependent) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
  Rng c(42);
  Rng f1 = c.fork(1);
  Rng d(42);
  Rng f2 = d.fork(2);
  EXPECT_NE(f1.next(), f2.next());
  Rng u(3);
  for (int i = 0; i < 1000; ++i) {
    const int v = u.uniform_int(2, 5);
    EXPECT_GE(v, 2);
    EXPECT_LE(v, 5);
    const double x = u.uniform();
    EXPECT_GE(x, 0.0);
    EXPECT_LT(x, 1.0);
  }
}

TEST(Rng, GaussianMoments) {
  Rng r(11);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double v = r.gaussian(1.0, 2.0);
    s += v;
    s2 += v * v;
  }
  const double mean = s / n;
  EXPECT_NEAR(mean, 1.0, 0.05);
  EXPECT_NEAR(s2 / n - mean * mean, 4.0, 0.15);
}
