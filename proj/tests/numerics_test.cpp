#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "sesom/linalg.hpp"
#include "sesom/numerics.hpp"
#include "sesom/rng.hpp"

using namespace sesom;

TEST(Softmax, KnownValues) {
  Vec v = {std::log(2.0), 0.0};
  Vec p = softmax(v);
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
}

TEST(Softmax, ShiftInvariantAndStable) {
  Vec v = {1.5, -2.0, 0.25, 3.0};
  Vec shifted = v;
  for (double& x : shifted) x += 1000.0;
  Vec a = softmax(v), b = softmax(shifted);
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    EXPECT_TRUE(std::isfinite(b[i]));
    EXPECT_GT(b[i], 0.0);
    EXPECT_NEAR(a[i], b[i], 1e-12);
    sum += b[i];
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Softmax, EmptyThrows) {
  Vec v;
  EXPECT_THROW(softmax(v), DimensionError);
}

TEST(LayerNorm, UnitGainZeroBias) {
  Vec v = {2.0, 4.0, 6.0};
  Vec gain = {1.0, 1.0, 1.0}, bias = {0.0, 0.0, 0.0};
  Vec out = layer_norm(v, gain, bias, 0.0);
  const double s = std::sqrt(3.0 / 2.0);  // (6-4)/sqrt(8/3)
  EXPECT_NEAR(out[0], -s, 1e-12);
  EXPECT_NEAR(out[1], 0.0, 1e-12);
  EXPECT_NEAR(out[2], s, 1e-12);
}

TEST(LayerNorm, ConstantInputZeroEpsStaysFinite) {
  Vec v = {3.0, 3.0, 3.0};
  Vec gain = {2.0, 2.0, 2.0}, bias = {0.5, -0.5, 1.0};
  Vec out = layer_norm(v, gain, bias, 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(out[i], bias[i]);
}

TEST(LayerNorm, NegativeEpsThrows) {
  Vec v = {1.0, 2.0}, g = {1.0, 1.0}, b = {0.0, 0.0};
  EXPECT_THROW(layer_norm(v, g, b, -1e-9), ConfigError);
}

TEST(LayerNorm, BackwardMatchesFiniteDiff) {
  Rng rng(42);
  const std::size_t n = 7;
  Vec x(n), gain(n), bias(n), d_out(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.next_gaussian();
    gain[i] = 1.0 + 0.1 * rng.next_gaussian();
    bias[i] = 0.1 * rng.next_gaussian();
    d_out[i] = rng.next_gaussian();
  }
  const double eps = kLayerNormEps;
  // scalar objective: dot(d_out, layer_norm(x))
  auto loss_at = [&](const Vec& p) {
    Vec xx(p.begin(), p.begin() + n);
    Vec gg(p.begin() + n, p.begin() + 2 * n);
    Vec bb(p.begin() + 2 * n, p.end());
    Vec out = layer_norm(xx, gg, bb, eps);
    return dot(out, d_out);
  };
  Vec packed;
  packed.insert(packed.end(), x.begin(), x.end());
  packed.insert(packed.end(), gain.begin(), gain.end());
  packed.insert(packed.end(), bias.begin(), bias.end());
  Vec fd = finite_diff_grad(loss_at, packed, 1e-6);

  LayerNormTrace trace;
  layer_norm(x, gain, bias, eps, &trace);
  Vec d_gain(n, 0.0), d_bias(n, 0.0);
  Vec d_in = layer_norm_backward(d_out, gain, trace, &d_gain, &d_bias);
  Vec analytic;
  analytic.insert(analytic.end(), d_in.begin(), d_in.end());
  analytic.insert(analytic.end(), d_gain.begin(), d_gain.end());
  analytic.insert(analytic.end(), d_bias.begin(), d_bias.end());
  EXPECT_LT(grad_rel_error(analytic, fd), 1e-7);
}

TEST(Activations, KnownValues) {
  EXPECT_DOUBLE_EQ(activate_scalar(-2.0, Activation::relu), 0.0);
  EXPECT_DOUBLE_EQ(activate_scalar(3.5, Activation::relu), 3.5);
  EXPECT_NEAR(activate_scalar(1.0, Activation::silu), 0.7310585786300049, 1e-15);
  EXPECT_NEAR(activate_scalar(0.0, Activation::gelu), 0.0, 1e-15);
  // gelu(1) = 0.5 * (1 + erf(1/sqrt(2)))
  EXPECT_NEAR(activate_scalar(1.0, Activation::gelu),
              0.5 * (1.0 + std::erf(M_SQRT1_2)), 1e-15);
}

TEST(Activations, GradMatchesFiniteDiff) {
  for (Activation kind : {Activation::gelu, Activation::silu}) {
    for (double x : {-2.0, -0.5, 0.3, 1.7}) {
      auto f = [&](const Vec& p) { return activate_scalar(p[0], kind); };
      Vec fd = finite_diff_grad(f, {x}, 1e-6);
      EXPECT_NEAR(activate_grad_scalar(x, kind), fd[0], 1e-8);
    }
  }
}

TEST(Activations, NameRoundTrip) {
  for (Activation kind : {Activation::relu, Activation::gelu, Activation::silu})
    EXPECT_EQ(activation_from_name(activation_name(kind)), kind);
  EXPECT_THROW(activation_from_name("tanh"), ConfigError);
}

TEST(CrossEntropy, UniformLogits) {
  Vec logits = {0.7, 0.7, 0.7, 0.7};
  auto r = cross_entropy(logits, 2);
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-12);
  EXPECT_NEAR(r.grad[2], 0.25 - 1.0, 1e-12);
  EXPECT_NEAR(r.grad[0], 0.25, 1e-12);
}

TEST(CrossEntropy, GradMatchesFiniteDiff) {
  Rng rng(7);
  Vec logits(9);
  for (double& x : logits) x = 2.0 * rng.next_gaussian();
  const int target = 4;
  auto f = [&](const Vec& p) { return cross_entropy(p, target).loss; };
  Vec fd = finite_diff_grad(f, logits, 1e-6);
  auto r = cross_entropy(logits, target);
  EXPECT_LT(grad_rel_error(r.grad, fd), 1e-8);
}

TEST(CrossEntropy, BadTargetThrows) {
  Vec logits = {0.0, 1.0};
  EXPECT_THROW(cross_entropy(logits, 2), IndexError);
  EXPECT_THROW(cross_entropy(logits, -1), IndexError);
}

TEST(MaxPool, Columnwise) {
  Matrix x(3, 2);
  x.at(0, 0) = 1.0; x.at(0, 1) = -5.0;
  x.at(1, 0) = -2.0; x.at(1, 1) = 4.0;
  x.at(2, 0) = 0.5; x.at(2, 1) = 4.0;
  Vec p = max_pool_rows(x);
  EXPECT_DOUBLE_EQ(p[0], 1.0);
  EXPECT_DOUBLE_EQ(p[1], 4.0);
  Matrix empty(0, 2);
  EXPECT_THROW(max_pool_rows(empty), DimensionError);
}

TEST(FiniteDiff, QuadraticForm) {
  // f(x) = x^T A x with symmetric A has gradient 2 A x.
  Matrix a(3, 3);
  const double vals[9] = {2.0, 0.5, -1.0, 0.5, 3.0, 0.25, -1.0, 0.25, 1.5};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.at(r, c) = vals[r * 3 + c];
  Vec x = {1.0, -2.0, 0.5};
  auto f = [&](const Vec& p) {
    Vec ap = mat_vec(a, p);
    return dot(p, ap);
  };
  Vec fd = finite_diff_grad(f, x, 1e-5);
  Vec expected = mat_vec(a, x);
  scale(expected, 2.0);
  EXPECT_LT(grad_rel_error(expected, fd), 1e-9);
}

TEST(Cosine, KnownValueAndClamp) {
  Vec a = {1.0, 2.0, 3.0}, b = {4.0, 5.0, 6.0};
  EXPECT_NEAR(cosine_similarity(a, b), 32.0 / std::sqrt(1078.0), 1e-14);
  Vec c = {2.0, 4.0, 6.0};
  EXPECT_DOUBLE_EQ(cosine_similarity(a, c), 1.0);
  Vec zero = {0.0, 0.0, 0.0};
  EXPECT_THROW(cosine_similarity(a, zero), DegenerateInputError);
}

TEST(Rng, DeterministicAndSplitDiverges) {
  Rng a(123), b(123);
  for (int i = 0; i < 16; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng parent(9);
  Rng child = parent.split();
  bool differs = false;
  Rng parent2(9);
  parent2.next_u64();  // same state advance as split()
  for (int i = 0; i < 8; ++i)
    if (child.next_u64() != parent2.next_u64()) differs = true;
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndGaussianMoments) {
  Rng rng(2024);
  const int n = 20000;
  double usum = 0.0, gsum = 0.0, gsq = 0.0;
  for (int i = 0; i < n; ++i) {
    double u = rng.next_double();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    usum += u;
    double g = rng.next_gaussian();
    gsum += g;
    gsq += g * g;
  }
  EXPECT_NEAR(usum / n, 0.5, 0.01);
  EXPECT_NEAR(gsum / n, 0.0, 0.03);
  EXPECT_NEAR(gsq / n, 1.0, 0.05);
}

TEST(Rng, ShuffleIsPermutation) {
  Rng rng(5);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto orig = v;
  rng.shuffle(v);
  EXPECT_NE(v, orig);
  std::multiset<int> s(v.begin(), v.end()), t(orig.begin(), orig.end());
  EXPECT_EQ(s, t);
}

TEST(Linalg, MatmulOracle) {
  Matrix a(2, 3), b(3, 2);
  int k = 1;
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) a.at(r, c) = k++;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c) b.at(r, c) = k++;
  Matrix ab = matmul(a, b);
  // [[1,2,3],[4,5,6]] * [[7,8],[9,10],[11,12]] = [[58,64],[139,154]]
  EXPECT_DOUBLE_EQ(ab.at(0, 0), 58.0);
  EXPECT_DOUBLE_EQ(ab.at(0, 1), 64.0);
  EXPECT_DOUBLE_EQ(ab.at(1, 0), 139.0);
  EXPECT_DOUBLE_EQ(ab.at(1, 1), 154.0);

  Matrix bt(2, 3);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) bt.at(r, c) = b.at(c, r);
  Matrix ab2 = matmul_nt(a, bt);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(ab2.at(r, c), ab.at(r, c));

  Matrix at(3, 2);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 2; ++c) at.at(r, c) = a.at(c, r);
  Matrix ab3 = matmul_tn(at, b);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) EXPECT_DOUBLE_EQ(ab3.at(r, c), ab.at(r, c));

  Matrix bad(4, 4);
  EXPECT_THROW(matmul(a, bad), DimensionError);
}

TEST(Linalg, VecOpsAndFiniteGuard) {
  Matrix w(2, 3);
  w.at(0, 0) = 1.0; w.at(0, 1) = 2.0; w.at(0, 2) = 3.0;
  w.at(1, 0) = 4.0; w.at(1, 1) = 5.0; w.at(1, 2) = 6.0;
  Vec x2 = {1.0, -1.0};
  Vec wtx = mat_tvec(w, x2);  // W^T x: length 3
  EXPECT_DOUBLE_EQ(wtx[0], -3.0);
  EXPECT_DOUBLE_EQ(wtx[1], -3.0);
  EXPECT_DOUBLE_EQ(wtx[2], -3.0);
  Vec x3 = {1.0, 0.0, -1.0};
  Vec wx = mat_vec(w, x3);  // W x: length 2
  EXPECT_DOUBLE_EQ(wx[0], -2.0);
  EXPECT_DOUBLE_EQ(wx[1], -2.0);

  Vec bad = {1.0, std::nan("")};
  EXPECT_FALSE(all_finite(bad));
  EXPECT_THROW(require_finite(bad, "test"), NumericError);
}
