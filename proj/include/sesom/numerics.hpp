#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sesom/errors.hpp"
#include "sesom/linalg.hpp"

namespace sesom {

constexpr double kLayerNormEps = 1e-5;

// Max-subtracted softmax; strictly positive outputs summing to 1.
inline Vec softmax(std::span<const double> v) {
  if (v.empty()) throw DimensionError("softmax: empty input");
  require_finite(v, "softmax");
  const double m = *std::max_element(v.begin(), v.end());
  Vec out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

enum class Activation { relu, gelu, silu };

inline Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "gelu") return Activation::gelu;
  if (name == "silu") return Activation::silu;
  throw ConfigError("unknown activation: " + name);
}

inline const char* activation_name(Activation kind) {
  switch (kind) {
    case Activation::relu: return "relu";
    case Activation::gelu: return "gelu";
    case Activation::silu: return "silu";
  }
  return "relu";
}

inline double activate_scalar(double x, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return x > 0.0 ? x : 0.0;
    case Activation::gelu:
      // exact form: x * Phi(x)
      return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    case Activation::silu:
      return x / (1.0 + std::exp(-x));
  }
  return 0.0;
}

inline double activate_grad_scalar(double x, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Activation::gelu: {
      const double phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      return phi + x * pdf;
    }
    case Activation::silu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
  }
  return 0.0;
}

inline Vec activate(std::span<const double> v, Activation kind) {
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = activate_scalar(v[i], kind);
  return out;
}

// LayerNorm with learnable gain/bias. Population variance. When
// var + eps == 0 (constant input, eps 0) the normalized vector is defined
// as zero so the output stays finite.
struct LayerNormTrace {
  Vec normalized;   // (x - mean) / sqrt(var + eps)
  double inv_std = 0.0;
};

inline Vec layer_norm(std::span<const double> v, std::span<const double> gain,
                      std::span<const double> bias, double eps,
                      LayerNormTrace* trace = nullptr) {
  if (gain.size() != v.size() || bias.size() != v.size())
    throw DimensionError("layer_norm: gain/bias length mismatch");
  if (eps < 0.0) throw ConfigError("layer_norm: eps must be nonnegative");
  if (v.empty()) throw DimensionError("layer_norm: empty input");
  const std::size_t n = v.size();
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(n);
  const double denom = var + eps;
  const double inv_std = denom > 0.0 ? 1.0 / std::sqrt(denom) : 0.0;
  Vec out(n);
  Vec normalized(n);
  for (std::size_t i = 0; i < n; ++i) {
    normalized[i] = (v[i] - mean) * inv_std;
    out[i] = gain[i] * normalized[i] + bias[i];
  }
  if (trace) {
    trace->normalized = std::move(normalized);
    trace->inv_std = inv_std;
  }
  return out;
}

// Backward pass for layer_norm. d_gain/d_bias are accumulated (+=) so a
// caller can sum over rows or samples; the input gradient is returned.
inline Vec layer_norm_backward(std::span<const double> d_out,
                               std::span<const double> gain,
                               const LayerNormTrace& trace, Vec* d_gain,
                               Vec* d_bias) {
  const std::size_t n = d_out.size();
  if (trace.normalized.size() != n || gain.size() != n)
    throw DimensionError("layer_norm_backward: shape mismatch");
  Vec d_norm(n);
  double mean_dnorm = 0.0, mean_dnorm_norm = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d_norm[i] = d_out[i] * gain[i];
    mean_dnorm += d_norm[i];
    mean_dnorm_norm += d_norm[i] * trace.normalized[i];
    if (d_gain) (*d_gain)[i] += d_out[i] * trace.normalized[i];
    if (d_bias) (*d_bias)[i] += d_out[i];
  }
  mean_dnorm /= static_cast<double>(n);
  mean_dnorm_norm /= static_cast<double>(n);
  Vec d_in(n);
  for (std::size_t i = 0; i < n; ++i)
    d_in[i] = trace.inv_std *
              (d_norm[i] - mean_dnorm - trace.normalized[i] * mean_dnorm_norm);
  return d_in;
}

struct CrossEntropyResult {
  double loss = 0.0;
  Vec grad;  // softmax(logits) - onehot(target)
};

inline CrossEntropyResult cross_entropy(std::span<const double> logits, int target) {
  if (target < 0 || target >= static_cast<int>(logits.size()))
    throw IndexError("cross_entropy: target " + std::to_string(target) +
                     " out of range for " + std::to_string(logits.size()) + " logits");
  CrossEntropyResult r;
  r.grad = softmax(logits);
  const double m = *std::max_element(logits.begin(), logits.end());
  double lse = 0.0;
  for (double x : logits) lse += std::exp(x - m);
  r.loss = std::log(lse) - (logits[target] - m);
  r.grad[target] -= 1.0;
  return r;
}

// Columnwise max over the rows of X.
inline Vec max_pool_rows(const Matrix& x) {
  if (x.rows < 1) throw DimensionError("max_pool_rows: no rows");
  Vec out(x.row(0).begin(), x.row(0).end());
  for (int r = 1; r < x.rows; ++r)
    for (int c = 0; c < x.cols; ++c) out[c] = std::max(out[c], x.at(r, c));
  return out;
}

// Central-difference gradient estimate, the oracle every hand-written
// gradient in this repository is checked against.
template <class F>
Vec finite_diff_grad(F&& f, const Vec& p, double h) {
  if (h <= 0.0) throw ConfigError("finite_diff_grad: h must be positive");
  Vec grad(p.size());
  Vec q = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = q[i];
    q[i] = orig + h;
    const double fp = f(q);
    q[i] = orig - h;
    const double fm = f(q);
    q[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_grad: non-finite function value");
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// Relative gradient error ||a-b|| / max(||a||, ||b||); 0 when both vanish.
inline double grad_rel_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("grad_rel_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0)
    throw DegenerateInputError("cosine_similarity: zero-norm input");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

}  // namespace sesom
