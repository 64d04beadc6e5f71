#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sesom/errors.hpp"

namespace sesom {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles with explicit dimensions.
struct Matrix {
  int rows = 0;
  int cols = 0;
  Vec data;

  Matrix() = default;
  Matrix(int r, int c, double fill = 0.0)
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {
    if (r < 0 || c < 0) throw DimensionError("matrix dims must be nonnegative");
  }

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  std::span<double> row(int r) {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }

  std::size_t size() const { return data.size(); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline void require_finite(std::span<const double> v, const std::string& what) {
  if (!all_finite(v)) throw NumericError(what + ": non-finite entries");
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// y = W^T x  (x has rows entries, result has cols entries).
inline Vec mat_tvec(const Matrix& w, std::span<const double> x) {
  if (static_cast<int>(x.size()) != w.rows)
    throw DimensionError("mat_tvec: input length " + std::to_string(x.size()) +
                         " != rows " + std::to_string(w.rows));
  Vec y(w.cols, 0.0);
  for (int i = 0; i < w.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    const double* wr = w.data.data() + static_cast<std::size_t>(i) * w.cols;
    for (int j = 0; j < w.cols; ++j) y[j] += xi * wr[j];
  }
  return y;
}

// y = W x  (x has cols entries, result has rows entries).
inline Vec mat_vec(const Matrix& w, std::span<const double> x) {
  if (static_cast<int>(x.size()) != w.cols)
    throw DimensionError("mat_vec: input length " + std::to_string(x.size()) +
                         " != cols " + std::to_string(w.cols));
  Vec y(w.rows, 0.0);
  for (int i = 0; i < w.rows; ++i) y[i] = dot(w.row(i), x);
  return y;
}

// C = A B.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw DimensionError("matmul: inner dims mismatch");
  Matrix c(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i) {
    for (int k = 0; k < a.cols; ++k) {
      const double aik = a.at(i, k);
      if (aik == 0.0) continue;
      const double* br = b.data.data() + static_cast<std::size_t>(k) * b.cols;
      double* cr = c.data.data() + static_cast<std::size_t>(i) * c.cols;
      for (int j = 0; j < b.cols; ++j) cr[j] += aik * br[j];
    }
  }
  return c;
}

// C = A B^T.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) throw DimensionError("matmul_nt: inner dims mismatch");
  Matrix c(a.rows, b.rows);
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < b.rows; ++j) c.at(i, j) = dot(a.row(i), b.row(j));
  return c;
}

// C = A^T B.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) throw DimensionError("matmul_tn: inner dims mismatch");
  Matrix c(a.cols, b.cols);
  for (int k = 0; k < a.rows; ++k) {
    for (int i = 0; i < a.cols; ++i) {
      const double aki = a.at(k, i);
      if (aki == 0.0) continue;
      const double* br = b.data.data() + static_cast<std::size_t>(k) * b.cols;
      double* cr = c.data.data() + static_cast<std::size_t>(i) * c.cols;
      for (int j = 0; j < b.cols; ++j) cr[j] += aki * br[j];
    }
  }
  return c;
}

// G += x y^T (outer-product accumulate, for weight gradients).
inline void add_outer(Matrix& g, std::span<const double> x, std::span<const double> y) {
  if (static_cast<int>(x.size()) != g.rows || static_cast<int>(y.size()) != g.cols)
    throw DimensionError("add_outer: shape mismatch");
  for (int i = 0; i < g.rows; ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    double* gr = g.data.data() + static_cast<std::size_t>(i) * g.cols;
    for (int j = 0; j < g.cols; ++j) gr[j] += xi * y[j];
  }
}

inline void add_inplace(Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError("add_inplace: shape mismatch");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

inline Vec col_sums(const Matrix& a) {
  Vec out(a.cols, 0.0);
  for (int r = 0; r < a.rows; ++r)
    for (int c = 0; c < a.cols; ++c) out[c] += a.at(r, c);
  return out;
}

inline Vec mean_rows(const Matrix& a) {
  if (a.rows < 1) throw DimensionError("mean_rows: no rows");
  Vec out = col_sums(a);
  for (double& x : out) x /= static_cast<double>(a.rows);
  return out;
}

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw DimensionError("axpy: length mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

inline void scale(std::span<double> x, double a) {
  for (double& v : x) v *= a;
}

}  // namespace sesom
