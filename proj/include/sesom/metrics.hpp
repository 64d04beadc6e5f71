#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "sesom/errors.hpp"
#include "sesom/linalg.hpp"

namespace sesom {

namespace detail {

inline void check_paired(const std::vector<int>& pred, const std::vector<int>& gold) {
  if (pred.empty()) throw ConfigError("metrics: empty inputs");
  if (pred.size() != gold.size())
    throw DimensionError("metrics: prediction/label length mismatch");
}

}  // namespace detail

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& gold) {
  detail::check_paired(pred, gold);
  int hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// F1 of the positive class, which is label 1 by convention. Degenerate
// denominators give 0 rather than NaN.
inline double f1_binary(const std::vector<int>& pred, const std::vector<int>& gold) {
  detail::check_paired(pred, gold);
  int tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == 1 && gold[i] == 1) ++tp;
    if (pred[i] == 1 && gold[i] != 1) ++fp;
    if (pred[i] != 1 && gold[i] == 1) ++fn;
  }
  const double denom = 2.0 * tp + fp + fn;
  return denom == 0.0 ? 0.0 : 2.0 * tp / denom;
}

// Unweighted mean of per-class F1 over every label observed in either
// vector, matching the usual macro-F1 definition.
inline double f1_macro(const std::vector<int>& pred, const std::vector<int>& gold) {
  detail::check_paired(pred, gold);
  std::set<int> labels(gold.begin(), gold.end());
  labels.insert(pred.begin(), pred.end());
  double total = 0.0;
  for (int label : labels) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == label && gold[i] == label) ++tp;
      if (pred[i] == label && gold[i] != label) ++fp;
      if (pred[i] != label && gold[i] == label) ++fn;
    }
    const double denom = 2.0 * tp + fp + fn;
    total += denom == 0.0 ? 0.0 : 2.0 * tp / denom;
  }
  return total / static_cast<double>(labels.size());
}

inline double compute_metrics(const std::vector<int>& pred, const std::vector<int>& gold,
                              const std::string& scheme) {
  if (scheme == "accuracy") return accuracy(pred, gold);
  if (scheme == "f1_binary") return f1_binary(pred, gold);
  if (scheme == "f1_macro") return f1_macro(pred, gold);
  throw ConfigError("compute_metrics: unknown scheme '" + scheme + "'");
}

inline double mean(const Vec& v) {
  if (v.empty()) throw ConfigError("mean: empty input");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation (n-1 denominator); 0 for a single value.
inline double sample_std(const Vec& v) {
  if (v.empty()) throw ConfigError("sample_std: empty input");
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline double std_error(const Vec& v) {
  return sample_std(v) / std::sqrt(static_cast<double>(v.size()));
}

// Product-moment correlation; requires genuine variation on both sides.
inline double pearson(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) throw DimensionError("pearson: length mismatch");
  if (a.size() < 2) throw DimensionError("pearson: need at least two points");
  const double ma = mean(a);
  const double mb = mean(b);
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va == 0.0 || vb == 0.0)
    throw DegenerateInputError("pearson: zero variance input");
  return std::clamp(cov / std::sqrt(va * vb), -1.0, 1.0);
}

}  // namespace sesom
