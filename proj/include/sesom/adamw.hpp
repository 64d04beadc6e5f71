#pragma once

#include <cmath>
#include <span>
#include <string>
#include <unordered_map>

#include "sesom/errors.hpp"
#include "sesom/linalg.hpp"

namespace sesom {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct AdamWState {
  Vec m, v;
  long t = 0;
};

// One decoupled-weight-decay update in place. Decay multiplies the raw
// parameter, it never enters the moment estimates.
inline void adamw_step(std::span<double> p, std::span<const double> g,
                       AdamWState& s, const AdamWConfig& c) {
  if (p.size() != g.size()) throw DimensionError("adamw_step: param/grad mismatch");
  if (s.t == 0) {
    s.m.assign(p.size(), 0.0);
    s.v.assign(p.size(), 0.0);
  } else if (s.m.size() != p.size()) {
    throw DimensionError("adamw_step: state size mismatch");
  }
  s.t += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < p.size(); ++i) {
    s.m[i] = c.beta1 * s.m[i] + (1.0 - c.beta1) * g[i];
    s.v[i] = c.beta2 * s.v[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double mhat = s.m[i] / bc1;
    const double vhat = s.v[i] / bc2;
    p[i] -= c.lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * p[i]);
  }
}

// Keyed optimizer for models made of several named parameter blocks.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  void step(const std::string& key, std::span<double> p, std::span<const double> g) {
    adamw_step(p, g, states_[key], config_);
  }

  const AdamWConfig& config() const { return config_; }

 private:
  AdamWConfig config_;
  std::unordered_map<std::string, AdamWState> states_;
};

}  // namespace sesom
