#pragma once

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <utility>
#include <vector>

#include "sesom/adamw.hpp"
#include "sesom/backbone.hpp"
#include "sesom/errors.hpp"
#include "sesom/linalg.hpp"
#include "sesom/numerics.hpp"
#include "sesom/prompts.hpp"
#include "sesom/rng.hpp"
#include "sesom/serialize.hpp"
#include "sesom/verbalizer.hpp"

namespace sesom {

// Per-sample input to the ensembling strategies: the pooled raw input
// embedding and one vocabulary-aligned logit vector per source.
struct LogitBundle {
  Vec x_hat;                      // d
  std::vector<Vec> source_logits; // T vectors of length v
  int label = -1;
};

// The attention module G. Two projection paths (query from x_hat, keys from
// source logits or pooled prompts), each a down/up projection with a
// nonlinearity between and a layer norm after.
struct GParams {
  int d = 0, dx = 0, dl = 0, dp = 0, v = 0;
  int key_dim = 0;  // rows of w_dl: v when keys are logits, d when prompts
  double dropout_rate = 0.0;
  Activation act = Activation::relu;

  Matrix w_dx;             // d x dx
  Matrix w_ux;             // dx x dp
  Vec lnx_gain, lnx_bias;  // dp
  Matrix w_dl;             // key_dim x dl
  Matrix w_ul;             // dl x dp
  Vec lnl_gain, lnl_bias;  // dp

  static GParams zeros(int d, int dx, int dl, int dp, int v, int key_dim,
                       double dropout, Activation act) {
    if (d < 1 || dx < 1 || dl < 1 || dp < 1 || v < 1 || key_dim < 1)
      throw ConfigError("GParams: dimensions must be positive");
    if (dropout < 0.0 || dropout >= 1.0)
      throw ConfigError("GParams: dropout must be in [0, 1)");
    GParams p;
    p.d = d;
    p.dx = dx;
    p.dl = dl;
    p.dp = dp;
    p.v = v;
    p.key_dim = key_dim;
    p.dropout_rate = dropout;
    p.act = act;
    p.w_dx = Matrix(d, dx);
    p.w_ux = Matrix(dx, dp);
    p.lnx_gain.assign(dp, 0.0);
    p.lnx_bias.assign(dp, 0.0);
    p.w_dl = Matrix(key_dim, dl);
    p.w_ul = Matrix(dl, dp);
    p.lnl_gain.assign(dp, 0.0);
    p.lnl_bias.assign(dp, 0.0);
    return p;
  }

  static GParams init(int d, int dx, int dl, int dp, int v, int key_dim,
                      double dropout, Activation act, Rng& rng) {
    GParams p = zeros(d, dx, dl, dp, v, key_dim, dropout, act);
    auto fill = [&](Matrix& m, int fan_in) {
      const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& x : m.data) x = s * rng.next_gaussian();
    };
    fill(p.w_dx, d);
    fill(p.w_ux, dx);
    fill(p.w_dl, key_dim);
    fill(p.w_ul, dl);
    std::fill(p.lnx_gain.begin(), p.lnx_gain.end(), 1.0);
    std::fill(p.lnl_gain.begin(), p.lnl_gain.end(), 1.0);
    return p;
  }

  static GParams zeros_like(const GParams& o) {
    return zeros(o.d, o.dx, o.dl, o.dp, o.v, o.key_dim, o.dropout_rate, o.act);
  }

  template <class Self, class F>
  static void visit_blocks(Self& self, F&& f) {
    f("w_dx", self.w_dx.data);
    f("w_ux", self.w_ux.data);
    f("lnx_gain", self.lnx_gain);
    f("lnx_bias", self.lnx_bias);
    f("w_dl", self.w_dl.data);
    f("w_ul", self.w_ul.data);
    f("lnl_gain", self.lnl_gain);
    f("lnl_bias", self.lnl_bias);
  }
  template <class F>
  void for_each_block(F&& f) {
    visit_blocks(*this, f);
  }
  template <class F>
  void for_each_block(F&& f) const {
    visit_blocks(*this, f);
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for_each_block([&](const char*, const Vec& b) { n += b.size(); });
    return n;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 14695981039346656037ull;
    for_each_block([&](const char*, const Vec& block) {
      for (double x : block) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(x);
        for (int i = 0; i < 8; ++i) {
          h ^= (bits >> (8 * i)) & 0xff;
          h *= 1099511628211ull;
        }
      }
    });
    return h;
  }
};

// T·m·d extra prompt parameters held by the ensemble, and the size of G.
inline std::pair<std::uint64_t, std::uint64_t> param_count(std::uint64_t d, std::uint64_t dx,
                                                           std::uint64_t dl, std::uint64_t dp,
                                                           std::uint64_t v, std::uint64_t t,
                                                           std::uint64_t m) {
  if (!d || !dx || !dl || !dp || !v || !t || !m)
    throw ConfigError("param_count: all dimensions must be positive");
  const std::uint64_t ensemble_extra = t * m * d;
  const std::uint64_t g_params = d * dx + dx * dp + v * dl + dl * dp + 4 * dp;
  return {ensemble_extra, g_params};
}

struct ProjTrace {
  Vec input, pre_act, hidden, mask, pre_ln, out;
  LayerNormTrace ln;
};

// One projection path: LN(W_u^T · gamma(W_d^T · input)), with inverted
// dropout on the hidden activation while training.
inline Vec g_project(std::span<const double> input, const Matrix& w_d, const Matrix& w_u,
                     const Vec& gain, const Vec& bias, Activation act, double dropout,
                     bool training, Rng* rng, ProjTrace* trace) {
  Vec pre_act = mat_tvec(w_d, input);
  Vec hidden = activate(pre_act, act);
  Vec mask;
  if (training && dropout > 0.0) {
    if (!rng) throw ConfigError("g_project: training dropout needs an rng");
    mask.resize(hidden.size());
    const double keep = 1.0 - dropout;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      mask[i] = rng->next_double() < dropout ? 0.0 : 1.0 / keep;
      hidden[i] *= mask[i];
    }
  }
  Vec pre_ln = mat_tvec(w_u, hidden);
  LayerNormTrace ln;
  Vec out = layer_norm(pre_ln, gain, bias, kLayerNormEps, &ln);
  if (trace) {
    trace->input.assign(input.begin(), input.end());
    trace->pre_act = std::move(pre_act);
    trace->hidden = std::move(hidden);
    trace->mask = std::move(mask);
    trace->pre_ln = std::move(pre_ln);
    trace->ln = std::move(ln);
    trace->out = out;
  }
  return out;
}

struct GTrace {
  ProjTrace x;
  std::vector<ProjTrace> keys;
  Vec weights;
  std::vector<Vec> values;  // the logit vectors the weights were applied to
};

struct GForwardResult {
  Vec weights;   // T, nonnegative, sums to 1
  Vec combined;  // v
};

namespace detail {

inline GForwardResult g_attend(std::span<const double> x_hat,
                               const std::vector<std::span<const double>>& key_inputs,
                               const std::vector<Vec>& values, const GParams& p,
                               bool training, Rng* rng, GTrace* trace) {
  const std::size_t t = key_inputs.size();
  if (t == 0) throw ConfigError("g_forward: no sources");
  if (values.size() != t) throw DimensionError("g_forward: key/value count mismatch");
  if (static_cast<int>(x_hat.size()) != p.d)
    throw DimensionError("g_forward: x_hat width != d");

  Vec h_x = g_project(x_hat, p.w_dx, p.w_ux, p.lnx_gain, p.lnx_bias, p.act,
                      p.dropout_rate, training, rng, trace ? &trace->x : nullptr);
  if (trace) trace->keys.resize(t);
  Vec scores(t);
  for (std::size_t j = 0; j < t; ++j) {
    if (static_cast<int>(key_inputs[j].size()) != p.key_dim)
      throw DimensionError("g_forward: key input width != key_dim");
    Vec h_j = g_project(key_inputs[j], p.w_dl, p.w_ul, p.lnl_gain, p.lnl_bias, p.act,
                        p.dropout_rate, training, rng, trace ? &trace->keys[j] : nullptr);
    scores[j] = dot(h_j, h_x);
  }

  GForwardResult r;
  r.weights = softmax(scores);
  r.combined.assign(values[0].size(), 0.0);
  for (std::size_t j = 0; j < t; ++j) {
    if (values[j].size() != r.combined.size())
      throw DimensionError("g_forward: ragged source logits");
    axpy(r.weights[j], values[j], r.combined);
  }
  if (trace) {
    trace->weights = r.weights;
    trace->values = values;
  }
  return r;
}

}  // namespace detail

// Eq. 1-4: query from x_hat, keys from the (mapped) source logits, weights
// over sources, convex combination of the logits.
inline GForwardResult g_forward(const LogitBundle& bundle, const GParams& p,
                                bool training = false, Rng* rng = nullptr,
                                GTrace* trace = nullptr) {
  std::vector<std::span<const double>> keys;
  keys.reserve(bundle.source_logits.size());
  for (const Vec& l : bundle.source_logits) keys.emplace_back(l);
  return detail::g_attend(bundle.x_hat, keys, bundle.source_logits, p, training, rng, trace);
}

// Ablation: keys come from the max-pooled source prompts instead of the
// logits; the weights still combine the logits.
inline GForwardResult acc_sp_forward(const std::vector<SoftPrompt>& prompts,
                                     const LogitBundle& bundle, const GParams& p,
                                     bool training = false, Rng* rng = nullptr,
                                     GTrace* trace = nullptr) {
  if (prompts.size() != bundle.source_logits.size())
    throw DimensionError("acc_sp_forward: prompt/logit count mismatch");
  std::vector<Vec> pooled;
  pooled.reserve(prompts.size());
  for (const SoftPrompt& pr : prompts) pooled.push_back(max_pool_rows(pr.matrix));
  std::vector<std::span<const double>> keys;
  keys.reserve(pooled.size());
  for (const Vec& k : pooled) keys.emplace_back(k);
  return detail::g_attend(bundle.x_hat, keys, bundle.source_logits, p, training, rng, trace);
}

// Backward through g_attend given d(loss)/d(combined). Gradients are
// accumulated into `grads` (shaped like the params).
inline void g_backward(const GParams& p, const GTrace& t, std::span<const double> d_combined,
                       GParams& grads) {
  const std::size_t n_src = t.keys.size();
  Vec d_weights(n_src);
  for (std::size_t j = 0; j < n_src; ++j) d_weights[j] = dot(d_combined, t.values[j]);

  // softmax backward
  double mix = 0.0;
  for (std::size_t j = 0; j < n_src; ++j) mix += t.weights[j] * d_weights[j];
  Vec d_scores(n_src);
  for (std::size_t j = 0; j < n_src; ++j)
    d_scores[j] = t.weights[j] * (d_weights[j] - mix);

  Vec d_hx(t.x.out.size(), 0.0);
  auto proj_backward = [&](const ProjTrace& pt, std::span<const double> d_out,
                           Matrix& d_w_d, Matrix& d_w_u, Vec& d_gain, Vec& d_bias,
                           const Matrix& w_u, const Vec& gain) {
    Vec d_pre_ln = layer_norm_backward(d_out, gain, pt.ln, &d_gain, &d_bias);
    Vec d_hidden = mat_vec(w_u, d_pre_ln);
    add_outer(d_w_u, pt.hidden, d_pre_ln);
    if (!pt.mask.empty()) {
      for (std::size_t i = 0; i < d_hidden.size(); ++i) d_hidden[i] *= pt.mask[i];
    }
    Vec d_pre_act(d_hidden.size());
    for (std::size_t i = 0; i < d_hidden.size(); ++i)
      d_pre_act[i] = d_hidden[i] * activate_grad_scalar(pt.pre_act[i], p.act);
    add_outer(d_w_d, pt.input, d_pre_act);
  };

  for (std::size_t j = 0; j < n_src; ++j) {
    axpy(d_scores[j], t.keys[j].out, d_hx);
    Vec d_hj(t.keys[j].out.size());
    for (std::size_t i = 0; i < d_hj.size(); ++i) d_hj[i] = d_scores[j] * t.x.out[i];
    proj_backward(t.keys[j], d_hj, grads.w_dl, grads.w_ul, grads.lnl_gain,
                  grads.lnl_bias, p.w_ul, p.lnl_gain);
  }
  proj_backward(t.x, d_hx, grads.w_dx, grads.w_ux, grads.lnx_gain, grads.lnx_bias,
                p.w_ux, p.lnx_gain);
}

// Evaluates every source on one sample and aligns the vocabularies; the
// input pooling uses the raw uncontextualized embedding rows.
inline LogitBundle make_bundle(const BackboneParams& backbone,
                               const std::vector<SoftPrompt>& prompts,
                               const std::vector<VerbalizerMap>& maps,
                               const TokenSequence& seq) {
  if (prompts.size() != maps.size())
    throw DimensionError("make_bundle: prompt/map count mismatch");
  if (prompts.empty()) throw ConfigError("make_bundle: no sources");
  Matrix x = embed(seq, backbone);
  LogitBundle b;
  b.x_hat = max_pool_rows(x);
  b.label = seq.label;
  b.source_logits.reserve(prompts.size());
  for (std::size_t j = 0; j < prompts.size(); ++j) {
    Vec logits = backbone_forward(backbone, prompts[j].matrix, x);
    b.source_logits.push_back(map_logits(logits, maps[j]));
  }
  return b;
}

inline std::vector<LogitBundle> make_bundles(const BackboneParams& backbone,
                                             const std::vector<SoftPrompt>& prompts,
                                             const std::vector<VerbalizerMap>& maps,
                                             const std::vector<TokenSequence>& data) {
  std::vector<LogitBundle> out;
  out.reserve(data.size());
  for (const auto& seq : data) out.push_back(make_bundle(backbone, prompts, maps, seq));
  return out;
}

inline GParams g_train_cached(const std::vector<LogitBundle>& bundles,
                              const std::vector<int>& target_label_tokens,
                              const GParams& init, const TuneConfig& cfg,
                              std::vector<double>* epoch_losses = nullptr,
                              const std::vector<Vec>* key_override = nullptr) {
  if (bundles.empty()) throw ConfigError("g_train: empty episode");
  for (const auto& b : bundles)
    if (b.label < 0 || b.label >= static_cast<int>(target_label_tokens.size()))
      throw ConfigError("g_train: label without verbalizer token");

  GParams g = init;
  AdamW opt(adamw_from(cfg));
  Rng rng(cfg.seed);
  std::vector<std::span<const double>> fixed_keys;
  if (key_override)
    for (const Vec& k : *key_override) fixed_keys.emplace_back(k);
  std::vector<std::size_t> order(bundles.size());
  std::iota(order.begin(), order.end(), 0);
  if (epoch_losses) epoch_losses->clear();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      GParams grads = GParams::zeros_like(g);
      const double inv_bs = 1.0 / static_cast<double>(stop - start);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const LogitBundle& b = bundles[order[i]];
        GTrace trace;
        GForwardResult r =
            key_override
                ? detail::g_attend(b.x_hat, fixed_keys, b.source_logits, g, true,
                                   &rng, &trace)
                : g_forward(b, g, true, &rng, &trace);
        auto ce = cross_entropy(r.combined, target_label_tokens[b.label]);
        batch_loss += ce.loss * inv_bs;
        scale(ce.grad, inv_bs);
        g_backward(g, trace, ce.grad, grads);
      }
      g.for_each_block([&](const char* name, Vec& block) {
        const Vec* gb = nullptr;
        grads.for_each_block([&](const char* gname, const Vec& gblock) {
          if (std::string_view(gname) == name) gb = &gblock;
        });
        opt.step(name, block, *gb);
      });
      epoch_loss += batch_loss;
      ++batches;
    }
    if (epoch_losses) epoch_losses->push_back(epoch_loss / static_cast<double>(batches));
  }
  return g;
}

// Trains G on the episode; backbone and prompts stay frozen, so the bundles
// are computed once up front.
inline GParams g_train(const std::vector<TokenSequence>& episode,
                       const BackboneParams& backbone,
                       const std::vector<SoftPrompt>& prompts,
                       const std::vector<VerbalizerMap>& maps,
                       const std::vector<int>& target_label_tokens,
                       const GParams& init, const TuneConfig& cfg,
                       std::vector<double>* epoch_losses = nullptr) {
  if (episode.empty()) throw ConfigError("g_train: empty episode");
  std::vector<LogitBundle> bundles = make_bundles(backbone, prompts, maps, episode);
  return g_train_cached(bundles, target_label_tokens, init, cfg, epoch_losses);
}

// acc_sp training: same loop as g_train_cached but the keys are the pooled
// source prompts, which are constant across samples, so routing can only
// come from the query side.
inline GParams acc_sp_train(const std::vector<SoftPrompt>& prompts,
                            const std::vector<LogitBundle>& bundles,
                            const std::vector<int>& target_label_tokens,
                            const GParams& init, const TuneConfig& cfg,
                            std::vector<double>* epoch_losses = nullptr) {
  if (bundles.empty()) throw ConfigError("acc_sp_train: empty episode");
  if (prompts.size() != bundles.front().source_logits.size())
    throw DimensionError("acc_sp_train: prompt/logit count mismatch");
  std::vector<Vec> keys;
  keys.reserve(prompts.size());
  for (const SoftPrompt& pr : prompts) keys.push_back(max_pool_rows(pr.matrix));
  return g_train_cached(bundles, target_label_tokens, init, cfg, epoch_losses, &keys);
}

struct Prediction {
  int label = -1;
  Vec weights;
};

inline Prediction sesom_predict(const LogitBundle& bundle, const GParams& p,
                                const VerbalizerMap& target_map) {
  GForwardResult r = g_forward(bundle, p, false, nullptr, nullptr);
  Prediction out;
  out.label = predict_label(r.combined, target_map);
  out.weights = std::move(r.weights);
  return out;
}

inline Vec uniform_ensemble(const LogitBundle& bundle) {
  if (bundle.source_logits.empty()) throw ConfigError("uniform_ensemble: no sources");
  Vec out(bundle.source_logits[0].size(), 0.0);
  for (const Vec& l : bundle.source_logits) {
    if (l.size() != out.size()) throw DimensionError("uniform_ensemble: ragged logits");
    axpy(1.0, l, out);
  }
  scale(out, 1.0 / static_cast<double>(bundle.source_logits.size()));
  return out;
}

inline int majority_vote(const LogitBundle& bundle, const VerbalizerMap& target_map,
                         Rng& rng) {
  if (bundle.source_logits.empty()) throw ConfigError("majority_vote: no sources");
  std::vector<int> counts(target_map.label_tokens().size(), 0);
  for (const Vec& l : bundle.source_logits) ++counts[predict_label(l, target_map)];
  const int top = *std::max_element(counts.begin(), counts.end());
  std::vector<int> tied;
  for (std::size_t c = 0; c < counts.size(); ++c)
    if (counts[c] == top) tied.push_back(static_cast<int>(c));
  if (tied.size() == 1) return tied[0];
  return tied[rng.next_below(tied.size())];
}

inline Vec fixed_weight_ensemble(const LogitBundle& bundle, const Vec& f1_scores) {
  if (bundle.source_logits.size() != f1_scores.size())
    throw DimensionError("fixed_weight_ensemble: score count mismatch");
  double total = 0.0;
  for (double f : f1_scores) {
    if (f < 0.0) throw ConfigError("fixed_weight_ensemble: negative F1");
    total += f;
  }
  if (total == 0.0) {
    std::cerr << "warning: all-zero F1 scores, falling back to uniform ensemble\n";
    return uniform_ensemble(bundle);
  }
  Vec out(bundle.source_logits[0].size(), 0.0);
  for (std::size_t j = 0; j < f1_scores.size(); ++j)
    axpy(f1_scores[j] / total, bundle.source_logits[j], out);
  return out;
}

// Appendix-style hard selection: the attention weights are replaced by a
// one-hot vector at their argmax before combining.
inline Prediction hard_variant_predict(const LogitBundle& bundle, const GParams& p,
                                       const VerbalizerMap& target_map) {
  GForwardResult r = g_forward(bundle, p, false, nullptr, nullptr);
  std::size_t best = 0;
  for (std::size_t j = 1; j < r.weights.size(); ++j)
    if (r.weights[j] > r.weights[best]) best = j;
  Prediction out;
  out.weights.assign(r.weights.size(), 0.0);
  out.weights[best] = 1.0;
  out.label = predict_label(bundle.source_logits[best], target_map);
  return out;
}

// Labels every unlabeled sample by majority vote of the sources.
inline std::vector<TokenSequence> pseudo_label_generate(
    const BackboneParams& backbone, const std::vector<SoftPrompt>& prompts,
    const std::vector<VerbalizerMap>& maps, const VerbalizerMap& target_map,
    std::vector<TokenSequence> unlabeled, Rng& rng) {
  for (TokenSequence& seq : unlabeled) {
    LogitBundle b = make_bundle(backbone, prompts, maps, seq);
    seq.label = majority_vote(b, target_map, rng);
  }
  return unlabeled;
}

constexpr char kGMagic[] = "SESOMG01";

inline void save_g(const GParams& p, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic(kGMagic);
  w.u32(static_cast<std::uint32_t>(p.d));
  w.u32(static_cast<std::uint32_t>(p.dx));
  w.u32(static_cast<std::uint32_t>(p.dl));
  w.u32(static_cast<std::uint32_t>(p.dp));
  w.u32(static_cast<std::uint32_t>(p.v));
  w.f64(p.dropout_rate);
  p.for_each_block([&](const char*, const Vec& b) { w.doubles(b); });
}

inline GParams load_g(const std::filesystem::path& path,
                      Activation act = Activation::relu) {
  BinaryReader r(path);
  r.expect_magic(kGMagic);
  const int d = static_cast<int>(r.u32());
  const int dx = static_cast<int>(r.u32());
  const int dl = static_cast<int>(r.u32());
  const int dp = static_cast<int>(r.u32());
  const int v = static_cast<int>(r.u32());
  if (d < 1 || dx < 1 || dl < 1 || dp < 1 || v < 1)
    throw FormatError("attention module file with implausible dims", 8);
  const double dropout = r.f64();
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw FormatError("attention module file with invalid dropout", 28);
  GParams p = GParams::zeros(d, dx, dl, dp, v, v, dropout, act);
  p.for_each_block([&](const char*, Vec& b) { r.doubles(std::span<double>(b)); });
  r.expect_eof();
  return p;
}

}  // namespace sesom
