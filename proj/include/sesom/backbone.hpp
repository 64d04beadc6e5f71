#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sesom/adamw.hpp"
#include "sesom/errors.hpp"
#include "sesom/linalg.hpp"
#include "sesom/numerics.hpp"
#include "sesom/rng.hpp"
#include "sesom/serialize.hpp"

namespace sesom {

struct TokenSequence {
  std::vector<int> token_ids;
  int label = -1;
  std::string task_id;
};

// Shared optimizer settings for every tuning loop in the system; the
// Adam-style moments use the fixed betas/eps from AdamWConfig.
struct TuneConfig {
  double learning_rate = 3e-1;
  int epochs = 10;
  int batch_size = 32;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
};

inline AdamWConfig adamw_from(const TuneConfig& t) {
  AdamWConfig c;
  c.lr = t.learning_rate;
  c.weight_decay = t.weight_decay;
  return c;
}

struct BackboneConfig {
  int vocab = 512;
  int dim = 32;
  int max_source_length = 64;
};

// A tiny frozen encoder: embedding table, one pre-norm self-attention block
// with a position-wise MLP, mean pooling, and a vocab head. Stands in for
// the full pretrained model at desk scale.
struct BackboneParams {
  BackboneConfig cfg;
  Matrix embed_table;      // v x d
  Matrix wq, wk, wv, wo;   // d x d each
  Matrix w1;               // d x 4d
  Vec b1;                  // 4d
  Matrix w2;               // 4d x d
  Vec b2;                  // d
  Vec ln1_gain, ln1_bias;  // d
  Vec ln2_gain, ln2_bias;  // d
  Matrix head;             // d x v
  bool frozen = false;

  static BackboneParams zeros(const BackboneConfig& cfg) {
    if (cfg.vocab < 1 || cfg.dim < 1)
      throw ConfigError("backbone dims must be positive");
    BackboneParams p;
    p.cfg = cfg;
    const int v = cfg.vocab, d = cfg.dim, h = 4 * cfg.dim;
    p.embed_table = Matrix(v, d);
    p.wq = Matrix(d, d);
    p.wk = Matrix(d, d);
    p.wv = Matrix(d, d);
    p.wo = Matrix(d, d);
    p.w1 = Matrix(d, h);
    p.b1.assign(h, 0.0);
    p.w2 = Matrix(h, d);
    p.b2.assign(d, 0.0);
    p.ln1_gain.assign(d, 0.0);
    p.ln1_bias.assign(d, 0.0);
    p.ln2_gain.assign(d, 0.0);
    p.ln2_bias.assign(d, 0.0);
    p.head = Matrix(d, v);
    return p;
  }

  static BackboneParams init(const BackboneConfig& cfg, Rng& rng) {
    BackboneParams p = zeros(cfg);
    auto fill = [&](Matrix& m, double std) {
      for (double& x : m.data) x = std * rng.next_gaussian();
    };
    const double d_scale = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
    fill(p.embed_table, d_scale);
    fill(p.wq, d_scale);
    fill(p.wk, d_scale);
    fill(p.wv, d_scale);
    fill(p.wo, d_scale);
    fill(p.w1, d_scale);
    fill(p.w2, 1.0 / std::sqrt(4.0 * cfg.dim));
    fill(p.head, d_scale);
    std::fill(p.ln1_gain.begin(), p.ln1_gain.end(), 1.0);
    std::fill(p.ln2_gain.begin(), p.ln2_gain.end(), 1.0);
    return p;
  }

  // Blocks in declaration order; this order is also the checkpoint layout.
  template <class Self, class F>
  static void visit_blocks(Self& self, F&& f) {
    f("embed_table", self.embed_table.data);
    f("wq", self.wq.data);
    f("wk", self.wk.data);
    f("wv", self.wv.data);
    f("wo", self.wo.data);
    f("w1", self.w1.data);
    f("b1", self.b1);
    f("w2", self.w2.data);
    f("b2", self.b2);
    f("ln1_gain", self.ln1_gain);
    f("ln1_bias", self.ln1_bias);
    f("ln2_gain", self.ln2_gain);
    f("ln2_bias", self.ln2_bias);
    f("head", self.head.data);
  }
  template <class F>
  void for_each_block(F&& f) {
    visit_blocks(*this, f);
  }
  template <class F>
  void for_each_block(F&& f) const {
    visit_blocks(*this, f);
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for_each_block([&](const char*, const Vec& v) { n += v.size(); });
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

inline Matrix embed(std::span<const int> token_ids, const BackboneParams& p) {
  Matrix out(static_cast<int>(token_ids.size()), p.cfg.dim);
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    const int t = token_ids[i];
    if (t < 0 || t >= p.cfg.vocab)
      throw IndexError("embed: token id " + std::to_string(t) +
                       " outside vocab of " + std::to_string(p.cfg.vocab));
    std::copy_n(p.embed_table.row(t).begin(), p.cfg.dim, out.row(static_cast<int>(i)).begin());
  }
  return out;
}

inline Matrix embed(const TokenSequence& seq, const BackboneParams& p) {
  return embed(std::span<const int>(seq.token_ids), p);
}

struct BackboneTrace {
  Matrix s, u, q, k, v, attn, c, a, z, h1, gact, b;
  std::vector<LayerNormTrace> ln1, ln2;
  Vec pooled;
};

// One encoder block over the (m+l)-row sequence [prompt; x], mean pooling,
// vocab head. Returns pre-softmax logits for the decision token.
inline Vec backbone_forward(const BackboneParams& p, const Matrix& prompt,
                            const Matrix& x, BackboneTrace* trace = nullptr) {
  const int d = p.cfg.dim;
  if (prompt.rows > 0 && prompt.cols != d)
    throw DimensionError("backbone_forward: prompt width != d");
  if (x.rows > 0 && x.cols != d)
    throw DimensionError("backbone_forward: input width != d");
  const int n = prompt.rows + x.rows;
  if (n < 1) throw DimensionError("backbone_forward: empty sequence");

  BackboneTrace local;
  BackboneTrace& t = trace ? *trace : local;

  t.s = Matrix(n, d);
  for (int r = 0; r < prompt.rows; ++r)
    std::copy_n(prompt.row(r).begin(), d, t.s.row(r).begin());
  for (int r = 0; r < x.rows; ++r)
    std::copy_n(x.row(r).begin(), d, t.s.row(prompt.rows + r).begin());

  t.ln1.resize(n);
  t.u = Matrix(n, d);
  for (int r = 0; r < n; ++r) {
    Vec row = layer_norm(t.s.row(r), p.ln1_gain, p.ln1_bias, kLayerNormEps, &t.ln1[r]);
    std::copy_n(row.begin(), d, t.u.row(r).begin());
  }

  t.q = matmul(t.u, p.wq);
  t.k = matmul(t.u, p.wk);
  t.v = matmul(t.u, p.wv);
  Matrix scores = matmul_nt(t.q, t.k);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  scale(scores.data, inv_sqrt_d);
  t.attn = Matrix(n, n);
  for (int r = 0; r < n; ++r) {
    Vec row = softmax(scores.row(r));
    std::copy_n(row.begin(), n, t.attn.row(r).begin());
  }
  t.c = matmul(t.attn, t.v);
  Matrix o = matmul(t.c, p.wo);

  t.a = t.s;
  add_inplace(t.a, o);

  t.ln2.resize(n);
  t.z = Matrix(n, d);
  for (int r = 0; r < n; ++r) {
    Vec row = layer_norm(t.a.row(r), p.ln2_gain, p.ln2_bias, kLayerNormEps, &t.ln2[r]);
    std::copy_n(row.begin(), d, t.z.row(r).begin());
  }

  t.h1 = matmul(t.z, p.w1);
  for (int r = 0; r < n; ++r) axpy(1.0, p.b1, t.h1.row(r));
  t.gact = t.h1;
  for (double& v : t.gact.data) v = v > 0.0 ? v : 0.0;
  Matrix m = matmul(t.gact, p.w2);
  for (int r = 0; r < n; ++r) axpy(1.0, p.b2, m.row(r));

  t.b = t.a;
  add_inplace(t.b, m);

  t.pooled = mean_rows(t.b);
  Vec logits = mat_tvec(p.head, t.pooled);
  require_finite(logits, "backbone_forward logits");
  return logits;
}

inline Vec backbone_forward(const BackboneParams& p, const Matrix& prompt,
                            const TokenSequence& seq, BackboneTrace* trace = nullptr) {
  return backbone_forward(p, prompt, embed(seq, p), trace);
}

// Reverse-mode pass. Gradients are accumulated into whichever outputs are
// non-null: d_params (all blocks except embed_table, which is reached via
// d_x and scatter_embed_grad), d_prompt (first m rows of the sequence
// gradient), d_x (remaining rows).
inline void backbone_backward(const BackboneParams& p, const BackboneTrace& t,
                              std::span<const double> d_logits,
                              BackboneParams* d_params, Matrix* d_prompt,
                              Matrix* d_x) {
  const int d = p.cfg.dim;
  const int n = t.s.rows;
  const int m = d_prompt ? d_prompt->rows : (d_x ? n - d_x->rows : n);
  if (static_cast<int>(d_logits.size()) != p.cfg.vocab)
    throw DimensionError("backbone_backward: d_logits width != vocab");

  Vec d_pooled = mat_vec(p.head, d_logits);
  if (d_params) add_outer(d_params->head, t.pooled, d_logits);

  Matrix d_b(n, d);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) d_b.at(r, c) = d_pooled[c] / n;

  // MLP branch
  Matrix d_h1 = matmul_nt(d_b, p.w2);
  if (d_params) {
    Matrix dw2 = matmul_tn(t.gact, d_b);
    add_inplace(d_params->w2, dw2);
    Vec db2 = col_sums(d_b);
    axpy(1.0, db2, d_params->b2);
  }
  for (std::size_t i = 0; i < d_h1.data.size(); ++i)
    if (t.h1.data[i] <= 0.0) d_h1.data[i] = 0.0;
  Matrix d_z = matmul_nt(d_h1, p.w1);
  if (d_params) {
    Matrix dw1 = matmul_tn(t.z, d_h1);
    add_inplace(d_params->w1, dw1);
    Vec db1 = col_sums(d_h1);
    axpy(1.0, db1, d_params->b1);
  }

  // LayerNorm 2 rows, then the first residual join
  Matrix d_a = d_b;
  {
    Vec dg(d, 0.0), db(d, 0.0);
    for (int r = 0; r < n; ++r) {
      Vec d_row = layer_norm_backward(d_z.row(r), p.ln2_gain, t.ln2[r],
                                      d_params ? &dg : nullptr,
                                      d_params ? &db : nullptr);
      axpy(1.0, d_row, d_a.row(r));
    }
    if (d_params) {
      axpy(1.0, dg, d_params->ln2_gain);
      axpy(1.0, db, d_params->ln2_bias);
    }
  }

  // Attention branch
  Matrix d_c = matmul_nt(d_a, p.wo);
  if (d_params) {
    Matrix dwo = matmul_tn(t.c, d_a);
    add_inplace(d_params->wo, dwo);
  }
  Matrix d_attn = matmul_nt(d_c, t.v);
  Matrix d_v = matmul_tn(t.attn, d_c);
  Matrix d_scores(n, n);
  for (int r = 0; r < n; ++r) {
    double s = 0.0;
    for (int c = 0; c < n; ++c) s += t.attn.at(r, c) * d_attn.at(r, c);
    for (int c = 0; c < n; ++c)
      d_scores.at(r, c) = t.attn.at(r, c) * (d_attn.at(r, c) - s);
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix d_q = matmul(d_scores, t.k);
  scale(d_q.data, inv_sqrt_d);
  Matrix d_k = matmul_tn(d_scores, t.q);
  scale(d_k.data, inv_sqrt_d);

  Matrix d_u = matmul_nt(d_q, p.wq);
  {
    Matrix tmp = matmul_nt(d_k, p.wk);
    add_inplace(d_u, tmp);
    tmp = matmul_nt(d_v, p.wv);
    add_inplace(d_u, tmp);
  }
  if (d_params) {
    Matrix dwq = matmul_tn(t.u, d_q);
    add_inplace(d_params->wq, dwq);
    Matrix dwk = matmul_tn(t.u, d_k);
    add_inplace(d_params->wk, dwk);
    Matrix dwv = matmul_tn(t.u, d_v);
    add_inplace(d_params->wv, dwv);
  }

  // LayerNorm 1 rows, then the input residual
  Matrix d_s = d_a;
  {
    Vec dg(d, 0.0), db(d, 0.0);
    for (int r = 0; r < n; ++r) {
      Vec d_row = layer_norm_backward(d_u.row(r), p.ln1_gain, t.ln1[r],
                                      d_params ? &dg : nullptr,
                                      d_params ? &db : nullptr);
      axpy(1.0, d_row, d_s.row(r));
    }
    if (d_params) {
      axpy(1.0, dg, d_params->ln1_gain);
      axpy(1.0, db, d_params->ln1_bias);
    }
  }

  if (d_prompt) {
    if (d_prompt->cols != d || d_prompt->rows > n)
      throw DimensionError("backbone_backward: d_prompt shape");
    for (int r = 0; r < d_prompt->rows; ++r) axpy(1.0, d_s.row(r), d_prompt->row(r));
  }
  if (d_x) {
    if (d_x->cols != d || m + d_x->rows != n)
      throw DimensionError("backbone_backward: d_x shape");
    for (int r = 0; r < d_x->rows; ++r) axpy(1.0, d_s.row(m + r), d_x->row(r));
  }
}

inline void scatter_embed_grad(const Matrix& d_x, std::span<const int> token_ids,
                               Matrix& d_embed_table) {
  if (static_cast<int>(token_ids.size()) != d_x.rows)
    throw DimensionError("scatter_embed_grad: row/token mismatch");
  for (std::size_t i = 0; i < token_ids.size(); ++i)
    axpy(1.0, d_x.row(static_cast<int>(i)), d_embed_table.row(token_ids[i]));
}

// Cross-entropy pretraining on the synthetic base corpus. label_tokens maps
// a class index to its vocabulary token. The returned params are frozen.
inline BackboneParams pretrain_backbone(const std::vector<TokenSequence>& corpus,
                                        const std::vector<int>& label_tokens,
                                        const BackboneConfig& bcfg,
                                        const TuneConfig& cfg, Rng& rng) {
  if (corpus.empty()) throw ConfigError("pretrain_backbone: empty corpus");
  for (const auto& seq : corpus)
    if (seq.label < 0 || seq.label >= static_cast<int>(label_tokens.size()))
      throw ConfigError("pretrain_backbone: label without verbalizer token");

  BackboneParams p = BackboneParams::init(bcfg, rng);
  AdamW opt(adamw_from(cfg));
  const Matrix no_prompt(0, bcfg.dim);

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      BackboneParams grads = BackboneParams::zeros(bcfg);
      const double inv_bs = 1.0 / static_cast<double>(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const TokenSequence& seq = corpus[order[i]];
        Matrix x = embed(seq, p);
        BackboneTrace trace;
        Vec logits = backbone_forward(p, no_prompt, x, &trace);
        auto ce = cross_entropy(logits, label_tokens[seq.label]);
        scale(ce.grad, inv_bs);
        Matrix d_x(x.rows, x.cols);
        backbone_backward(p, trace, ce.grad, &grads, nullptr, &d_x);
        scatter_embed_grad(d_x, seq.token_ids, grads.embed_table);
      }
      p.for_each_block([&](const char* name, Vec& block) {
        const Vec* g = nullptr;
        grads.for_each_block([&](const char* gname, const Vec& gblock) {
          if (std::string_view(gname) == name) g = &gblock;
        });
        opt.step(name, block, *g);
      });
    }
  }
  p.frozen = true;
  return p;
}

constexpr char kBackboneMagic[] = "SESOMBB1";

inline void save_backbone(const BackboneParams& p, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic(kBackboneMagic);
  w.u32(static_cast<std::uint32_t>(p.cfg.vocab));
  w.u32(static_cast<std::uint32_t>(p.cfg.dim));
  p.for_each_block([&](const char*, const Vec& block) { w.doubles(block); });
}

inline BackboneParams load_backbone(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic(kBackboneMagic);
  BackboneConfig cfg;
  cfg.vocab = static_cast<int>(r.u32());
  cfg.dim = static_cast<int>(r.u32());
  if (cfg.vocab < 1 || cfg.dim < 1 || cfg.vocab > (1 << 24) || cfg.dim > (1 << 16))
    throw FormatError("backbone checkpoint with implausible dims", 8);
  BackboneParams p = BackboneParams::zeros(cfg);
  p.for_each_block([&](const char*, Vec& block) {
    r.doubles(std::span<double>(block));
  });
  r.expect_eof();
  p.frozen = true;
  return p;
}

}  // namespace sesom
