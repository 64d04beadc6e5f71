#pragma once

#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "sesom/backbone.hpp"
#include "sesom/errors.hpp"
#include "sesom/numerics.hpp"
#include "sesom/rng.hpp"
#include "sesom/serialize.hpp"

namespace sesom {

struct SoftPrompt {
  std::string task_id;
  Matrix matrix;  // m x d

  int length() const { return matrix.rows; }
  int width() const { return matrix.cols; }
};

enum class PromptInit { vocab_rows, gaussian };

inline SoftPrompt init_prompt(int m, const BackboneParams& backbone, Rng& rng,
                              PromptInit scheme, std::string task_id = {}) {
  if (m < 1) throw ConfigError("init_prompt: m must be >= 1");
  const int d = backbone.cfg.dim;
  SoftPrompt p;
  p.task_id = std::move(task_id);
  p.matrix = Matrix(m, d);
  if (scheme == PromptInit::gaussian) {
    for (double& x : p.matrix.data) x = 0.5 * rng.next_gaussian();
    return p;
  }
  const int v = backbone.cfg.vocab;
  if (m > v) throw ConfigError("init_prompt: vocab_rows needs m <= vocab");
  std::vector<int> ids(v);
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < m; ++i) {
    const int j = i + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(v - i)));
    std::swap(ids[i], ids[j]);
    std::copy_n(backbone.embed_table.row(ids[i]).begin(), d, p.matrix.row(i).begin());
  }
  return p;
}

// Mini-batch prompt tuning against the frozen backbone: cross-entropy on the
// label's verbalizer token, gradients into the prompt matrix only.
// epoch_losses, when given, receives the running batch-mean loss per epoch.
inline SoftPrompt prompt_tune(const SoftPrompt& prompt, const BackboneParams& backbone,
                              const std::vector<TokenSequence>& data,
                              const std::vector<int>& label_tokens,
                              const TuneConfig& cfg,
                              std::vector<double>* epoch_losses = nullptr) {
  if (!backbone.frozen) throw ConfigError("prompt_tune: backbone is not frozen");
  if (data.empty()) throw ConfigError("prompt_tune: empty data");
  for (const auto& seq : data)
    if (seq.label < 0 || seq.label >= static_cast<int>(label_tokens.size()))
      throw ConfigError("prompt_tune: label " + std::to_string(seq.label) +
                        " has no verbalizer entry");

  SoftPrompt out = prompt;
  AdamW opt(adamw_from(cfg));
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
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
      Matrix grad(out.matrix.rows, out.matrix.cols);
      const double inv_bs = 1.0 / static_cast<double>(stop - start);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const TokenSequence& seq = data[order[i]];
        BackboneTrace trace;
        Vec logits = backbone_forward(backbone, out.matrix, embed(seq, backbone), &trace);
        auto ce = cross_entropy(logits, label_tokens[seq.label]);
        batch_loss += ce.loss * inv_bs;
        scale(ce.grad, inv_bs);
        backbone_backward(backbone, trace, ce.grad, nullptr, &grad, nullptr);
      }
      opt.step("prompt", out.matrix.data, grad.data);
      epoch_loss += batch_loss;
      ++batches;
    }
    if (epoch_losses) epoch_losses->push_back(epoch_loss / static_cast<double>(batches));
  }
  require_finite(out.matrix.data, "prompt_tune result");
  return out;
}

// Independently tunes each source prompt on the target episode. skip
// reproduces the non-tuned ablation. Each source gets its own RNG stream
// drawn from one base stream seeded with cfg.seed.
inline std::vector<SoftPrompt> few_shot_adapt(const std::vector<SoftPrompt>& sources,
                                              const BackboneParams& backbone,
                                              const std::vector<TokenSequence>& episode_train,
                                              const std::vector<int>& target_label_tokens,
                                              const TuneConfig& cfg, bool skip = false) {
  if (skip) return sources;
  if (episode_train.empty()) throw ConfigError("few_shot_adapt: empty episode");
  Rng base(cfg.seed);
  std::vector<SoftPrompt> adapted;
  adapted.reserve(sources.size());
  for (const SoftPrompt& src : sources) {
    TuneConfig per_source = cfg;
    per_source.seed = base.next_u64();
    adapted.push_back(prompt_tune(src, backbone, episode_train, target_label_tokens, per_source));
  }
  return adapted;
}

// Index of the source prompt most similar to the target prompt, cosine over
// flattened matrices, ties to the lowest index.
inline int spot_t_retrieve(const SoftPrompt& target_prompt,
                           const std::vector<SoftPrompt>& sources) {
  if (sources.empty()) throw ConfigError("spot_t_retrieve: no sources");
  int best = -1;
  double best_sim = 0.0;
  for (std::size_t j = 0; j < sources.size(); ++j) {
    if (!(sources[j].matrix.rows == target_prompt.matrix.rows &&
          sources[j].matrix.cols == target_prompt.matrix.cols))
      throw DimensionError("spot_t_retrieve: prompt shape mismatch");
    const double sim = cosine_similarity(target_prompt.matrix.data, sources[j].matrix.data);
    if (best < 0 || sim > best_sim) {
      best = static_cast<int>(j);
      best_sim = sim;
    }
  }
  return best;
}

constexpr char kPromptMagic[] = "SESOMSP1";

inline void save_prompt(const SoftPrompt& p, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.magic(kPromptMagic);
  w.u32(static_cast<std::uint32_t>(p.matrix.rows));
  w.u32(static_cast<std::uint32_t>(p.matrix.cols));
  w.str(p.task_id);
  w.doubles(p.matrix.data);
}

inline SoftPrompt load_prompt(const std::filesystem::path& path) {
  BinaryReader r(path);
  r.expect_magic(kPromptMagic);
  const int m = static_cast<int>(r.u32());
  const int d = static_cast<int>(r.u32());
  if (m < 1 || d < 1 || m > (1 << 20) || d > (1 << 16))
    throw FormatError("prompt file with implausible dims", 8);
  SoftPrompt p;
  p.task_id = r.str();
  p.matrix = Matrix(m, d);
  r.doubles(std::span<double>(p.matrix.data));
  r.expect_eof();
  if (!all_finite(p.matrix.data))
    throw FormatError("prompt file holds non-finite entries", 16);
  return p;
}

}  // namespace sesom
