#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sesom/backbone.hpp"
#include "sesom/config.hpp"
#include "sesom/ensemble.hpp"
#include "sesom/metrics.hpp"
#include "sesom/prompts.hpp"
#include "sesom/tasks.hpp"
#include "sesom/verbalizer.hpp"

namespace sesom {

// Every random decision in a run draws from a stream keyed by (seed, stage),
// never from a shared sequential stream. That makes each seed's result
// independent of which other seeds, methods, or variants run beside it.
inline std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage) {
  Rng r(seed ^ (0x9e3779b97f4a7c15ULL * (stage + 1)));
  return r.next_u64();
}

namespace stage {
inline constexpr std::uint64_t pretrain_data = 0;
inline constexpr std::uint64_t target_data = 1;
inline constexpr std::uint64_t adapt = 2;
inline constexpr std::uint64_t g_init = 3;
inline constexpr std::uint64_t g_train = 4;
inline constexpr std::uint64_t vote_ties = 5;
inline constexpr std::uint64_t spot_warm = 6;
inline constexpr std::uint64_t spot_tune = 7;
inline constexpr std::uint64_t pseudo_pool = 8;
inline constexpr std::uint64_t pseudo_votes = 9;
inline constexpr std::uint64_t source_data = 16;   // + source index
inline constexpr std::uint64_t prompt_init = 64;   // + source index
inline constexpr std::uint64_t prompt_tune = 128;  // + source index
}  // namespace stage

// Everything shared by all seeds of a run: the generated suite, the frozen
// backbone, one trained prompt per source task, vocabulary alignments, and
// the full target dataset that episodes are carved from.
struct SuiteArtifacts {
  ReferenceSuite suite;
  BackboneParams backbone;
  std::vector<SoftPrompt> sources;
  std::vector<VerbalizerMap> maps;  // source tokens -> target tokens
  VerbalizerMap target_map;
  Dataset target_data;
};

inline BackboneParams pretrain_backbone_from(const ExperimentConfig& cfg) {
  const ReferenceSuite suite = make_reference_suite(cfg.suite);
  Rng data_rng(stage_seed(cfg.data.seed, stage::pretrain_data));
  const Dataset corpus = gen_task(suite.pretrain, cfg.data.n_pretrain, data_rng);
  BackboneConfig bcfg;
  bcfg.vocab = cfg.suite.vocab;
  bcfg.dim = cfg.backbone.dim;
  bcfg.max_source_length = cfg.backbone.max_source_length;
  TuneConfig tc;
  tc.learning_rate = cfg.backbone.learning_rate;
  tc.epochs = cfg.backbone.epochs;
  tc.batch_size = cfg.backbone.batch_size;
  tc.seed = cfg.backbone.seed;
  Rng init_rng(cfg.backbone.seed);
  return pretrain_backbone(sequences(corpus), suite.pretrain.verbalizer_tokens, bcfg,
                           tc, init_rng);
}

inline std::vector<SoftPrompt> train_sources_from(const ExperimentConfig& cfg,
                                                  const BackboneParams& backbone) {
  const ReferenceSuite suite = make_reference_suite(cfg.suite);
  const PromptInit scheme = cfg.prompts.init == "gaussian" ? PromptInit::gaussian
                                                           : PromptInit::vocab_rows;
  std::vector<SoftPrompt> out;
  for (int j = 0; j < cfg.suite.n_sources; ++j) {
    const TaskSpec& task = suite.sources[static_cast<std::size_t>(j)];
    Rng data_rng(stage_seed(cfg.data.seed, stage::source_data + static_cast<std::uint64_t>(j)));
    const Dataset data = gen_task(task, cfg.data.n_source_train, data_rng);
    Rng init_rng(stage_seed(cfg.prompts.seed, stage::prompt_init + static_cast<std::uint64_t>(j)));
    SoftPrompt p = init_prompt(cfg.prompts.length, backbone, init_rng, scheme, task.task_id);
    TuneConfig tc;
    tc.learning_rate = cfg.prompts.learning_rate;
    tc.epochs = cfg.prompts.epochs;
    tc.batch_size = cfg.prompts.batch_size;
    tc.weight_decay = cfg.prompts.weight_decay;
    tc.seed = stage_seed(cfg.prompts.seed, stage::prompt_tune + static_cast<std::uint64_t>(j));
    out.push_back(prompt_tune(p, backbone, sequences(data), task.verbalizer_tokens, tc));
  }
  return out;
}

inline std::string source_prompt_filename(int j) {
  return "source" + std::to_string(j) + ".prompt";
}

// Builds or loads every run-level artifact. Checkpoints, when given, must
// agree with the configured geometry; silent shape coercion is worse than
// an error here.
inline SuiteArtifacts prepare_artifacts(const ExperimentConfig& cfg) {
  validate_config(cfg);
  SuiteArtifacts art;
  art.suite = make_reference_suite(cfg.suite);

  if (!cfg.backbone.checkpoint.empty()) {
    art.backbone = load_backbone(cfg.backbone.checkpoint);
    if (art.backbone.cfg.vocab != cfg.suite.vocab ||
        art.backbone.cfg.dim != cfg.backbone.dim)
      throw ConfigError("backbone.checkpoint: geometry differs from config");
  } else {
    art.backbone = pretrain_backbone_from(cfg);
  }

  if (!cfg.prompts.dir.empty()) {
    for (int j = 0; j < cfg.suite.n_sources; ++j) {
      const auto path = std::filesystem::path(cfg.prompts.dir) / source_prompt_filename(j);
      SoftPrompt p = load_prompt(path);
      if (p.matrix.cols != cfg.backbone.dim)
        throw ConfigError("prompts.dir: " + path.string() + " width differs from backbone");
      art.sources.push_back(std::move(p));
    }
  } else {
    art.sources = train_sources_from(cfg, art.backbone);
  }

  for (int j = 0; j < cfg.suite.n_sources; ++j)
    art.maps.push_back(build_map(art.suite.source_verbalizers[static_cast<std::size_t>(j)],
                                 art.suite.target_verbalizer));
  art.target_map = VerbalizerMap(art.suite.target_verbalizer, {});

  Rng data_rng(stage_seed(cfg.data.seed, stage::target_data));
  art.target_data = gen_task(art.suite.target, cfg.data.n_target, data_rng);
  return art;
}

// One method evaluation under one label; top_sources = 0 keeps every source.
struct MethodSpec {
  std::string label;
  std::string method;
  int top_sources = 0;
};

struct SeedRecord {
  std::uint64_t seed = 0;
  bool completed = false;
  std::string error;
  double acc = 0.0;
  double f1 = 0.0;
  bool has_weights = false;
  Vec mean_weights;  // full source count; zeros for unpicked sources
  Vec source_acc, source_f1;  // per source on the test split, all sources
  double best_single_acc = 0.0;
  bool has_pearson = false;
  double pearson_r = 0.0;
};

struct MethodRun {
  std::string label;
  std::string method;
  int top_sources = 0;
  std::vector<SeedRecord> seeds;
  int n_complete = 0;
  double mean_acc = 0.0, stderr_acc = 0.0;
  double mean_f1 = 0.0, stderr_f1 = 0.0;
  bool has_weights = false;
  Vec mean_weights;
  bool has_pearson = false;
  double mean_pearson = 0.0;
  Vec mean_source_f1;
};

struct RunResult {
  std::string task;
  std::vector<std::string> source_names;
  std::vector<MethodRun> methods;
  double wall_seconds = 0.0;
};

namespace detail {

// Per-seed state shared by every method and variant: the episode, the
// adapted prompts, cached bundles for all three splits, and per-source
// diagnostics on dev (for selection) and test (for reporting).
struct SeedBase {
  FewShotEpisode ep;
  std::vector<SoftPrompt> adapted;
  std::vector<LogitBundle> train_b, dev_b, test_b;
  std::vector<int> gold_test, gold_dev;
  std::vector<std::vector<int>> src_test_preds;
  Vec src_test_acc, src_test_f1, src_dev_f1;
  std::vector<int> ranking;  // source indices by dev F1 desc, ties by index
};

inline double split_f1(const std::vector<int>& pred, const std::vector<int>& gold,
                       int num_labels) {
  return num_labels == 2 ? f1_binary(pred, gold) : f1_macro(pred, gold);
}

inline SeedBase build_seed_base(const SuiteArtifacts& art, const ExperimentConfig& cfg,
                                std::uint64_t seed) {
  SeedBase base;
  base.ep = sample_episode(art.target_data, cfg.run.shots, seed);

  TuneConfig adapt_cfg;
  adapt_cfg.learning_rate = cfg.adapt.learning_rate;
  adapt_cfg.epochs = cfg.adapt.epochs;
  adapt_cfg.batch_size = cfg.adapt.batch_size;
  adapt_cfg.weight_decay = cfg.adapt.weight_decay;
  adapt_cfg.seed = stage_seed(seed, stage::adapt);
  base.adapted = few_shot_adapt(art.sources, art.backbone, sequences(base.ep.train),
                                art.suite.target_verbalizer, adapt_cfg,
                                !cfg.adapt.enabled);

  base.train_b = make_bundles(art.backbone, base.adapted, art.maps, sequences(base.ep.train));
  base.dev_b = make_bundles(art.backbone, base.adapted, art.maps, sequences(base.ep.dev));
  base.test_b = make_bundles(art.backbone, base.adapted, art.maps, sequences(base.ep.test));
  for (const auto& s : base.ep.test) base.gold_test.push_back(s.seq.label);
  for (const auto& s : base.ep.dev) base.gold_dev.push_back(s.seq.label);

  const int t = cfg.suite.n_sources;
  const int num_labels = art.suite.target.num_labels;
  std::vector<std::vector<int>> dev_preds(static_cast<std::size_t>(t));
  base.src_test_preds.resize(static_cast<std::size_t>(t));
  for (int j = 0; j < t; ++j) {
    for (const LogitBundle& b : base.test_b)
      base.src_test_preds[static_cast<std::size_t>(j)].push_back(
          predict_label(b.source_logits[static_cast<std::size_t>(j)], art.target_map));
    for (const LogitBundle& b : base.dev_b)
      dev_preds[static_cast<std::size_t>(j)].push_back(
          predict_label(b.source_logits[static_cast<std::size_t>(j)], art.target_map));
    base.src_test_acc.push_back(
        accuracy(base.src_test_preds[static_cast<std::size_t>(j)], base.gold_test));
    base.src_test_f1.push_back(
        split_f1(base.src_test_preds[static_cast<std::size_t>(j)], base.gold_test, num_labels));
    base.src_dev_f1.push_back(
        split_f1(dev_preds[static_cast<std::size_t>(j)], base.gold_dev, num_labels));
  }
  base.ranking.resize(static_cast<std::size_t>(t));
  std::iota(base.ranking.begin(), base.ranking.end(), 0);
  std::stable_sort(base.ranking.begin(), base.ranking.end(), [&](int a, int b) {
    return base.src_dev_f1[static_cast<std::size_t>(a)] >
           base.src_dev_f1[static_cast<std::size_t>(b)];
  });
  return base;
}

inline LogitBundle restrict_bundle(const LogitBundle& b, const std::vector<int>& picked) {
  LogitBundle out;
  out.x_hat = b.x_hat;
  out.label = b.label;
  for (int j : picked)
    out.source_logits.push_back(b.source_logits[static_cast<std::size_t>(j)]);
  return out;
}

// A spec's working set: the selected sources with their prompts, maps, and
// column-restricted bundles.
struct View {
  std::vector<int> picked;
  std::vector<SoftPrompt> prompts;    // adapted
  std::vector<SoftPrompt> originals;  // pre-adaptation library entries
  std::vector<VerbalizerMap> maps;
  std::vector<LogitBundle> train_b, dev_b, test_b;
};

inline View make_view(const SuiteArtifacts& art, const SeedBase& base, int top_sources,
                      int n_sources) {
  View v;
  if (top_sources <= 0 || top_sources >= n_sources) {
    v.picked.resize(static_cast<std::size_t>(n_sources));
    std::iota(v.picked.begin(), v.picked.end(), 0);
  } else {
    v.picked.assign(base.ranking.begin(), base.ranking.begin() + top_sources);
    std::sort(v.picked.begin(), v.picked.end());
  }
  for (int j : v.picked) {
    v.prompts.push_back(base.adapted[static_cast<std::size_t>(j)]);
    v.originals.push_back(art.sources[static_cast<std::size_t>(j)]);
    v.maps.push_back(art.maps[static_cast<std::size_t>(j)]);
  }
  const bool full = v.picked.size() == static_cast<std::size_t>(n_sources);
  auto cut = [&](const std::vector<LogitBundle>& in, std::vector<LogitBundle>& out) {
    if (full) {
      out = in;
      return;
    }
    out.reserve(in.size());
    for (const LogitBundle& b : in) out.push_back(restrict_bundle(b, v.picked));
  };
  cut(base.train_b, v.train_b);
  cut(base.dev_b, v.dev_b);
  cut(base.test_b, v.test_b);
  return v;
}

inline GParams train_g_for(const SuiteArtifacts& art, const ExperimentConfig& cfg,
                           std::uint64_t seed, const View& view) {
  Rng init_rng(stage_seed(seed, stage::g_init));
  GParams init = GParams::init(art.backbone.cfg.dim, cfg.g.dx, cfg.g.dl, cfg.g.dp,
                               art.backbone.cfg.vocab, art.backbone.cfg.vocab,
                               cfg.g.dropout, activation_from_name(cfg.g.activation),
                               init_rng);
  TuneConfig tc;
  tc.learning_rate = cfg.g.learning_rate;
  tc.epochs = cfg.g.epochs;
  tc.batch_size = cfg.g.batch_size;
  tc.weight_decay = cfg.g.weight_decay;
  tc.seed = stage_seed(seed, stage::g_train);
  return g_train_cached(view.train_b, art.suite.target_verbalizer, init, tc);
}

inline Vec dev_fixed_weights(const SuiteArtifacts& art, const View& view,
                             const std::vector<int>& gold_dev, int num_labels) {
  Vec f1s;
  for (std::size_t j = 0; j < view.picked.size(); ++j) {
    std::vector<int> preds;
    for (const LogitBundle& b : view.dev_b)
      preds.push_back(predict_label(b.source_logits[j], art.target_map));
    f1s.push_back(split_f1(preds, gold_dev, num_labels));
  }
  return f1s;
}

inline SeedRecord eval_spec(const SuiteArtifacts& art, const ExperimentConfig& cfg,
                            std::uint64_t seed, const SeedBase& base,
                            const MethodSpec& spec, std::map<int, GParams>& g_cache) {
  SeedRecord rec;
  rec.seed = seed;
  rec.source_acc = base.src_test_acc;
  rec.source_f1 = base.src_test_f1;
  rec.best_single_acc = *std::max_element(base.src_test_acc.begin(), base.src_test_acc.end());

  const int t = cfg.suite.n_sources;
  const int num_labels = art.suite.target.num_labels;
  const View view = make_view(art, base, spec.top_sources, t);

  std::vector<int> preds;
  preds.reserve(view.test_b.size());
  Vec weight_sums(view.picked.size(), 0.0);
  bool sample_weights = false;

  auto ensure_g = [&]() -> const GParams& {
    auto it = g_cache.find(spec.top_sources);
    if (it == g_cache.end())
      it = g_cache.emplace(spec.top_sources, train_g_for(art, cfg, seed, view)).first;
    return it->second;
  };

  if (spec.method == "sesom") {
    const GParams& g = ensure_g();
    for (const LogitBundle& b : view.test_b) {
      Prediction p = sesom_predict(b, g, art.target_map);
      preds.push_back(p.label);
      for (std::size_t j = 0; j < weight_sums.size(); ++j) weight_sums[j] += p.weights[j];
    }
    sample_weights = true;
  } else if (spec.method == "hard_variant") {
    const GParams& g = ensure_g();
    for (const LogitBundle& b : view.test_b) {
      Prediction p = hard_variant_predict(b, g, art.target_map);
      preds.push_back(p.label);
      for (std::size_t j = 0; j < weight_sums.size(); ++j) weight_sums[j] += p.weights[j];
    }
    sample_weights = true;
  } else if (spec.method == "uniform") {
    for (const LogitBundle& b : view.test_b)
      preds.push_back(predict_label(uniform_ensemble(b), art.target_map));
  } else if (spec.method == "majority_vote") {
    Rng ties(stage_seed(seed, stage::vote_ties));
    for (const LogitBundle& b : view.test_b)
      preds.push_back(majority_vote(b, art.target_map, ties));
  } else if (spec.method == "fixed_weight") {
    const Vec f1s = dev_fixed_weights(art, view, base.gold_dev, num_labels);
    for (const LogitBundle& b : view.test_b)
      preds.push_back(predict_label(fixed_weight_ensemble(b, f1s), art.target_map));
    double total = 0.0;
    for (double f : f1s) total += f;
    for (std::size_t j = 0; j < weight_sums.size(); ++j)
      weight_sums[j] = total > 0.0 ? f1s[j] / total : 1.0 / static_cast<double>(f1s.size());
    sample_weights = true;
    for (double& w : weight_sums) w *= static_cast<double>(view.test_b.size());
  } else if (spec.method == "acc_sp") {
    Rng init_rng(stage_seed(seed, stage::g_init));
    GParams init = GParams::init(art.backbone.cfg.dim, cfg.g.dx, cfg.g.dl, cfg.g.dp,
                                 art.backbone.cfg.vocab, art.backbone.cfg.dim,
                                 cfg.g.dropout, activation_from_name(cfg.g.activation),
                                 init_rng);
    TuneConfig tc;
    tc.learning_rate = cfg.g.learning_rate;
    tc.epochs = cfg.g.epochs;
    tc.batch_size = cfg.g.batch_size;
    tc.weight_decay = cfg.g.weight_decay;
    tc.seed = stage_seed(seed, stage::g_train);
    const GParams g = acc_sp_train(view.prompts, view.train_b,
                                   art.suite.target_verbalizer, init, tc);
    for (const LogitBundle& b : view.test_b) {
      GForwardResult r = acc_sp_forward(view.prompts, b, g);
      preds.push_back(predict_label(r.combined, art.target_map));
      for (std::size_t j = 0; j < weight_sums.size(); ++j) weight_sums[j] += r.weights[j];
    }
    sample_weights = true;
  } else if (spec.method == "spot_t") {
    const PromptInit scheme = cfg.prompts.init == "gaussian" ? PromptInit::gaussian
                                                             : PromptInit::vocab_rows;
    Rng warm_rng(stage_seed(seed, stage::spot_warm));
    SoftPrompt warm = init_prompt(cfg.prompts.length, art.backbone, warm_rng, scheme,
                                  art.suite.target.task_id);
    TuneConfig warm_cfg;
    warm_cfg.learning_rate = cfg.adapt.learning_rate;
    warm_cfg.epochs = 3;
    warm_cfg.batch_size = cfg.adapt.batch_size;
    warm_cfg.weight_decay = cfg.adapt.weight_decay;
    warm_cfg.seed = stage_seed(seed, stage::spot_warm);
    warm = prompt_tune(warm, art.backbone, sequences(base.ep.train),
                       art.suite.target_verbalizer, warm_cfg);
    const int idx = spot_t_retrieve(warm, view.originals);
    TuneConfig tune_cfg;
    tune_cfg.learning_rate = cfg.adapt.learning_rate;
    tune_cfg.epochs = cfg.adapt.epochs;
    tune_cfg.batch_size = cfg.adapt.batch_size;
    tune_cfg.weight_decay = cfg.adapt.weight_decay;
    tune_cfg.seed = stage_seed(seed, stage::spot_tune);
    const SoftPrompt tuned =
        prompt_tune(view.originals[static_cast<std::size_t>(idx)], art.backbone,
                    sequences(base.ep.train), art.suite.target_verbalizer, tune_cfg);
    const VerbalizerMap& m = view.maps[static_cast<std::size_t>(idx)];
    for (const auto& s : base.ep.test) {
      const Vec logits = backbone_forward(art.backbone, tuned.matrix, s.seq);
      preds.push_back(predict_label(map_logits(logits, m), art.target_map));
    }
  } else if (spec.method == "pseudo_label") {
    Rng pool_rng(stage_seed(seed, stage::pseudo_pool));
    Dataset pool = gen_task(art.suite.target, cfg.run.pseudo_pool, pool_rng);
    std::vector<TokenSequence> unlabeled = sequences(pool);
    for (TokenSequence& s : unlabeled) s.label = -1;
    Rng vote_rng(stage_seed(seed, stage::pseudo_votes));
    const std::vector<TokenSequence> labeled = pseudo_label_generate(
        art.backbone, view.prompts, view.maps, art.target_map, unlabeled, vote_rng);
    std::vector<LogitBundle> train_set = view.train_b;
    const std::vector<LogitBundle> pseudo_b =
        make_bundles(art.backbone, view.prompts, view.maps, labeled);
    train_set.insert(train_set.end(), pseudo_b.begin(), pseudo_b.end());
    Rng init_rng(stage_seed(seed, stage::g_init));
    GParams init = GParams::init(art.backbone.cfg.dim, cfg.g.dx, cfg.g.dl, cfg.g.dp,
                                 art.backbone.cfg.vocab, art.backbone.cfg.vocab,
                                 cfg.g.dropout, activation_from_name(cfg.g.activation),
                                 init_rng);
    TuneConfig tc;
    tc.learning_rate = cfg.g.learning_rate;
    tc.epochs = cfg.g.epochs;
    tc.batch_size = cfg.g.batch_size;
    tc.weight_decay = cfg.g.weight_decay;
    tc.seed = stage_seed(seed, stage::g_train);
    const GParams g = g_train_cached(train_set, art.suite.target_verbalizer, init, tc);
    for (const LogitBundle& b : view.test_b) {
      Prediction p = sesom_predict(b, g, art.target_map);
      preds.push_back(p.label);
      for (std::size_t j = 0; j < weight_sums.size(); ++j) weight_sums[j] += p.weights[j];
    }
    sample_weights = true;
  } else if (spec.method == "single_source") {
    std::size_t best = 0;
    const Vec f1s = dev_fixed_weights(art, view, base.gold_dev, num_labels);
    for (std::size_t j = 1; j < f1s.size(); ++j)
      if (f1s[j] > f1s[best]) best = j;
    const int chosen = view.picked[best];
    preds = base.src_test_preds[static_cast<std::size_t>(chosen)];
  } else {
    throw ConfigError("eval: unknown method '" + spec.method + "'");
  }

  rec.acc = accuracy(preds, base.gold_test);
  rec.f1 = split_f1(preds, base.gold_test, num_labels);

  if (sample_weights) {
    rec.has_weights = true;
    rec.mean_weights.assign(static_cast<std::size_t>(t), 0.0);
    Vec picked_weights(view.picked.size());
    for (std::size_t j = 0; j < view.picked.size(); ++j) {
      picked_weights[j] = weight_sums[j] / static_cast<double>(view.test_b.size());
      rec.mean_weights[static_cast<std::size_t>(view.picked[j])] = picked_weights[j];
    }
    if (view.picked.size() >= 2) {
      Vec picked_f1;
      for (int j : view.picked)
        picked_f1.push_back(base.src_test_f1[static_cast<std::size_t>(j)]);
      try {
        rec.pearson_r = pearson(picked_weights, picked_f1);
        rec.has_pearson = true;
      } catch (const DegenerateInputError&) {
      }
    }
  }
  rec.completed = true;
  return rec;
}

inline void aggregate(MethodRun& run) {
  Vec accs, f1s, pearsons;
  Vec weights, source_f1;
  int n_weighted = 0;
  for (const SeedRecord& r : run.seeds) {
    if (!r.completed) continue;
    ++run.n_complete;
    accs.push_back(r.acc);
    f1s.push_back(r.f1);
    if (source_f1.empty()) source_f1.assign(r.source_f1.size(), 0.0);
    for (std::size_t j = 0; j < r.source_f1.size(); ++j) source_f1[j] += r.source_f1[j];
    if (r.has_weights) {
      if (weights.empty()) weights.assign(r.mean_weights.size(), 0.0);
      for (std::size_t j = 0; j < r.mean_weights.size(); ++j)
        weights[j] += r.mean_weights[j];
      ++n_weighted;
    }
    if (r.has_pearson) pearsons.push_back(r.pearson_r);
  }
  if (run.n_complete == 0) return;
  run.mean_acc = mean(accs);
  run.stderr_acc = std_error(accs);
  run.mean_f1 = mean(f1s);
  run.stderr_f1 = std_error(f1s);
  for (double& s : source_f1) s /= static_cast<double>(run.n_complete);
  run.mean_source_f1 = source_f1;
  if (n_weighted > 0) {
    run.has_weights = true;
    for (double& w : weights) w /= static_cast<double>(n_weighted);
    run.mean_weights = weights;
  }
  if (!pearsons.empty()) {
    run.has_pearson = true;
    run.mean_pearson = mean(pearsons);
  }
}

}  // namespace detail

// Runs every spec over every seed. Seeds are distributed over worker
// threads; each seed's outcome depends only on (config, seed), so the
// thread count never changes the result. A failing stage marks that seed
// incomplete for the affected specs and the run carries on.
inline RunResult evaluate_methods(const SuiteArtifacts& art, const ExperimentConfig& cfg,
                                  const std::vector<MethodSpec>& specs) {
  if (specs.empty()) throw ConfigError("evaluate_methods: no method specs");
  for (const MethodSpec& s : specs) {
    if (method_names().find(s.method) == method_names().end())
      throw ConfigError("evaluate_methods: unknown method '" + s.method + "'");
    if (s.top_sources < 0 || s.top_sources > cfg.suite.n_sources)
      throw ConfigError("evaluate_methods: top_sources outside [0, n_sources]");
  }
  const auto t0 = std::chrono::steady_clock::now();
  const int n = cfg.run.n_seeds;
  std::vector<std::vector<SeedRecord>> records(
      specs.size(), std::vector<SeedRecord>(static_cast<std::size_t>(n)));

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int i = next.fetch_add(1);
      if (i >= n) return;
      const std::uint64_t seed = cfg.run.seed_offset + static_cast<std::uint64_t>(i);
      try {
        const detail::SeedBase base = detail::build_seed_base(art, cfg, seed);
        std::map<int, GParams> g_cache;
        for (std::size_t si = 0; si < specs.size(); ++si) {
          try {
            records[si][static_cast<std::size_t>(i)] =
                detail::eval_spec(art, cfg, seed, base, specs[si], g_cache);
          } catch (const std::exception& e) {
            records[si][static_cast<std::size_t>(i)].seed = seed;
            records[si][static_cast<std::size_t>(i)].error = e.what();
          }
        }
      } catch (const std::exception& e) {
        for (std::size_t si = 0; si < specs.size(); ++si) {
          records[si][static_cast<std::size_t>(i)].seed = seed;
          records[si][static_cast<std::size_t>(i)].error = e.what();
        }
      }
    }
  };

  unsigned n_workers = std::thread::hardware_concurrency();
  if (n_workers == 0) n_workers = 1;
  n_workers = std::min({n_workers, static_cast<unsigned>(n), 8u});
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < n_workers; ++w) pool.emplace_back(worker);
  worker();
  for (std::thread& th : pool) th.join();

  RunResult out;
  out.task = art.suite.target.task_id;
  for (const TaskSpec& s : art.suite.sources) out.source_names.push_back(s.task_id);
  for (std::size_t si = 0; si < specs.size(); ++si) {
    MethodRun run;
    run.label = specs[si].label;
    run.method = specs[si].method;
    run.top_sources = specs[si].top_sources;
    run.seeds = std::move(records[si]);
    detail::aggregate(run);
    out.methods.push_back(std::move(run));
  }
  out.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline RunResult run_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const SuiteArtifacts art = prepare_artifacts(cfg);
  return evaluate_methods(art, cfg,
                          {{cfg.run.method, cfg.run.method, cfg.run.top_sources}});
}

// Source-count sweep (top-k by dev F1) in one shared-bundle pass, then a
// shots sweep with one pass per k. Labels carry the variant.
inline RunResult run_sweep(const SuiteArtifacts& art, const ExperimentConfig& cfg) {
  std::vector<MethodSpec> source_specs;
  std::vector<int> tops;
  for (int k : {1, 3, 5}) {
    k = std::min(k, cfg.suite.n_sources);
    if (std::find(tops.begin(), tops.end(), k) == tops.end()) tops.push_back(k);
  }
  for (int k : tops)
    source_specs.push_back({"sesom_top" + std::to_string(k), "sesom", k});
  RunResult out = evaluate_methods(art, cfg, source_specs);

  for (int shots : {8, 16, 32}) {
    if (2 * shots + 1 > cfg.data.n_target) continue;
    ExperimentConfig shot_cfg = cfg;
    shot_cfg.run.shots = shots;
    RunResult partial = evaluate_methods(
        art, shot_cfg, {{"sesom_k" + std::to_string(shots), "sesom", cfg.run.top_sources}});
    out.wall_seconds += partial.wall_seconds;
    for (MethodRun& m : partial.methods) out.methods.push_back(std::move(m));
  }
  return out;
}

// --- report writers ---------------------------------------------------

namespace detail {

inline std::string pct(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * fraction);
  return buf;
}

inline std::string fixed(double v, const char* spec) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace detail

// One row per (method, metric); percentages with the same precision as the
// tables this mirrors.
inline std::string results_csv(const RunResult& r) {
  std::string out = "method,task,metric,mean,stderr,n_seeds\n";
  for (const MethodRun& m : r.methods) {
    out += m.label + "," + r.task + ",accuracy," + detail::pct(m.mean_acc) + "," +
           detail::pct(m.stderr_acc) + "," + std::to_string(m.n_complete) + "\n";
    out += m.label + "," + r.task + ",f1," + detail::pct(m.mean_f1) + "," +
           detail::pct(m.stderr_f1) + "," + std::to_string(m.n_complete) + "\n";
  }
  return out;
}

// Target-by-source matrix of mean attention weights plus the per-target
// correlation between those weights and per-source F1.
inline std::string weights_csv(const RunResult& r) {
  const MethodRun* chosen = nullptr;
  for (const MethodRun& m : r.methods)
    if (m.has_weights && chosen == nullptr) chosen = &m;
  if (chosen == nullptr)
    throw ConfigError("attention report: no method in this run stores weights");
  std::string out = "target";
  for (const std::string& s : r.source_names) out += "," + s;
  out += ",pearson_r\n";
  out += r.task;
  for (double w : chosen->mean_weights) out += "," + detail::fixed(w, "%.6f");
  out += "," + (chosen->has_pearson ? detail::fixed(chosen->mean_pearson, "%.4f")
                                    : std::string("nan"));
  out += "\n";
  return out;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << content;
  if (!out) throw IoError("failed writing: " + path);
}

// --- case study --------------------------------------------------------

struct CaseRecord {
  std::uint64_t sample_id = 0;
  int gold = -1;
  int final = -1;
  std::vector<std::pair<int, double>> per_source;  // (prediction, weight)
};

// Recomputes SESoM on the requested test samples of the first seed's
// episode and exports exactly what the combination saw: every source's
// prediction, its weight, and the blended outcome.
inline std::vector<CaseRecord> case_study_export(const SuiteArtifacts& art,
                                                 const ExperimentConfig& cfg,
                                                 const std::vector<std::uint64_t>& ids) {
  const std::uint64_t seed = cfg.run.seed_offset;
  const detail::SeedBase base = detail::build_seed_base(art, cfg, seed);
  const detail::View view =
      detail::make_view(art, base, cfg.run.top_sources, cfg.suite.n_sources);
  const GParams g = detail::train_g_for(art, cfg, seed, view);

  std::unordered_map<std::uint64_t, std::size_t> index;
  for (std::size_t i = 0; i < base.ep.test.size(); ++i) index[base.ep.test[i].id] = i;

  std::vector<std::uint64_t> wanted = ids;
  if (wanted.empty()) {
    const std::size_t n = std::min(static_cast<std::size_t>(cfg.run.case_samples),
                                   base.ep.test.size());
    for (std::size_t i = 0; i < n; ++i) wanted.push_back(base.ep.test[i].id);
  }

  std::vector<CaseRecord> out;
  for (std::uint64_t id : wanted) {
    const auto it = index.find(id);
    if (it == index.end())
      throw LookupError("case study: sample id " + std::to_string(id) +
                        " is not in the test split");
    const LogitBundle& b = view.test_b[it->second];
    CaseRecord rec;
    rec.sample_id = id;
    rec.gold = base.ep.test[it->second].seq.label;
    const Prediction p = sesom_predict(b, g, art.target_map);
    rec.final = p.label;
    double sum = 0.0;
    for (std::size_t j = 0; j < view.picked.size(); ++j) {
      const int pred = predict_label(b.source_logits[j], art.target_map);
      rec.per_source.push_back({pred, p.weights[j]});
      sum += p.weights[j];
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw NumericError("case study: weights for sample " + std::to_string(id) +
                         " do not sum to 1");
    out.push_back(std::move(rec));
  }
  return out;
}

inline std::string case_study_jsonl(const std::vector<CaseRecord>& records) {
  std::string out;
  for (const CaseRecord& r : records) {
    nlohmann::json j;
    j["sample_id"] = r.sample_id;
    j["gold"] = r.gold;
    j["final"] = r.final;
    nlohmann::json per = nlohmann::json::array();
    for (const auto& [pred, weight] : r.per_source)
      per.push_back({{"pred", pred}, {"weight", weight}});
    j["per_source"] = per;
    out += j.dump() + "\n";
  }
  return out;
}

// --- logit dump --------------------------------------------------------

// Exports the first seed's test bundles in the interchange format, with a
// sidecar manifest naming the tasks and verbalizers involved.
inline std::pair<LogitDump, DumpManifest> make_logit_dump(const SuiteArtifacts& art,
                                                          const ExperimentConfig& cfg) {
  const detail::SeedBase base = detail::build_seed_base(art, cfg, cfg.run.seed_offset);
  LogitDump dump;
  dump.d = art.backbone.cfg.dim;
  dump.v = art.backbone.cfg.vocab;
  dump.t = cfg.suite.n_sources;
  for (std::size_t i = 0; i < base.test_b.size(); ++i) {
    dump.ids.push_back(base.ep.test[i].id);
    dump.bundles.push_back(base.test_b[i]);
  }
  DumpManifest manifest;
  manifest.target_task = art.suite.target.task_id;
  manifest.target_verbalizer = art.suite.target_verbalizer;
  for (const TaskSpec& s : art.suite.sources) manifest.source_tasks.push_back(s.task_id);
  manifest.source_verbalizers = art.suite.source_verbalizers;
  manifest.n_records = static_cast<int>(dump.bundles.size());
  return {std::move(dump), manifest};
}

}  // namespace sesom
