#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sesom/backbone.hpp"
#include "sesom/ensemble.hpp"
#include "sesom/errors.hpp"
#include "sesom/linalg.hpp"
#include "sesom/rng.hpp"
#include "sesom/serialize.hpp"

namespace sesom {

// One label's evidence: a pool of feature tokens with sampling weights.
// Empty weights means uniform over the pool.
struct LabelRule {
  std::vector<int> feature_tokens;
  std::vector<double> weights;
};

// Generative recipe for a synthetic classification task. Each sample draws
// a region, a label, and a length; signal tokens come from
// rules[region][label], the rest is background filler, and the positions
// are shuffled. Regions let one task demand different evidence in
// different parts of the input distribution.
struct TaskSpec {
  std::string task_id;
  int num_labels = 2;
  std::vector<std::vector<LabelRule>> rules;  // rules[region][label]
  std::vector<double> region_weights;         // one weight per region
  std::vector<double> label_marginals;        // empty means uniform
  std::vector<int> verbalizer_tokens;         // one per label, distinct
  std::vector<int> background_tokens;
  int min_length = 8;
  int max_length = 16;
  int n_signal = 3;         // signal tokens per sample before noise
  double noise_rate = 0.0;  // chance a signal token degrades to filler
  double feature_overlap = 1.0;  // fraction shared with reference_task
  std::string reference_task;   // empty when the task is its own reference
};

// A generated sample. The id is unique within its dataset and is what the
// episode splitter keeps disjoint; region records which rule produced it.
struct LabeledSample {
  std::uint64_t id = 0;
  int region = 0;
  TokenSequence seq;
};

using Dataset = std::vector<LabeledSample>;

// Few-shot split: k train, k dev, remainder test, disjoint by sample id.
struct FewShotEpisode {
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> dev;
  std::vector<LabeledSample> test;
  std::uint64_t seed = 0;
  int k = 32;
};

inline std::vector<TokenSequence> sequences(const std::vector<LabeledSample>& samples) {
  std::vector<TokenSequence> out;
  out.reserve(samples.size());
  for (const LabeledSample& s : samples) out.push_back(s.seq);
  return out;
}

namespace detail {

inline int weighted_pick(const std::vector<double>& weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ConfigError("weighted_pick: negative weight");
    total += w;
  }
  if (weights.empty() || total <= 0.0)
    throw ConfigError("weighted_pick: no positive weight");
  double u = rng.next_double() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    u -= weights[i];
    if (u < 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size()) - 1;
}

inline int pick_feature(const LabelRule& rule, Rng& rng) {
  if (rule.feature_tokens.empty())
    throw ConfigError("pick_feature: empty feature pool");
  if (rule.weights.empty())
    return rule.feature_tokens[rng.next_below(rule.feature_tokens.size())];
  if (rule.weights.size() != rule.feature_tokens.size())
    throw ConfigError("pick_feature: weight count mismatch");
  return rule.feature_tokens[static_cast<std::size_t>(weighted_pick(rule.weights, rng))];
}

}  // namespace detail

inline void validate_task(const TaskSpec& spec) {
  if (spec.num_labels < 2) throw ConfigError("task: num_labels must be >= 2");
  if (spec.rules.empty()) throw ConfigError("task: no regions");
  if (spec.region_weights.size() != spec.rules.size())
    throw ConfigError("task: region weight count mismatch");
  for (const auto& region : spec.rules) {
    if (static_cast<int>(region.size()) != spec.num_labels)
      throw ConfigError("task: rule count differs from num_labels");
    for (const LabelRule& rule : region) {
      if (rule.feature_tokens.empty())
        throw ConfigError("task: label rule has no feature tokens");
      if (!rule.weights.empty() && rule.weights.size() != rule.feature_tokens.size())
        throw ConfigError("task: rule weight count mismatch");
    }
  }
  if (static_cast<int>(spec.verbalizer_tokens.size()) != spec.num_labels)
    throw ConfigError("task: verbalizer token count differs from num_labels");
  std::unordered_set<int> verbs(spec.verbalizer_tokens.begin(), spec.verbalizer_tokens.end());
  if (verbs.size() != spec.verbalizer_tokens.size())
    throw ConfigError("task: duplicate verbalizer tokens");
  if (!spec.label_marginals.empty() &&
      static_cast<int>(spec.label_marginals.size()) != spec.num_labels)
    throw ConfigError("task: label marginal count mismatch");
  if (spec.background_tokens.empty())
    throw ConfigError("task: no background tokens");
  if (spec.min_length < 1 || spec.max_length < spec.min_length)
    throw ConfigError("task: bad length range");
  if (spec.n_signal < 1 || spec.n_signal > spec.min_length)
    throw ConfigError("task: n_signal outside [1, min_length]");
  if (spec.noise_rate < 0.0 || spec.noise_rate >= 1.0)
    throw ConfigError("task: noise_rate outside [0, 1)");
  if (spec.feature_overlap < 0.0 || spec.feature_overlap > 1.0)
    throw ConfigError("task: feature_overlap outside [0, 1]");
}

// Draws n i.i.d. samples from the generative rule. Sample ids are the
// positions 0..n-1, so they are unique within the returned dataset.
inline Dataset gen_task(const TaskSpec& spec, int n, Rng& rng) {
  validate_task(spec);
  if (n < spec.num_labels) throw ConfigError("gen_task: n below num_labels");
  std::vector<double> marginals = spec.label_marginals;
  if (marginals.empty())
    marginals.assign(static_cast<std::size_t>(spec.num_labels), 1.0);
  Dataset out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    LabeledSample s;
    s.id = static_cast<std::uint64_t>(i);
    s.region = detail::weighted_pick(spec.region_weights, rng);
    const int label = detail::weighted_pick(marginals, rng);
    const int span = spec.max_length - spec.min_length + 1;
    const int len = spec.min_length + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(span)));
    const LabelRule& rule = spec.rules[static_cast<std::size_t>(s.region)][static_cast<std::size_t>(label)];
    std::vector<int> tokens;
    tokens.reserve(static_cast<std::size_t>(len));
    for (int t = 0; t < spec.n_signal; ++t) {
      int tok = detail::pick_feature(rule, rng);
      if (spec.noise_rate > 0.0 && rng.next_double() < spec.noise_rate)
        tok = spec.background_tokens[rng.next_below(spec.background_tokens.size())];
      tokens.push_back(tok);
    }
    while (static_cast<int>(tokens.size()) < len)
      tokens.push_back(spec.background_tokens[rng.next_below(spec.background_tokens.size())]);
    rng.shuffle(tokens);
    s.seq.token_ids = std::move(tokens);
    s.seq.label = label;
    s.seq.task_id = spec.task_id;
    out.push_back(std::move(s));
  }
  return out;
}

// Scores each label by the best summed feature-token weight over regions
// and returns the argmax, lowest label on ties. This is the labeling rule
// itself, so its accuracy on generated data bounds what any classifier
// can recover.
inline int rule_predict(const TaskSpec& spec, const TokenSequence& seq) {
  std::vector<double> score(static_cast<std::size_t>(spec.num_labels), 0.0);
  for (const auto& region : spec.rules) {
    for (int label = 0; label < spec.num_labels; ++label) {
      const LabelRule& rule = region[static_cast<std::size_t>(label)];
      std::unordered_map<int, double> weight_of;
      for (std::size_t i = 0; i < rule.feature_tokens.size(); ++i)
        weight_of[rule.feature_tokens[i]] =
            rule.weights.empty() ? 1.0 : rule.weights[i];
      double sum = 0.0;
      for (int tok : seq.token_ids) {
        auto it = weight_of.find(tok);
        if (it != weight_of.end()) sum += it->second;
      }
      score[static_cast<std::size_t>(label)] =
          std::max(score[static_cast<std::size_t>(label)], sum);
    }
  }
  int best = 0;
  for (int label = 1; label < spec.num_labels; ++label)
    if (score[static_cast<std::size_t>(label)] > score[static_cast<std::size_t>(best)])
      best = label;
  return best;
}

inline double rule_accuracy(const TaskSpec& spec, const Dataset& data) {
  if (data.empty()) throw ConfigError("rule_accuracy: empty dataset");
  int hits = 0;
  for (const LabeledSample& s : data)
    if (rule_predict(spec, s.seq) == s.seq.label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// Builds a sibling task that shares round(overlap * pool) feature tokens
// per rule with the reference and replaces the rest from fresh_pool.
// Tokens are consumed from fresh_pool front to back; running out means the
// requested overlap cannot be realized with the given vocabulary.
inline TaskSpec derive_task(const TaskSpec& reference, double overlap,
                            const std::vector<int>& fresh_pool,
                            const std::string& new_id) {
  validate_task(reference);
  if (overlap < 0.0 || overlap > 1.0)
    throw ConfigError("derive_task: overlap outside [0, 1]");
  TaskSpec out = reference;
  out.task_id = new_id;
  out.feature_overlap = overlap;
  out.reference_task = reference.task_id;
  std::size_t next_fresh = 0;
  for (auto& region : out.rules) {
    for (LabelRule& rule : region) {
      const std::size_t pool = rule.feature_tokens.size();
      const std::size_t keep = static_cast<std::size_t>(
          std::llround(overlap * static_cast<double>(pool)));
      for (std::size_t i = keep; i < pool; ++i) {
        if (next_fresh >= fresh_pool.size())
          throw ConfigError("derive_task: fresh token pool exhausted");
        rule.feature_tokens[i] = fresh_pool[next_fresh++];
      }
    }
  }
  return out;
}

// Stratified few-shot split. Per-label quotas follow the dataset's label
// counts by largest remainder, which reduces to an even split when k
// divides evenly across balanced labels. Identical inputs give identical
// episodes; train and dev are disjoint by construction and the test split
// is everything left over.
inline FewShotEpisode sample_episode(const Dataset& data, int k, std::uint64_t seed,
                                     int min_test = 1) {
  if (k < 1) throw ConfigError("sample_episode: k must be >= 1");
  if (min_test < 0) throw ConfigError("sample_episode: negative min_test");
  if (static_cast<int>(data.size()) < 2 * k + min_test)
    throw ConfigError("sample_episode: dataset smaller than 2k plus test minimum");

  std::vector<int> labels;
  for (const LabeledSample& s : data)
    if (std::find(labels.begin(), labels.end(), s.seq.label) == labels.end())
      labels.push_back(s.seq.label);
  std::sort(labels.begin(), labels.end());

  std::unordered_map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < data.size(); ++i)
    by_label[data[i].seq.label].push_back(i);

  // Largest-remainder apportionment of k over the label counts.
  std::vector<int> quota(labels.size(), 0);
  std::vector<std::pair<double, std::size_t>> remainder;
  int assigned = 0;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    const double exact = static_cast<double>(k) *
                         static_cast<double>(by_label[labels[c]].size()) /
                         static_cast<double>(data.size());
    quota[c] = static_cast<int>(exact);
    assigned += quota[c];
    remainder.push_back({exact - static_cast<double>(quota[c]), c});
  }
  std::sort(remainder.begin(), remainder.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (int extra = 0; extra < k - assigned; ++extra)
    ++quota[remainder[static_cast<std::size_t>(extra) % remainder.size()].second];

  FewShotEpisode ep;
  ep.seed = seed;
  ep.k = k;
  Rng rng(seed);
  std::vector<std::size_t> leftovers;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    std::vector<std::size_t>& group = by_label[labels[c]];
    rng.shuffle(group);
    if (static_cast<int>(group.size()) < 2 * quota[c])
      throw ConfigError("sample_episode: too few samples of one label");
    std::size_t next = 0;
    for (int t = 0; t < quota[c]; ++t) ep.train.push_back(data[group[next++]]);
    for (int t = 0; t < quota[c]; ++t) ep.dev.push_back(data[group[next++]]);
    while (next < group.size()) leftovers.push_back(group[next++]);
  }
  std::sort(leftovers.begin(), leftovers.end());
  for (std::size_t i : leftovers) ep.test.push_back(data[i]);
  if (static_cast<int>(ep.test.size()) < min_test)
    throw ConfigError("sample_episode: test split below minimum");
  return ep;
}

// Reference suite: T binary source tasks plus one region-partitioned
// target. The first P = T - T/3 sources are experts, one per feature
// block pair, labeled the same way the target labels that pair. The
// remaining T/3 sources are reverse readers of the first block pairs:
// they see the same features but declare the opposite label for each
// block, so on their pair's target region they answer confidently and
// wrongly. Mixed target regions draw evidence from two block pairs at
// once, which rewards blending two sources over picking one.
struct SuiteConfig {
  int n_sources = 6;
  int block_size = 8;        // feature tokens per (pair, label) block
  int first_feature = 64;    // feature blocks occupy a contiguous range
  int first_background = 224;
  int vocab = 512;
  double mixed_fraction = 0.32;  // target weight spread over mixed regions
  double noise_rate = 0.02;
  int min_length = 8;
  int max_length = 16;
  int n_signal = 3;
};

struct ReferenceSuite {
  SuiteConfig cfg;
  TaskSpec pretrain;               // labels every block, for backbone training
  std::vector<TaskSpec> sources;   // one binary task per source
  TaskSpec target;
  std::vector<int> target_verbalizer;              // {40, 41}
  std::vector<std::vector<int>> source_verbalizers;  // {10+2j, 11+2j}
};

// Number of feature block pairs; pairs beyond the reverse readers have a
// single (expert) source.
inline int suite_pairs(const SuiteConfig& cfg) {
  return cfg.n_sources - cfg.n_sources / 3;
}

// Feature block for (pair p, label c): block_size consecutive tokens.
inline std::vector<int> suite_block(const SuiteConfig& cfg, int pair, int label) {
  std::vector<int> out;
  const int start = cfg.first_feature + (2 * pair + label) * cfg.block_size;
  for (int i = 0; i < cfg.block_size; ++i) out.push_back(start + i);
  return out;
}

inline ReferenceSuite make_reference_suite(const SuiteConfig& cfg = SuiteConfig{}) {
  if (cfg.n_sources < 2) throw ConfigError("suite: need at least two sources");
  if (cfg.block_size < 1) throw ConfigError("suite: block_size must be >= 1");
  if (cfg.mixed_fraction < 0.0 || cfg.mixed_fraction >= 1.0)
    throw ConfigError("suite: mixed_fraction outside [0, 1)");
  const int n_pairs = suite_pairs(cfg);
  if (10 + 2 * n_pairs > 40)
    throw ConfigError("suite: too many sources for the verbalizer layout");
  const int blocks_end = cfg.first_feature + 2 * n_pairs * cfg.block_size;
  if (blocks_end > cfg.first_background || cfg.first_background >= cfg.vocab)
    throw ConfigError("suite: token ranges overlap or exceed vocab");

  ReferenceSuite suite;
  suite.cfg = cfg;
  std::vector<int> background;
  for (int t = cfg.first_background; t < cfg.vocab; ++t) background.push_back(t);

  auto base = [&](TaskSpec& spec) {
    spec.background_tokens = background;
    spec.min_length = cfg.min_length;
    spec.max_length = cfg.max_length;
    spec.n_signal = cfg.n_signal;
    spec.noise_rate = cfg.noise_rate;
  };

  // Pretraining task: one label per block so the backbone links every
  // feature block to its own verbalizer token.
  suite.pretrain.task_id = "pretrain";
  suite.pretrain.num_labels = 2 * n_pairs;
  suite.pretrain.rules.emplace_back();
  for (int p = 0; p < n_pairs; ++p)
    for (int c = 0; c < 2; ++c) {
      LabelRule rule;
      rule.feature_tokens = suite_block(cfg, p, c);
      suite.pretrain.rules[0].push_back(rule);
      suite.pretrain.verbalizer_tokens.push_back(10 + 2 * p + c);
    }
  suite.pretrain.region_weights = {1.0};
  base(suite.pretrain);

  for (int j = 0; j < cfg.n_sources; ++j) {
    TaskSpec src;
    src.task_id = "source" + std::to_string(j);
    src.num_labels = 2;
    src.rules.resize(1);
    const bool reverse = j >= n_pairs;
    const int pair = reverse ? j - n_pairs : j;
    for (int c = 0; c < 2; ++c) {
      LabelRule rule;
      rule.feature_tokens = suite_block(cfg, pair, reverse ? 1 - c : c);
      src.rules[0].push_back(rule);
    }
    src.region_weights = {1.0};
    if (reverse)
      src.verbalizer_tokens = {11 + 2 * pair, 10 + 2 * pair};
    else
      src.verbalizer_tokens = {10 + 2 * pair, 11 + 2 * pair};
    base(src);
    suite.sources.push_back(src);
    suite.source_verbalizers.push_back(src.verbalizer_tokens);
  }

  suite.target.task_id = "target";
  suite.target.num_labels = 2;
  const int n_mixed = n_pairs > 2 ? n_pairs : n_pairs / 2;
  suite.target.rules.resize(static_cast<std::size_t>(n_pairs + n_mixed));
  for (int p = 0; p < n_pairs; ++p) {
    for (int c = 0; c < 2; ++c) {
      LabelRule rule;
      rule.feature_tokens = suite_block(cfg, p, c);
      suite.target.rules[static_cast<std::size_t>(p)].push_back(rule);
    }
    suite.target.region_weights.push_back((1.0 - cfg.mixed_fraction) /
                                          static_cast<double>(n_pairs));
  }
  for (int m = 0; m < n_mixed; ++m) {
    const int p1 = m;
    const int p2 = (m + 1) % n_pairs;
    for (int c = 0; c < 2; ++c) {
      LabelRule rule;
      for (int tok : suite_block(cfg, p1, c)) rule.feature_tokens.push_back(tok);
      for (int tok : suite_block(cfg, p2, c)) rule.feature_tokens.push_back(tok);
      suite.target.rules[static_cast<std::size_t>(n_pairs + m)].push_back(rule);
    }
    suite.target.region_weights.push_back(cfg.mixed_fraction /
                                          static_cast<double>(n_mixed));
  }
  suite.target.verbalizer_tokens = {40, 41};
  base(suite.target);
  suite.target_verbalizer = suite.target.verbalizer_tokens;

  validate_task(suite.pretrain);
  for (const TaskSpec& s : suite.sources) validate_task(s);
  validate_task(suite.target);
  return suite;
}

// Cached per-sample source logits plus pooled inputs, so expensive
// backbone passes can be exported once and consumed elsewhere.
struct LogitDump {
  int d = 0;
  int v = 0;
  int t = 0;
  std::vector<std::uint64_t> ids;
  std::vector<LogitBundle> bundles;
};

inline constexpr char kLogitDumpMagic[9] = "SESOMLD1";

inline void save_logit_dump(const LogitDump& dump, const std::string& path) {
  if (dump.d < 1 || dump.v < 1 || dump.t < 1)
    throw DimensionError("logit dump: non-positive dimensions");
  if (dump.ids.size() != dump.bundles.size())
    throw DimensionError("logit dump: id count differs from bundle count");
  for (std::size_t r = 0; r < dump.bundles.size(); ++r) {
    const LogitBundle& b = dump.bundles[r];
    if (static_cast<int>(b.x_hat.size()) != dump.d ||
        static_cast<int>(b.source_logits.size()) != dump.t)
      throw DimensionError("logit dump: record " + std::to_string(r) +
                           " has inconsistent shape");
    for (const Vec& l : b.source_logits)
      if (static_cast<int>(l.size()) != dump.v)
        throw DimensionError("logit dump: record " + std::to_string(r) +
                             " has inconsistent shape");
  }
  BinaryWriter w(path);
  w.magic(kLogitDumpMagic);
  w.u32(static_cast<std::uint32_t>(dump.d));
  w.u32(static_cast<std::uint32_t>(dump.v));
  w.u32(static_cast<std::uint32_t>(dump.t));
  w.u32(static_cast<std::uint32_t>(dump.bundles.size()));
  for (std::size_t r = 0; r < dump.bundles.size(); ++r) {
    const LogitBundle& b = dump.bundles[r];
    w.u64(dump.ids[r]);
    w.i32(b.label);
    w.doubles(b.x_hat);
    for (const Vec& l : b.source_logits) w.doubles(l);
  }
}

inline LogitDump load_logit_dump(const std::string& path) {
  BinaryReader r(path);
  r.expect_magic(kLogitDumpMagic);
  LogitDump dump;
  dump.d = static_cast<int>(r.u32());
  dump.v = static_cast<int>(r.u32());
  dump.t = static_cast<int>(r.u32());
  const std::uint32_t n = r.u32();
  if (dump.d < 1 || dump.d > (1 << 20) || dump.v < 1 || dump.v > (1 << 24) ||
      dump.t < 1 || dump.t > (1 << 16))
    throw FormatError("logit dump: implausible header dimensions", r.offset());
  for (std::uint32_t rec = 0; rec < n; ++rec) {
    try {
      dump.ids.push_back(r.u64());
      LogitBundle b;
      b.label = r.i32();
      b.x_hat = r.doubles(static_cast<std::size_t>(dump.d));
      for (int j = 0; j < dump.t; ++j)
        b.source_logits.push_back(r.doubles(static_cast<std::size_t>(dump.v)));
      if (!all_finite(b.x_hat))
        throw FormatError("non-finite pooled input", r.offset());
      for (const Vec& l : b.source_logits)
        if (!all_finite(l)) throw FormatError("non-finite logits", r.offset());
      dump.bundles.push_back(std::move(b));
    } catch (const FormatError& e) {
      std::string inner = e.what();
      const std::size_t cut = inner.rfind(" (byte offset");
      if (cut != std::string::npos) inner.resize(cut);
      throw FormatError("logit dump: record " + std::to_string(rec) + ": " + inner,
                        e.offset);
    }
  }
  r.expect_eof();
  return dump;
}

// Human-readable sidecar describing what a logit dump contains.
struct DumpManifest {
  std::string target_task;
  std::vector<int> target_verbalizer;
  std::vector<std::string> source_tasks;
  std::vector<std::vector<int>> source_verbalizers;
  int n_records = 0;
};

inline void save_dump_manifest(const DumpManifest& m, const std::string& path) {
  nlohmann::json j;
  j["target_task"] = m.target_task;
  j["target_verbalizer"] = m.target_verbalizer;
  j["source_tasks"] = m.source_tasks;
  j["source_verbalizers"] = m.source_verbalizers;
  j["n_records"] = m.n_records;
  std::ofstream out(path);
  if (!out) throw IoError("cannot open manifest for writing: " + path);
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing manifest: " + path);
}

inline DumpManifest load_dump_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what(), 0);
  }
  DumpManifest m;
  try {
    m.target_task = j.at("target_task").get<std::string>();
    m.target_verbalizer = j.at("target_verbalizer").get<std::vector<int>>();
    m.source_tasks = j.at("source_tasks").get<std::vector<std::string>>();
    m.source_verbalizers = j.at("source_verbalizers").get<std::vector<std::vector<int>>>();
    m.n_records = j.at("n_records").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what(), 0);
  }
  return m;
}

}  // namespace sesom
