#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "sesom/prompts.hpp"
#include "sesom/verbalizer.hpp"

using namespace sesom;
namespace fs = std::filesystem;

namespace {

struct TempFile {
  fs::path path;
  explicit TempFile(const char* stem) {
    path = fs::temp_directory_path() / (std::string(stem) + "_" +
                                        std::to_string(::getpid()) + ".bin");
  }
  ~TempFile() { std::error_code ec; fs::remove(path, ec); }
};

// A backbone pretrained on a 4-class corpus: token group {10+2c, 11+2c}
// signals class c, verbalized as token 3+c.
struct Fixture {
  BackboneConfig cfg;
  BackboneParams backbone;
  std::vector<int> base_label_tokens = {3, 4, 5, 6};
  std::vector<TokenSequence> base_corpus;

  Fixture() {
    cfg.vocab = 64;
    cfg.dim = 16;
    Rng gen(404);
    for (int i = 0; i < 64; ++i) {
      TokenSequence s;
      s.label = i % 4;
      const int base = 10 + 2 * s.label;
      s.token_ids = {base, base + 1, base,
                     static_cast<int>(gen.next_below(8)) + 40};
      base_corpus.push_back(s);
    }
    TuneConfig tc;
    tc.learning_rate = 5e-3;
    tc.epochs = 30;
    tc.batch_size = 16;
    Rng rng(1);
    backbone = pretrain_backbone(base_corpus, base_label_tokens, cfg, tc, rng);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

// Binary task over the first two base groups.
std::vector<TokenSequence> binary_task(int n, Rng& rng) {
  std::vector<TokenSequence> data;
  for (int i = 0; i < n; ++i) {
    TokenSequence s;
    s.label = i % 2;
    const int base = 10 + 2 * s.label;
    s.token_ids = {base, static_cast<int>(rng.next_below(8)) + 40, base + 1};
    data.push_back(s);
  }
  return data;
}

double train_accuracy(const BackboneParams& bb, const SoftPrompt& p,
                      const std::vector<TokenSequence>& data,
                      const std::vector<int>& label_tokens) {
  VerbalizerMap map(label_tokens, {});
  int hits = 0;
  for (const auto& s : data) {
    Vec logits = backbone_forward(bb, p.matrix, embed(s, bb));
    if (predict_label(logits, map) == s.label) ++hits;
  }
  return static_cast<double>(hits) / data.size();
}

}  // namespace

TEST(InitPrompt, GaussianIsDeterministicAndCentered) {
  auto& f = fixture();
  Rng a(12), b(12);
  SoftPrompt p = init_prompt(8, f.backbone, a, PromptInit::gaussian);
  SoftPrompt q = init_prompt(8, f.backbone, b, PromptInit::gaussian);
  EXPECT_EQ(p.matrix.data, q.matrix.data);

  Rng c(13);
  SoftPrompt wide = init_prompt(1000, f.backbone, c, PromptInit::gaussian,
                                "stat-check");
  // entries are N(0, 0.5^2); m=1000, d=16 here
  double mean = 0.0;
  for (double x : wide.matrix.data) mean += x;
  mean /= wide.matrix.data.size();
  const double bound = 3.0 * 0.5 / std::sqrt(static_cast<double>(wide.matrix.data.size()));
  EXPECT_LT(std::abs(mean), bound);
  EXPECT_EQ(wide.task_id, "stat-check");
}

TEST(InitPrompt, VocabRowsAreDistinctTableRows) {
  auto& f = fixture();
  Rng rng(21);
  SoftPrompt p = init_prompt(8, f.backbone, rng, PromptInit::vocab_rows);
  std::set<int> matched_rows;
  for (int r = 0; r < p.matrix.rows; ++r) {
    int found = -1;
    for (int t = 0; t < f.cfg.vocab && found < 0; ++t) {
      bool same = true;
      for (int c = 0; c < f.cfg.dim; ++c)
        if (p.matrix.at(r, c) != f.backbone.embed_table.at(t, c)) { same = false; break; }
      if (same) found = t;
    }
    ASSERT_GE(found, 0) << "prompt row " << r << " is not an embedding row";
    matched_rows.insert(found);
  }
  EXPECT_EQ(matched_rows.size(), 8u);

  Rng rng2(22);
  EXPECT_THROW(init_prompt(f.cfg.vocab + 1, f.backbone, rng2, PromptInit::vocab_rows),
               ConfigError);
}

TEST(PromptTune, PreconditionsAndEpochZero) {
  auto& f = fixture();
  Rng rng(31);
  SoftPrompt p = init_prompt(4, f.backbone, rng, PromptInit::gaussian);
  auto data = binary_task(8, rng);
  TuneConfig tc;
  tc.epochs = 0;
  SoftPrompt same = prompt_tune(p, f.backbone, data, {3, 4}, tc);
  EXPECT_EQ(same.matrix.data, p.matrix.data);

  BackboneParams thawed = f.backbone;
  thawed.frozen = false;
  tc.epochs = 1;
  EXPECT_THROW(prompt_tune(p, thawed, data, {3, 4}, tc), ConfigError);

  std::vector<TokenSequence> bad = {{{10, 11}, 2, "t"}};
  EXPECT_THROW(prompt_tune(p, f.backbone, bad, {3, 4}, tc), ConfigError);
  EXPECT_THROW(prompt_tune(p, f.backbone, {}, {3, 4}, tc), ConfigError);
}

TEST(PromptTune, LearnsSeparableTaskAndLeavesBackboneAlone) {
  auto& f = fixture();
  const std::uint64_t hash_before = f.backbone.hash();
  Rng rng(0);
  SoftPrompt p = init_prompt(8, f.backbone, rng, PromptInit::gaussian, "bin");
  auto data = binary_task(32, rng);
  TuneConfig tc;
  tc.epochs = 10;
  tc.seed = 0;
  std::vector<double> losses;
  SoftPrompt tuned = prompt_tune(p, f.backbone, data, {3, 4}, tc, &losses);
  ASSERT_EQ(losses.size(), 10u);
  EXPECT_LE(losses.back(), losses.front());
  EXPECT_GT(train_accuracy(f.backbone, tuned, data, {3, 4}), 0.9);
  EXPECT_EQ(f.backbone.hash(), hash_before);
  EXPECT_EQ(tuned.task_id, "bin");
}

TEST(PromptTune, GradientMatchesFiniteDifferencesOnMicroInstance) {
  auto& f = fixture();
  Rng rng(33);
  SoftPrompt p = init_prompt(2, f.backbone, rng, PromptInit::gaussian);
  TokenSequence sample;
  sample.token_ids = {10, 41};
  sample.label = 0;
  const int target_token = 3;

  BackboneTrace trace;
  Vec logits = backbone_forward(f.backbone, p.matrix, embed(sample, f.backbone), &trace);
  auto ce = cross_entropy(logits, target_token);
  Matrix analytic(p.matrix.rows, p.matrix.cols);
  backbone_backward(f.backbone, trace, ce.grad, nullptr, &analytic, nullptr);

  auto loss_at = [&](const Vec& flat) {
    Matrix m = p.matrix;
    m.data = flat;
    Vec lg = backbone_forward(f.backbone, m, embed(sample, f.backbone));
    return cross_entropy(lg, target_token).loss;
  };
  Vec fd = finite_diff_grad(loss_at, p.matrix.data, 1e-5);
  EXPECT_LT(grad_rel_error(analytic.data, fd), 1e-4);
}

TEST(FewShotAdapt, SkipFlagAndIndependentStreams) {
  auto& f = fixture();
  Rng rng(35);
  std::vector<SoftPrompt> sources;
  for (int j = 0; j < 3; ++j)
    sources.push_back(init_prompt(4, f.backbone, rng, PromptInit::gaussian,
                                  "src" + std::to_string(j)));
  auto episode = binary_task(8, rng);
  TuneConfig tc;
  tc.epochs = 3;
  tc.learning_rate = 0.05;

  auto skipped = few_shot_adapt(sources, f.backbone, episode, {3, 4}, tc, true);
  ASSERT_EQ(skipped.size(), sources.size());
  for (std::size_t j = 0; j < sources.size(); ++j)
    EXPECT_EQ(skipped[j].matrix.data, sources[j].matrix.data);

  auto adapted = few_shot_adapt(sources, f.backbone, episode, {3, 4}, tc, false);
  for (std::size_t j = 0; j < sources.size(); ++j)
    EXPECT_NE(adapted[j].matrix.data, sources[j].matrix.data);
  EXPECT_NE(adapted[0].matrix.data, adapted[1].matrix.data);

  EXPECT_THROW(few_shot_adapt(sources, f.backbone, {}, {3, 4}, tc, false), ConfigError);
}

TEST(SpotRetrieve, ArgmaxCosineWithTieRule) {
  auto& f = fixture();
  Rng rng(37);
  std::vector<SoftPrompt> sources;
  for (int j = 0; j < 4; ++j)
    sources.push_back(init_prompt(3, f.backbone, rng, PromptInit::gaussian));
  SoftPrompt target = sources[2];
  EXPECT_EQ(spot_t_retrieve(target, sources), 2);

  // brute-force oracle on random instances
  for (int trial = 0; trial < 20; ++trial) {
    SoftPrompt t = init_prompt(3, f.backbone, rng, PromptInit::gaussian);
    int oracle = 0;
    double best = -2.0;
    for (std::size_t j = 0; j < sources.size(); ++j) {
      const double sim = cosine_similarity(t.matrix.data, sources[j].matrix.data);
      if (sim > best) { best = sim; oracle = static_cast<int>(j); }
    }
    EXPECT_EQ(spot_t_retrieve(t, sources), oracle);
    // positive rescaling leaves the argmax alone
    std::vector<SoftPrompt> scaled = sources;
    for (std::size_t j = 0; j < scaled.size(); ++j)
      scale(scaled[j].matrix.data, 0.5 + j);
    SoftPrompt t2 = t;
    scale(t2.matrix.data, 7.0);
    EXPECT_EQ(spot_t_retrieve(t2, scaled), oracle);
  }

  std::vector<SoftPrompt> bad = sources;
  bad[1].matrix = Matrix(2, f.cfg.dim);
  EXPECT_THROW(spot_t_retrieve(target, bad), DimensionError);
}

TEST(PromptFile, RoundTripAndCorruption) {
  auto& f = fixture();
  Rng rng(39);
  SoftPrompt p = init_prompt(5, f.backbone, rng, PromptInit::gaussian, "round-trip");
  TempFile tmp("sesom_sp");
  save_prompt(p, tmp.path);
  SoftPrompt q = load_prompt(tmp.path);
  EXPECT_EQ(q.task_id, "round-trip");
  EXPECT_EQ(q.matrix.rows, 5);
  EXPECT_EQ(q.matrix.cols, f.cfg.dim);
  EXPECT_EQ(q.matrix.data, p.matrix.data);

  fs::resize_file(tmp.path, fs::file_size(tmp.path) - 3);
  EXPECT_THROW(load_prompt(tmp.path), FormatError);

  save_prompt(p, tmp.path);
  {
    std::fstream fbin(tmp.path, std::ios::in | std::ios::out | std::ios::binary);
    fbin.seekp(7);
    fbin.put('2');
  }
  EXPECT_THROW(load_prompt(tmp.path), VersionError);

  SoftPrompt nan_prompt = p;
  nan_prompt.matrix.at(0, 0) = std::nan("");
  save_prompt(nan_prompt, tmp.path);
  EXPECT_THROW(load_prompt(tmp.path), FormatError);
}
