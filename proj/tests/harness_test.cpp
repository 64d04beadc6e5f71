#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sesom/harness.hpp"

namespace {

sesom::ExperimentConfig tiny_config() {
  sesom::ExperimentConfig cfg;
  cfg.suite.n_sources = 2;
  cfg.backbone.dim = 16;
  cfg.backbone.epochs = 6;
  cfg.backbone.batch_size = 24;
  cfg.prompts.length = 4;
  cfg.prompts.epochs = 4;
  cfg.adapt.epochs = 2;
  cfg.g.dx = 8;
  cfg.g.dl = 8;
  cfg.g.dp = 8;
  cfg.g.epochs = 8;
  cfg.g.batch_size = 8;
  cfg.run.shots = 8;
  cfg.run.n_seeds = 2;
  cfg.run.pseudo_pool = 24;
  cfg.run.case_samples = 4;
  cfg.data.n_pretrain = 144;
  cfg.data.n_source_train = 96;
  cfg.data.n_target = 140;
  return cfg;
}

const sesom::SuiteArtifacts& tiny_artifacts() {
  static const sesom::SuiteArtifacts art = sesom::prepare_artifacts(tiny_config());
  return art;
}

std::vector<sesom::MethodSpec> specs_for(const std::vector<std::string>& methods) {
  std::vector<sesom::MethodSpec> out;
  for (const std::string& m : methods) out.push_back({m, m, 0});
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

TEST(Harness, PrepareArtifactsIsDeterministic) {
  const sesom::SuiteArtifacts& a = tiny_artifacts();
  const sesom::SuiteArtifacts b = sesom::prepare_artifacts(tiny_config());
  EXPECT_EQ(a.backbone.head.data, b.backbone.head.data);
  EXPECT_EQ(a.backbone.embed_table.data, b.backbone.embed_table.data);
  ASSERT_EQ(a.sources.size(), b.sources.size());
  for (std::size_t j = 0; j < a.sources.size(); ++j) {
    EXPECT_EQ(a.sources[j].matrix.data, b.sources[j].matrix.data);
    EXPECT_EQ(a.sources[j].task_id, b.sources[j].task_id);
  }
  ASSERT_EQ(a.target_data.size(), b.target_data.size());
  for (std::size_t i = 0; i < a.target_data.size(); ++i) {
    EXPECT_EQ(a.target_data[i].id, b.target_data[i].id);
    EXPECT_EQ(a.target_data[i].seq.token_ids, b.target_data[i].seq.token_ids);
  }
  EXPECT_EQ(a.maps.size(), static_cast<std::size_t>(tiny_config().suite.n_sources));
}

TEST(Harness, EvaluateAllMethodsProducesSaneRecords) {
  const sesom::ExperimentConfig cfg = tiny_config();
  const auto& art = tiny_artifacts();
  std::vector<std::string> methods(sesom::method_names().begin(),
                                   sesom::method_names().end());
  const sesom::RunResult r = sesom::evaluate_methods(art, cfg, specs_for(methods));

  ASSERT_EQ(r.methods.size(), methods.size());
  EXPECT_EQ(r.task, "target");
  ASSERT_EQ(r.source_names.size(), 2u);
  EXPECT_GT(r.wall_seconds, 0.0);

  const std::vector<std::string> weighted = {"sesom", "hard_variant", "fixed_weight",
                                             "acc_sp", "pseudo_label"};
  for (const sesom::MethodRun& m : r.methods) {
    SCOPED_TRACE(m.label);
    EXPECT_EQ(m.n_complete, cfg.run.n_seeds);
    EXPECT_GE(m.mean_acc, 0.0);
    EXPECT_LE(m.mean_acc, 1.0);
    EXPECT_GE(m.mean_f1, 0.0);
    EXPECT_LE(m.mean_f1, 1.0);
    EXPECT_GE(m.stderr_acc, 0.0);
    EXPECT_TRUE(std::isfinite(m.stderr_f1));
    ASSERT_EQ(m.seeds.size(), 2u);
    const bool expect_weights = std::find(weighted.begin(), weighted.end(), m.method) !=
                                weighted.end();
    EXPECT_EQ(m.has_weights, expect_weights);
    for (std::size_t i = 0; i < m.seeds.size(); ++i) {
      const sesom::SeedRecord& rec = m.seeds[i];
      EXPECT_TRUE(rec.completed);
      EXPECT_EQ(rec.seed, cfg.run.seed_offset + i);
      ASSERT_EQ(rec.source_acc.size(), 2u);
      ASSERT_EQ(rec.source_f1.size(), 2u);
      EXPECT_EQ(rec.best_single_acc,
                *std::max_element(rec.source_acc.begin(), rec.source_acc.end()));
      if (expect_weights) {
        ASSERT_EQ(rec.mean_weights.size(), 2u);
        double sum = 0.0;
        for (double w : rec.mean_weights) {
          EXPECT_GE(w, 0.0);
          sum += w;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
      }
    }
    if (expect_weights) {
      ASSERT_EQ(m.mean_weights.size(), 2u);
      double sum = 0.0;
      for (double w : m.mean_weights) sum += w;
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
  }
}

TEST(Harness, SeedIsolationOffsetAndStderrExactness) {
  const auto& art = tiny_artifacts();
  sesom::ExperimentConfig cfg = tiny_config();
  const sesom::RunResult both = sesom::evaluate_methods(art, cfg, specs_for({"sesom"}));
  ASSERT_EQ(both.methods[0].seeds.size(), 2u);

  sesom::ExperimentConfig first_cfg = cfg;
  first_cfg.run.n_seeds = 1;
  const sesom::RunResult first = sesom::evaluate_methods(art, first_cfg, specs_for({"sesom"}));
  sesom::ExperimentConfig second_cfg = first_cfg;
  second_cfg.run.seed_offset = 1;
  const sesom::RunResult second =
      sesom::evaluate_methods(art, second_cfg, specs_for({"sesom"}));

  EXPECT_EQ(both.methods[0].seeds[0].acc, first.methods[0].seeds[0].acc);
  EXPECT_EQ(both.methods[0].seeds[0].f1, first.methods[0].seeds[0].f1);
  EXPECT_EQ(both.methods[0].seeds[0].mean_weights, first.methods[0].seeds[0].mean_weights);
  EXPECT_EQ(both.methods[0].seeds[1].acc, second.methods[0].seeds[0].acc);
  EXPECT_EQ(both.methods[0].seeds[1].f1, second.methods[0].seeds[0].f1);
  EXPECT_EQ(both.methods[0].seeds[1].mean_weights, second.methods[0].seeds[0].mean_weights);

  sesom::Vec accs, f1s;
  for (const sesom::SeedRecord& rec : both.methods[0].seeds) {
    accs.push_back(rec.acc);
    f1s.push_back(rec.f1);
  }
  EXPECT_EQ(both.methods[0].mean_acc, sesom::mean(accs));
  EXPECT_EQ(both.methods[0].stderr_acc, sesom::std_error(accs));
  EXPECT_EQ(both.methods[0].mean_f1, sesom::mean(f1s));
  EXPECT_EQ(both.methods[0].stderr_f1, sesom::std_error(f1s));
}

TEST(Harness, RerunIsByteIdentical) {
  const auto& art = tiny_artifacts();
  const sesom::ExperimentConfig cfg = tiny_config();
  const auto specs = specs_for({"sesom", "uniform"});
  const std::string csv1 = sesom::results_csv(sesom::evaluate_methods(art, cfg, specs));
  const std::string csv2 = sesom::results_csv(sesom::evaluate_methods(art, cfg, specs));
  EXPECT_EQ(csv1, csv2);

  const auto rows = lines_of(csv1);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0], "method,task,metric,mean,stderr,n_seeds");
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto cells = split_csv_line(rows[i]);
    ASSERT_EQ(cells.size(), 6u);
    EXPECT_EQ(cells[1], "target");
    EXPECT_EQ(cells[5], "2");
  }
  EXPECT_EQ(split_csv_line(rows[1])[0], "sesom");
  EXPECT_EQ(split_csv_line(rows[1])[2], "accuracy");
  EXPECT_EQ(split_csv_line(rows[2])[2], "f1");
  EXPECT_EQ(split_csv_line(rows[3])[0], "uniform");
}

TEST(Harness, TopSourceRestrictionBehaves) {
  const auto& art = tiny_artifacts();
  const sesom::ExperimentConfig cfg = tiny_config();
  const sesom::RunResult r = sesom::evaluate_methods(
      art, cfg, {{"sesom_top1", "sesom", 1}, {"sesom_all", "sesom", 0}, {"sesom_top2", "sesom", 2}});
  ASSERT_EQ(r.methods.size(), 3u);

  const sesom::MethodRun& top1 = r.methods[0];
  EXPECT_EQ(top1.n_complete, 2);
  for (const sesom::SeedRecord& rec : top1.seeds) {
    ASSERT_EQ(rec.mean_weights.size(), 2u);
    int nonzero = 0;
    for (double w : rec.mean_weights)
      if (w != 0.0) {
        ++nonzero;
        EXPECT_DOUBLE_EQ(w, 1.0);
      }
    EXPECT_EQ(nonzero, 1);
    EXPECT_FALSE(rec.has_pearson);
  }

  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(r.methods[1].seeds[i].acc, r.methods[2].seeds[i].acc);
    EXPECT_EQ(r.methods[1].seeds[i].mean_weights, r.methods[2].seeds[i].mean_weights);
  }

  EXPECT_THROW(sesom::evaluate_methods(art, cfg, {{"bad", "sesom", 3}}), sesom::ConfigError);
  EXPECT_THROW(sesom::evaluate_methods(art, cfg, {{"bad", "nope", 0}}), sesom::ConfigError);
  EXPECT_THROW(sesom::evaluate_methods(art, cfg, {}), sesom::ConfigError);
}

TEST(Harness, WeightsCsvContract) {
  const auto& art = tiny_artifacts();
  const sesom::ExperimentConfig cfg = tiny_config();
  const sesom::RunResult r = sesom::evaluate_methods(art, cfg, specs_for({"sesom"}));
  const std::string csv = sesom::weights_csv(r);
  const auto rows = lines_of(csv);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], "target,source0,source1,pearson_r");
  const auto cells = split_csv_line(rows[1]);
  ASSERT_EQ(cells.size(), 4u);
  EXPECT_EQ(cells[0], "target");
  const double w0 = std::stod(cells[1]);
  const double w1 = std::stod(cells[2]);
  EXPECT_NEAR(w0 + w1, 1.0, 1e-5);
  EXPECT_NEAR(w0, r.methods[0].mean_weights[0], 1e-6);

  const sesom::RunResult plain = sesom::evaluate_methods(art, cfg, specs_for({"uniform"}));
  EXPECT_THROW(sesom::weights_csv(plain), sesom::ConfigError);
}

TEST(Harness, CaseStudyExportMatchesContract) {
  const auto& art = tiny_artifacts();
  const sesom::ExperimentConfig cfg = tiny_config();
  const auto records = sesom::case_study_export(art, cfg, {});
  ASSERT_EQ(records.size(), static_cast<std::size_t>(cfg.run.case_samples));
  for (const sesom::CaseRecord& rec : records) {
    EXPECT_GE(rec.gold, 0);
    EXPECT_LT(rec.gold, 2);
    EXPECT_GE(rec.final, 0);
    EXPECT_LT(rec.final, 2);
    ASSERT_EQ(rec.per_source.size(), 2u);
    double sum = 0.0;
    bool unanimous = true;
    for (const auto& [pred, weight] : rec.per_source) {
      EXPECT_GE(weight, 0.0);
      sum += weight;
      if (pred != rec.per_source[0].first) unanimous = false;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    if (unanimous) {
      EXPECT_EQ(rec.final, rec.per_source[0].first);
    }
  }

  const std::string jsonl = sesom::case_study_jsonl(records);
  const auto rows = lines_of(jsonl);
  ASSERT_EQ(rows.size(), records.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const nlohmann::json j = nlohmann::json::parse(rows[i]);
    ASSERT_EQ(j.size(), 4u);
    EXPECT_EQ(j.at("sample_id").get<std::uint64_t>(), records[i].sample_id);
    EXPECT_EQ(j.at("gold").get<int>(), records[i].gold);
    EXPECT_EQ(j.at("final").get<int>(), records[i].final);
    const auto& per = j.at("per_source");
    ASSERT_EQ(per.size(), 2u);
    for (const auto& entry : per) {
      ASSERT_EQ(entry.size(), 2u);
      EXPECT_TRUE(entry.contains("pred"));
      EXPECT_TRUE(entry.contains("weight"));
    }
  }

  EXPECT_THROW(sesom::case_study_export(art, cfg, {987654321u}), sesom::LookupError);
}

TEST(Harness, LogitDumpExportRoundTrip) {
  const auto& art = tiny_artifacts();
  const sesom::ExperimentConfig cfg = tiny_config();
  const auto [dump, manifest] = sesom::make_logit_dump(art, cfg);

  EXPECT_EQ(dump.d, cfg.backbone.dim);
  EXPECT_EQ(dump.v, cfg.suite.vocab);
  EXPECT_EQ(dump.t, cfg.suite.n_sources);
  ASSERT_GT(dump.bundles.size(), 0u);
  EXPECT_EQ(manifest.n_records, static_cast<int>(dump.bundles.size()));
  EXPECT_EQ(manifest.target_task, "target");
  ASSERT_EQ(manifest.source_tasks.size(), 2u);
  EXPECT_EQ(manifest.source_verbalizers[1], (std::vector<int>{12, 13}));

  const auto dir = std::filesystem::temp_directory_path() / "sesom_harness_dump";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "dump.bin").string();
  sesom::save_logit_dump(dump, path);
  const sesom::LogitDump back = sesom::load_logit_dump(path);
  ASSERT_EQ(back.bundles.size(), dump.bundles.size());
  EXPECT_EQ(back.ids, dump.ids);
  for (std::size_t i = 0; i < dump.bundles.size(); ++i) {
    EXPECT_EQ(back.bundles[i].x_hat, dump.bundles[i].x_hat);
    EXPECT_EQ(back.bundles[i].source_logits, dump.bundles[i].source_logits);
    EXPECT_EQ(back.bundles[i].label, dump.bundles[i].label);
  }
  std::filesystem::remove_all(dir);
}

TEST(Harness, FailingMethodMarksSeedsIncomplete) {
  const auto& art = tiny_artifacts();
  sesom::ExperimentConfig cfg = tiny_config();
  cfg.run.pseudo_pool = 1;
  const sesom::RunResult r =
      sesom::evaluate_methods(art, cfg, specs_for({"sesom", "pseudo_label"}));
  ASSERT_EQ(r.methods.size(), 2u);

  EXPECT_EQ(r.methods[0].n_complete, 2);
  EXPECT_EQ(r.methods[1].n_complete, 0);
  for (const sesom::SeedRecord& rec : r.methods[1].seeds) {
    EXPECT_FALSE(rec.completed);
    EXPECT_FALSE(rec.error.empty());
  }

  const auto rows = lines_of(sesom::results_csv(r));
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(split_csv_line(rows[3])[5], "0");
}

TEST(Harness, SweepCoversSourceAndShotAxes) {
  const auto& art = tiny_artifacts();
  const sesom::ExperimentConfig cfg = tiny_config();
  const sesom::RunResult r = sesom::run_sweep(art, cfg);
  std::vector<std::string> labels;
  for (const sesom::MethodRun& m : r.methods) {
    labels.push_back(m.label);
    EXPECT_EQ(m.n_complete, 2);
  }
  EXPECT_EQ(labels, (std::vector<std::string>{"sesom_top1", "sesom_top2", "sesom_k8",
                                              "sesom_k16", "sesom_k32"}));
}

TEST(Harness, RunExperimentEndToEnd) {
  sesom::ExperimentConfig cfg = tiny_config();
  cfg.run.n_seeds = 1;
  cfg.run.method = "uniform";
  const sesom::RunResult r = sesom::run_experiment(cfg);
  ASSERT_EQ(r.methods.size(), 1u);
  EXPECT_EQ(r.methods[0].label, "uniform");
  EXPECT_EQ(r.methods[0].n_complete, 1);
  EXPECT_GT(r.wall_seconds, 0.0);
}
