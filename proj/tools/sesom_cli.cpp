#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <system_error>
#include <vector>

#include "CLI11.hpp"
#include "sesom/harness.hpp"

namespace {

struct CliOptions {
  std::string config_path;
  std::string out_dir;
  std::string method;
  std::int64_t sources = -1;
  std::int64_t shots = -1;
  std::int64_t seed_offset = -1;
  bool no_source_adapt = false;
};

void add_common(CLI::App* sub, CliOptions& opt) {
  sub->add_option("--config", opt.config_path, "TOML configuration file");
  sub->add_option("--out", opt.out_dir, "output directory");
  sub->add_option("--method", opt.method, "evaluation method");
  sub->add_option("--sources", opt.sources, "keep only the top-k sources by dev F1");
  sub->add_option("--shots", opt.shots, "episode shots per class");
  sub->add_option("--seed-offset", opt.seed_offset, "first seed of the run");
  sub->add_flag("--no-source-adapt", opt.no_source_adapt,
                "skip few-shot adaptation of source prompts");
}

sesom::ExperimentConfig effective_config(const CliOptions& opt) {
  sesom::ExperimentConfig cfg;
  if (!opt.config_path.empty()) cfg = sesom::load_config(opt.config_path);
  if (!opt.out_dir.empty()) cfg.run.out_dir = opt.out_dir;
  if (!opt.method.empty()) cfg.run.method = opt.method;
  if (opt.sources >= 0) cfg.run.top_sources = static_cast<int>(opt.sources);
  if (opt.shots >= 0) cfg.run.shots = static_cast<int>(opt.shots);
  if (opt.seed_offset >= 0) cfg.run.seed_offset = static_cast<std::uint64_t>(opt.seed_offset);
  if (opt.no_source_adapt) cfg.adapt.enabled = false;
  sesom::validate_config(cfg);
  return cfg;
}

// Every command leaves a snapshot of the exact configuration it ran with;
// rerunning against the snapshot reproduces the outputs byte for byte.
std::filesystem::path prepare_out(const sesom::ExperimentConfig& cfg) {
  std::filesystem::path out(cfg.run.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw sesom::IoError("cannot create output directory: " + out.string());
  sesom::save_config(cfg, (out / "config.snapshot.toml").string());
  return out;
}

sesom::BackboneParams backbone_for(const sesom::ExperimentConfig& cfg) {
  if (!cfg.backbone.checkpoint.empty()) return sesom::load_backbone(cfg.backbone.checkpoint);
  return sesom::pretrain_backbone_from(cfg);
}

void print_summary(const sesom::RunResult& r) {
  for (const sesom::MethodRun& m : r.methods)
    std::printf("%s %s accuracy %.2f +/- %.2f f1 %.2f +/- %.2f seeds %d/%zu\n",
                m.label.c_str(), r.task.c_str(), 100.0 * m.mean_acc,
                100.0 * m.stderr_acc, 100.0 * m.mean_f1, 100.0 * m.stderr_f1,
                m.n_complete, m.seeds.size());
  std::printf("wall %.1fs\n", r.wall_seconds);
}

void write_results(const sesom::RunResult& r, const std::filesystem::path& out) {
  const auto path = out / "results.csv";
  sesom::write_text_file(path.string(), sesom::results_csv(r));
  std::printf("wrote %s\n", path.string().c_str());
}

void write_weights(const sesom::RunResult& r, const std::filesystem::path& out) {
  const auto path = out / "weights.csv";
  sesom::write_text_file(path.string(), sesom::weights_csv(r));
  std::printf("wrote %s\n", path.string().c_str());
}

int cmd_pretrain_backbone(const sesom::ExperimentConfig& cfg) {
  const auto out = prepare_out(cfg);
  const sesom::BackboneParams backbone = sesom::pretrain_backbone_from(cfg);
  const auto path = out / "backbone.bin";
  sesom::save_backbone(backbone, path);
  std::printf("wrote %s\n", path.string().c_str());
  return 0;
}

int cmd_train_sources(const sesom::ExperimentConfig& cfg) {
  const auto out = prepare_out(cfg);
  const sesom::BackboneParams backbone = backbone_for(cfg);
  const std::vector<sesom::SoftPrompt> prompts = sesom::train_sources_from(cfg, backbone);
  for (std::size_t j = 0; j < prompts.size(); ++j) {
    const auto path = out / sesom::source_prompt_filename(static_cast<int>(j));
    sesom::save_prompt(prompts[j], path);
    std::printf("wrote %s\n", path.string().c_str());
  }
  return 0;
}

int cmd_run(const sesom::ExperimentConfig& cfg) {
  const auto out = prepare_out(cfg);
  const sesom::SuiteArtifacts art = sesom::prepare_artifacts(cfg);
  const sesom::RunResult r = sesom::evaluate_methods(
      art, cfg, {{cfg.run.method, cfg.run.method, cfg.run.top_sources}});
  print_summary(r);
  write_results(r, out);
  if (r.methods[0].has_weights) write_weights(r, out);
  return 0;
}

int cmd_sweep(const sesom::ExperimentConfig& cfg) {
  const auto out = prepare_out(cfg);
  const sesom::SuiteArtifacts art = sesom::prepare_artifacts(cfg);
  const sesom::RunResult r = sesom::run_sweep(art, cfg);
  print_summary(r);
  write_results(r, out);
  return 0;
}

int cmd_analyze_attention(const sesom::ExperimentConfig& cfg) {
  const auto out = prepare_out(cfg);
  const sesom::SuiteArtifacts art = sesom::prepare_artifacts(cfg);
  const sesom::RunResult r = sesom::evaluate_methods(
      art, cfg, {{cfg.run.method, cfg.run.method, cfg.run.top_sources}});
  print_summary(r);
  write_results(r, out);
  write_weights(r, out);
  return 0;
}

int cmd_case_study(const sesom::ExperimentConfig& cfg) {
  const auto out = prepare_out(cfg);
  const sesom::SuiteArtifacts art = sesom::prepare_artifacts(cfg);
  const std::vector<sesom::CaseRecord> records = sesom::case_study_export(art, cfg, {});
  const auto path = out / "case_study.jsonl";
  sesom::write_text_file(path.string(), sesom::case_study_jsonl(records));
  std::printf("wrote %s (%zu samples)\n", path.string().c_str(), records.size());
  return 0;
}

int cmd_dump_logits(const sesom::ExperimentConfig& cfg) {
  const auto out = prepare_out(cfg);
  const sesom::SuiteArtifacts art = sesom::prepare_artifacts(cfg);
  const auto [dump, manifest] = sesom::make_logit_dump(art, cfg);
  const auto bin_path = out / "logits.bin";
  const auto manifest_path = out / "logits.manifest.json";
  sesom::save_logit_dump(dump, bin_path.string());
  sesom::save_dump_manifest(manifest, manifest_path.string());
  std::printf("wrote %s (%zu records)\n", bin_path.string().c_str(), dump.bundles.size());
  std::printf("wrote %s\n", manifest_path.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sample-specific ensembling of soft-prompted source models"};
  app.require_subcommand(1);
  CliOptions opt;

  CLI::App* pretrain = app.add_subcommand("pretrain-backbone", "train and save the frozen backbone");
  CLI::App* train = app.add_subcommand("train-sources", "train and save one prompt per source task");
  CLI::App* run = app.add_subcommand("run", "evaluate one method over seeds");
  CLI::App* sweep = app.add_subcommand("sweep", "source-count and shot sweeps");
  CLI::App* attention = app.add_subcommand("analyze-attention", "attention weight report");
  CLI::App* cases = app.add_subcommand("case-study", "export per-sample ensemble decisions");
  CLI::App* dump = app.add_subcommand("dump-logits", "export test-split bundles");
  for (CLI::App* sub : {pretrain, train, run, sweep, attention, cases, dump})
    add_common(sub, opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    const sesom::ExperimentConfig cfg = effective_config(opt);
    if (app.got_subcommand(pretrain)) return cmd_pretrain_backbone(cfg);
    if (app.got_subcommand(train)) return cmd_train_sources(cfg);
    if (app.got_subcommand(run)) return cmd_run(cfg);
    if (app.got_subcommand(sweep)) return cmd_sweep(cfg);
    if (app.got_subcommand(attention)) return cmd_analyze_attention(cfg);
    if (app.got_subcommand(cases)) return cmd_case_study(cfg);
    if (app.got_subcommand(dump)) return cmd_dump_logits(cfg);
    return 2;
  } catch (const sesom::ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const sesom::LookupError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const sesom::InvalidMapError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const sesom::DimensionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const sesom::IndexError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const sesom::DegenerateInputError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const sesom::NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const sesom::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
