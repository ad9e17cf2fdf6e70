#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "dmilab/adapt/checkpoint.hpp"
#include "dmilab/errors.hpp"
#include "dmilab/experiment/runner.hpp"
#include "dmilab/experiment/spec.hpp"

using namespace dmilab;
namespace fs = std::filesystem;

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kRunFailed = 1;
constexpr int kBadConfig = 2;
constexpr int kBadFile = 3;

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string objective;
  std::string setting;
  std::size_t workers = 0;
  std::string out;
};

void add_overrides(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config file")->check(CLI::ExistingFile);
  cmd->add_option("--objective", c.objective, "Override adapt.objective")
      ->check(CLI::IsMember({"dmi", "mi", "kl"}));
  cmd->add_option("--setting", c.setting, "Override scenario.setting")
      ->check(CLI::IsMember({"closed", "partial", "open"}));
}

ExperimentSpec load(const Common& c) {
  ExperimentSpec spec;
  spec.base = canonical_pipeline();
  if (!c.config.empty()) spec = load_spec(c.config);
  if (!c.objective.empty()) set_field(spec.base, "adapt.objective", c.objective);
  if (!c.setting.empty()) set_field(spec.base, "scenario.setting", c.setting);
  if (!c.out.empty()) spec.out = c.out;
  if (c.workers) spec.workers = c.workers;
  return spec;
}

/// Config of a single-stage verb: the base pipeline with the seed spread.
PipelineConfig stage_config(const Common& c) {
  auto spec = load(c);
  PipelineConfig cfg = spec.base;
  apply_run_seed(cfg, c.seed);
  cfg.validate();
  return cfg;
}

ClassifierParams single_model(const fs::path& path, const std::string& name) {
  auto ckpt = load_checkpoint(path);
  auto it = ckpt.models.find(name);
  if (it == ckpt.models.end()) {
    throw CorruptFileError(path.string() + ": no model named '" + name + "'");
  }
  return it->second;
}

double meta_double(const fs::path& path, const std::string& key) {
  auto ckpt = load_checkpoint(path);
  auto it = ckpt.meta.find(key);
  return it == ckpt.meta.end() ? 0.0 : std::stod(it->second);
}

void report(const ExperimentResult& r) {
  std::size_t failed = 0;
  for (const auto& o : r.runs) {
    if (o.ok) {
      std::printf("ok      %-40s final accuracy %.4f  (%.1fs)\n", o.run_id.c_str(), o.final_accuracy,
                  o.seconds);
    } else {
      ++failed;
      std::printf("FAILED  %-40s %s\n", o.run_id.c_str(), o.error.c_str());
    }
  }
  std::printf("%zu runs, %zu failed; results in %s\n", r.runs.size(), failed, r.dir.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dmilab: decomposed mutual information adaptation lab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(version()));

  Common c;
  std::string bundle_path, source_path, proxy_path, suite_name, summarize_dir;

  auto* generate_cmd = app.add_subcommand("generate", "Write a synthetic scenario bundle");
  add_overrides(generate_cmd, c);
  generate_cmd->add_option("--seed", c.seed, "Run seed");
  generate_cmd->add_option("--out", c.out, "Bundle file")->required();

  auto* pretrain_cmd = app.add_subcommand("pretrain", "Train the source model on a bundle");
  add_overrides(pretrain_cmd, c);
  pretrain_cmd->add_option("--seed", c.seed, "Run seed");
  pretrain_cmd->add_option("--bundle", bundle_path, "Scenario bundle")->required()->check(CLI::ExistingFile);
  pretrain_cmd->add_option("--out", c.out, "Checkpoint file")->required();

  auto* burnin_cmd = app.add_subcommand("burnin", "Fit the proxy model to caption pseudo-labels");
  add_overrides(burnin_cmd, c);
  burnin_cmd->add_option("--seed", c.seed, "Run seed");
  burnin_cmd->add_option("--bundle", bundle_path, "Scenario bundle")->required()->check(CLI::ExistingFile);
  burnin_cmd->add_option("--source", source_path, "Source checkpoint")->required()->check(CLI::ExistingFile);
  burnin_cmd->add_option("--out", c.out, "Checkpoint file")->required();

  auto* adapt_cmd = app.add_subcommand("adapt", "Run two-stage adaptation and write metrics");
  add_overrides(adapt_cmd, c);
  adapt_cmd->add_option("--seed", c.seed, "Run seed");
  adapt_cmd->add_option("--bundle", bundle_path, "Scenario bundle")->required()->check(CLI::ExistingFile);
  adapt_cmd->add_option("--source", source_path, "Source checkpoint")->required()->check(CLI::ExistingFile);
  adapt_cmd->add_option("--proxy", proxy_path, "Proxy checkpoint")->required()->check(CLI::ExistingFile);
  adapt_cmd->add_option("--out", c.out, "Output directory")->required();

  auto* run_cmd = app.add_subcommand("run", "Run every sweep cell and seed of a config");
  run_cmd->add_option("--config", c.config, "Experiment config file")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--objective", c.objective, "Override adapt.objective")
      ->check(CLI::IsMember({"dmi", "mi", "kl"}));
  run_cmd->add_option("--setting", c.setting, "Override scenario.setting")
      ->check(CLI::IsMember({"closed", "partial", "open"}));
  run_cmd->add_option("--workers", c.workers, "Concurrent runs");
  run_cmd->add_option("--out", c.out, "Output directory (overrides run.out)");

  auto* suite_cmd = app.add_subcommand("suite", "Run a canonical experiment suite");
  suite_cmd->add_option("name", suite_name, "batch | lambda | ablation | objectives | settings")
      ->required()
      ->check(CLI::IsMember(suite_names()));
  suite_cmd->add_option("--workers", c.workers, "Concurrent runs");
  suite_cmd->add_option("--out", c.out, "Output directory");
  suite_cmd->add_option("--objective", c.objective, "Override adapt.objective")
      ->check(CLI::IsMember({"dmi", "mi", "kl"}));
  suite_cmd->add_option("--setting", c.setting, "Override scenario.setting")
      ->check(CLI::IsMember({"closed", "partial", "open"}));
  bool print_config = false;
  suite_cmd->add_flag("--print-config", print_config, "Print the suite config and exit");

  auto* summarize_cmd = app.add_subcommand("summarize", "Aggregate per-run metrics into summary files");
  summarize_cmd->add_option("dir", summarize_dir, "Experiment directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*generate_cmd) {
      const auto cfg = stage_config(c);
      const auto bundle = generate(cfg.scenario);
      save_bundle(bundle, c.out);
      std::printf("wrote %s: %zu source, %zu target samples, %zu classes\n", c.out.c_str(),
                  bundle.source.size(), bundle.target.size(), bundle.K());
    } else if (*pretrain_cmd) {
      const auto cfg = stage_config(c);
      const auto bundle = load_bundle(bundle_path);
      const auto trained = pretrain_source(bundle, cfg.model, cfg.pretrain);
      Checkpoint ckpt;
      ckpt.models["source"] = trained.params;
      ckpt.meta["train_accuracy"] = std::to_string(trained.train_accuracy);
      save_checkpoint(ckpt, c.out);
      std::printf("source: train accuracy %.4f, target accuracy %.4f\n", trained.train_accuracy,
                  evaluate(trained.params, bundle.target).accuracy);
    } else if (*burnin_cmd) {
      const auto cfg = stage_config(c);
      const auto bundle = load_bundle(bundle_path);
      const auto source = single_model(source_path, "source");
      const auto teachers = make_teachers(bundle, cfg.teachers);
      const auto labels =
          caption_pseudo_labels(bundle, teachers.caption, derive_seed(cfg.teachers.seed, "captions"));
      const auto proxy = burn_in_proxy(bundle, labels, source, cfg.burn_in);
      Checkpoint ckpt;
      ckpt.models["proxy"] = proxy.params;
      ckpt.meta["train_accuracy"] = std::to_string(proxy.train_accuracy);
      save_checkpoint(ckpt, c.out);
      std::printf("proxy: pseudo-label fit %.4f, target accuracy %.4f\n", proxy.train_accuracy,
                  evaluate(proxy.params, bundle.target).accuracy);
    } else if (*adapt_cmd) {
      const auto cfg = stage_config(c);
      Prepared prep;
      prep.bundle = load_bundle(bundle_path);
      prep.source.params = single_model(source_path, "source");
      prep.source.train_accuracy = meta_double(source_path, "train_accuracy");
      prep.proxy.params = single_model(proxy_path, "proxy");
      prep.proxy.train_accuracy = meta_double(proxy_path, "train_accuracy");
      prep.teachers = make_teachers(prep.bundle, cfg.teachers);
      prep.pseudo_labels = caption_pseudo_labels(prep.bundle, prep.teachers.caption,
                                                 derive_seed(cfg.teachers.seed, "captions"));
      prep.caption_accuracy =
          evaluate(prep.pseudo_labels, prep.bundle.target.labels, prep.bundle.K()).accuracy;
      prep.source_accuracy = evaluate(prep.source.params, prep.bundle.target).accuracy;

      RunPlan plan;
      plan.run_id = "base/seed" + std::to_string(c.seed);
      plan.seed = c.seed;
      plan.config = cfg;
      fs::create_directories(c.out);
      MetricsWriter metrics(fs::path(c.out) / "metrics.csv", plan.run_id, plan.seed, "base");
      const auto result = execute_run(plan, prep, metrics);
      Checkpoint ckpt;
      ckpt.models["target"] = result.state.target;
      ckpt.models["proxy"] = result.state.proxy;
      ckpt.prompt = result.state.prototype.prompt;
      save_checkpoint(ckpt, fs::path(c.out) / "adapted.ckpt");
      std::printf("accuracy %.4f -> %.4f over %zu epochs\n", result.report.initial_accuracy,
                  result.report.final_accuracy, cfg.adapt.epochs);
    } else if (*run_cmd) {
      const auto result = run_experiment(load(c));
      report(result);
      return result.all_ok() ? kOk : kRunFailed;
    } else if (*suite_cmd) {
      auto spec = suite_by_name(suite_name);
      if (!c.objective.empty()) set_field(spec.base, "adapt.objective", c.objective);
      if (!c.setting.empty()) set_field(spec.base, "scenario.setting", c.setting);
      if (!c.out.empty()) spec.out = c.out;
      if (c.workers) spec.workers = c.workers;
      if (print_config) {
        std::cout << format_spec(spec);
        return kOk;
      }
      const auto result = run_experiment(spec);
      report(result);
      return result.all_ok() ? kOk : kRunFailed;
    } else if (*summarize_cmd) {
      const auto rows = emit_summary(summarize_dir);
      std::printf("%zu summary rows written to %s\n", rows.size(),
                  (fs::path(summarize_dir) / "summary.csv").string().c_str());
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const FormatError& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kBadFile;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRunFailed;
  }
  return kOk;
}
