#include "dmilab/experiment/runner.hpp"

#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "dmilab/errors.hpp"
#include "dmilab/io/container.hpp"
#include "json.hpp"

#ifndef DMILAB_VERSION
#define DMILAB_VERSION "unknown"
#endif

namespace dmilab {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

const char* version() { return DMILAB_VERSION; }

namespace {

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string dir_name(const SweepCell& cell, std::uint64_t seed) {
  std::string s = cell.label();
  for (char& c : s) {
    if (c == '=') {
      c = '-';
    } else if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '-' && c != '+') {
      c = '_';
    }
  }
  return s + "__seed" + std::to_string(seed);
}

std::string prep_key(const PipelineConfig& cfg) {
  std::istringstream lines(describe(cfg));
  std::string key, line;
  while (std::getline(lines, line)) {
    if (line.rfind("adapt.", 0) != 0) key += line + "\n";
  }
  key += std::to_string(cfg.scenario.seed) + "," + std::to_string(cfg.teachers.seed) + "," +
         std::to_string(cfg.pretrain.seed) + "," + std::to_string(cfg.burn_in.seed);
  return key;
}

ojson manifest_json(const ExperimentSpec& spec, const std::vector<RunPlan>& plans,
                    const std::vector<RunOutcome>* outcomes) {
  ojson m;
  m["tool"] = "dmilab";
  m["version"] = version();
  m["container_version"] = kContainerVersion;
  m["name"] = spec.name;
  m["config"] = format_spec(spec);
  m["metrics_columns"] = kMetricsHeader;
  m["summary_columns"] = kSummaryHeader;
  ojson axes = ojson::array();
  for (const auto& a : spec.sweep) axes.push_back({{"key", a.key}, {"values", a.values}});
  m["sweep"] = axes;
  ojson runs = ojson::array();
  for (std::size_t i = 0; i < plans.size(); ++i) {
    const auto& p = plans[i];
    ojson r;
    r["run_id"] = p.run_id;
    r["sweep"] = p.cell.label();
    r["seed"] = p.seed;
    r["dir"] = p.dir.generic_string();
    r["extrapolation"] = p.extrapolation;
    r["stage_seeds"] = {{"scenario", p.config.scenario.seed},
                        {"teachers", p.config.teachers.seed},
                        {"pretrain", p.config.pretrain.seed},
                        {"burn_in", p.config.burn_in.seed},
                        {"adapt", p.config.adapt.seed}};
    if (outcomes) {
      const auto& o = (*outcomes)[i];
      r["status"] = o.ok ? "ok" : "failed";
      if (!o.ok) r["error"] = o.error;
    } else {
      r["status"] = "pending";
    }
    runs.push_back(std::move(r));
  }
  m["runs"] = runs;
  return m;
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

}  // namespace

// --- metrics --------------------------------------------------------------------------

MetricsWriter::MetricsWriter(const fs::path& path, std::string run_id, std::uint64_t seed,
                             std::string sweep)
    : out_(path, std::ios::binary | std::ios::trunc),
      prefix_(run_id + "," + std::to_string(seed) + "," + sweep + ",") {
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out_ << kMetricsHeader << '\n';
  out_.flush();
}

void MetricsWriter::add(std::size_t epoch, const std::string& metric, double value) {
  out_ << prefix_ << epoch << ',' << metric << ',' << format_value(value) << '\n';
}

void MetricsWriter::end_epoch() {
  out_.flush();
  if (!out_) throw std::runtime_error("failed writing metrics");
}

// --- one run --------------------------------------------------------------------------

Prepared prepare(const PipelineConfig& cfg) {
  cfg.validate();
  Prepared p;
  p.bundle = generate(cfg.scenario);
  p.source = pretrain_source(p.bundle, cfg.model, cfg.pretrain);
  p.source_accuracy = evaluate(p.source.params, p.bundle.target).accuracy;
  p.teachers = make_teachers(p.bundle, cfg.teachers);
  p.pseudo_labels =
      caption_pseudo_labels(p.bundle, p.teachers.caption, derive_seed(cfg.teachers.seed, "captions"));
  p.caption_accuracy = evaluate(p.pseudo_labels, p.bundle.target.labels, p.bundle.K()).accuracy;
  p.proxy = burn_in_proxy(p.bundle, p.pseudo_labels, p.source.params, cfg.burn_in);
  return p;
}

std::vector<RunPlan> plan_runs(const ExperimentSpec& spec) {
  std::vector<RunPlan> out;
  for (const auto& cell : spec.cells()) {
    for (std::uint64_t seed : spec.seeds) {
      RunPlan p;
      p.run_id = cell.label() + "/seed" + std::to_string(seed);
      p.cell = cell;
      p.seed = seed;
      p.config = spec.resolve(cell, seed);
      p.dir = fs::path("runs") / dir_name(cell, seed);
      p.extrapolation = lambda_is_extrapolation(p.config.adapt.dmi.lambda);
      out.push_back(std::move(p));
    }
  }
  return out;
}

AdaptResult execute_run(const RunPlan& plan, const Prepared& prep, MetricsWriter& metrics,
                        const EpochObserver& after_epoch) {
  const auto& cfg = plan.config;
  const TargetSplit split = split_target(prep.bundle.target.size(), cfg.adapt);
  LabeledSet eval_set;
  eval_set.features = gather_rows(prep.bundle.target.features, split.eval);
  for (std::size_t i : split.eval) eval_set.labels.push_back(prep.bundle.target.labels[i]);

  const double initial = evaluate(prep.source.params, eval_set).accuracy;
  metrics.add(0, "target_accuracy", initial);
  metrics.add(0, "source_accuracy", initial);
  metrics.add(0, "proxy_accuracy", evaluate(prep.proxy.params, eval_set).accuracy);
  metrics.add(0, "caption_accuracy", prep.caption_accuracy);
  metrics.add(0, "pretrain_fit", prep.source.train_accuracy);
  metrics.add(0, "burn_in_fit", prep.proxy.train_accuracy);
  metrics.end_epoch();

  auto on_epoch = [&](const EpochRecord& r) {
    const std::size_t e = r.epoch + 1;
    metrics.add(e, "target_accuracy", r.target_accuracy);
    metrics.add(e, "proxy_accuracy", r.proxy_accuracy);
    metrics.add(e, "prototype_accuracy", r.prototype_accuracy);
    metrics.add(e, "l_mc", r.l_mc);
    metrics.add(e, "l_cd", r.l_cd);
    metrics.add(e, "l_tca", r.l_tca);
    metrics.add(e, "l_ags", r.l_ags);
    metrics.add(e, "l_sim", r.l_sim);
    metrics.add(e, "l_mda", r.l_mda);
    metrics.add(e, "agreement_rate", r.agreement_rate);
    metrics.add(e, "mean_s_size", r.mean_s_size);
    metrics.add(e, "skipped_tca", double(r.skipped_tca));
    metrics.add(e, "skipped_mda", double(r.skipped_mda));
    metrics.add(e, "degenerate_terms", double(r.degenerate_terms));
    metrics.end_epoch();
    if (after_epoch) after_epoch(r);
  };
  AdaptResult result = adapt(prep.bundle, prep.source.params, prep.proxy.params,
                             prep.teachers.prototype, cfg.adapt, {}, on_epoch);

  const Evaluation ev = evaluate(result.state.target, eval_set);
  const std::size_t E = cfg.adapt.epochs;
  metrics.add(E, "mean_class_accuracy", ev.mean_class_accuracy);
  metrics.add(E, "n_known", double(ev.n_known));
  metrics.add(E, "n_unknown", double(ev.n_unknown));
  metrics.end_epoch();
  return result;
}

// --- the grid -------------------------------------------------------------------------

bool ExperimentResult::all_ok() const {
  for (const auto& r : runs) {
    if (!r.ok) return false;
  }
  return true;
}

ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& options) {
  spec.validate();
  const auto started = std::chrono::steady_clock::now();
  const auto plans = plan_runs(spec);
  ExperimentResult result;
  result.dir = spec.out;
  fs::create_directories(spec.out / "runs");
  write_text(spec.out / "config.ini", format_spec(spec));
  write_text(spec.out / "manifest.json", manifest_json(spec, plans, nullptr).dump(2) + "\n");

  using PrepFuture = std::shared_future<std::shared_ptr<const Prepared>>;
  std::mutex cache_mutex;
  std::map<std::string, PrepFuture> cache;
  auto prepared_for = [&](const PipelineConfig& cfg) {
    std::promise<std::shared_ptr<const Prepared>> promise;
    PrepFuture future;
    bool owner = false;
    {
      std::lock_guard lock(cache_mutex);
      auto [it, inserted] = cache.try_emplace(prep_key(cfg));
      if (inserted) {
        it->second = promise.get_future().share();
        owner = true;
      }
      future = it->second;
    }
    if (owner) {
      try {
        promise.set_value(std::make_shared<const Prepared>(prepare(cfg)));
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return future.get();
  };

  result.runs.resize(plans.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < plans.size(); i = next++) {
      const RunPlan& plan = plans[i];
      RunOutcome& o = result.runs[i];
      o.run_id = plan.run_id;
      o.sweep = plan.cell.label();
      o.seed = plan.seed;
      const auto t0 = std::chrono::steady_clock::now();
      try {
        const auto prep = prepared_for(plan.config);
        fs::create_directories(spec.out / plan.dir);
        MetricsWriter metrics(spec.out / plan.dir / "metrics.csv", plan.run_id, plan.seed,
                              plan.cell.label());
        EpochObserver hook;
        if (options.after_epoch) {
          hook = [&](const EpochRecord& r) { options.after_epoch(plan, r); };
        }
        o.final_accuracy = execute_run(plan, *prep, metrics, hook).report.final_accuracy;
        o.ok = true;
      } catch (const std::exception& e) {
        o.ok = false;
        o.error = e.what();
      }
      o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  };
  const std::size_t width =
      std::max<std::size_t>(1, std::min(options.workers ? options.workers : spec.workers, plans.size()));
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < width; ++w) pool.emplace_back(worker);
  }

  write_text(spec.out / "manifest.json", manifest_json(spec, plans, &result.runs).dump(2) + "\n");
  emit_summary(spec.out);

  ojson timing;
  timing["workers"] = width;
  timing["total_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  ojson runs = ojson::array();
  for (const auto& o : result.runs) runs.push_back({{"run_id", o.run_id}, {"seconds", o.seconds}});
  timing["runs"] = runs;
  write_text(spec.out / "timing.json", timing.dump(2) + "\n");
  return result;
}

}  // namespace dmilab
