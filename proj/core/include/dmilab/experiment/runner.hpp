#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "dmilab/adapt/coma.hpp"
#include "dmilab/adapt/training.hpp"
#include "dmilab/experiment/spec.hpp"

namespace dmilab {

const char* version();

/// Column list of every per-run metrics.csv.
inline constexpr const char* kMetricsHeader = "run_id,seed,sweep,epoch,metric,value";
/// Column list of summary.csv.
inline constexpr const char* kSummaryHeader = "sweep,metric,n,missing,mean,std,extrapolation";

/// Append-only writer for one metrics.csv. Rows of an epoch reach the file
/// when end_epoch() is called.
class MetricsWriter {
 public:
  MetricsWriter(const std::filesystem::path& path, std::string run_id, std::uint64_t seed,
                std::string sweep);

  void add(std::size_t epoch, const std::string& metric, double value);
  void end_epoch();

 private:
  std::ofstream out_;
  std::string prefix_;
};

/// Everything shared by runs that differ only in their adaptation settings.
struct Prepared {
  ScenarioBundle bundle;
  TrainResult source;
  Teachers teachers;
  std::vector<std::size_t> pseudo_labels;
  TrainResult proxy;
  double source_accuracy = 0.0;   // theta_s on the target set
  double caption_accuracy = 0.0;  // pseudo-labels against ground truth
};

/// Scenario, pretraining, teachers and burn-in for one resolved config.
Prepared prepare(const PipelineConfig& cfg);

struct RunPlan {
  std::string run_id;  // "<cell label>/seed<seed>"
  SweepCell cell;
  std::uint64_t seed = 0;
  PipelineConfig config;
  std::filesystem::path dir;  // relative to the experiment directory
  bool extrapolation = false;
};

/// One plan per (cell, seed), cells outermost, in sweep order.
std::vector<RunPlan> plan_runs(const ExperimentSpec& spec);

/// Adapts one planned run and streams its metrics. Epoch 0 holds the
/// pre-adaptation state; epoch e >= 1 holds adaptation epoch e.
AdaptResult execute_run(const RunPlan& plan, const Prepared& prep, MetricsWriter& metrics,
                        const EpochObserver& after_epoch = {});

struct RunOutcome {
  std::string run_id;
  std::string sweep;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double final_accuracy = 0.0;
  double seconds = 0.0;
};

struct RunOptions {
  /// Overrides spec.workers when nonzero.
  std::size_t workers = 0;
  /// Called in the worker thread after each epoch's metrics are flushed.
  /// An exception thrown here fails that run only.
  std::function<void(const RunPlan&, const EpochRecord&)> after_epoch;
};

struct ExperimentResult {
  std::filesystem::path dir;
  std::vector<RunOutcome> runs;  // plan order

  bool all_ok() const;
};

/// Runs the whole grid into spec.out and writes config.ini, manifest.json,
/// runs/*/metrics.csv, summary.csv, summary.json and timing.json. Failed runs
/// are recorded in the manifest and the remaining runs proceed.
ExperimentResult run_experiment(const ExperimentSpec& spec, const RunOptions& options = {});

// --- aggregation -----------------------------------------------------------------

/// Across-seed statistics of each metric's last value per run.
struct SummaryRow {
  std::string sweep;
  std::string metric;
  std::size_t n = 0;
  std::size_t missing = 0;
  double mean = 0.0;  // NaN when n == 0
  double std = 0.0;   // sample std; 0 when n == 1
  bool extrapolation = false;

  friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

/// Reads every runs/*/metrics.csv below `dir`. With a manifest.json present,
/// its run list fixes the row order and failed runs count as missing.
/// Files that break the schema raise FormatError listing every offender.
std::vector<SummaryRow> summarize(const std::filesystem::path& dir);

/// summarize() written to summary.csv and summary.json inside `dir`.
std::vector<SummaryRow> emit_summary(const std::filesystem::path& dir);

/// Value of one metric in a summary, or nullptr.
const SummaryRow* find_row(const std::vector<SummaryRow>& rows, const std::string& sweep,
                           const std::string& metric);

}  // namespace dmilab
