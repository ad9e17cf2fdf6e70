#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dmilab/adapt/coma.hpp"
#include "dmilab/adapt/training.hpp"
#include "dmilab/synthdata/scenario.hpp"

namespace dmilab {

/// Every knob of one scenario -> pretrain -> burn-in -> adapt pipeline.
/// Per-stage seeds are not part of it; they come from the run seed.
struct PipelineConfig {
  ScenarioConfig scenario;
  ModelConfig model;
  TeacherConfig teachers;
  TrainConfig pretrain;
  TrainConfig burn_in;
  AdaptConfig adapt;

  void validate() const;
};

/// Canonical defaults used by every suite.
PipelineConfig canonical_pipeline();

/// Stage seeds of one run, derived from the run seed by name.
std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view stage);
/// Fills every per-stage seed field of `cfg` from `run_seed`.
void apply_run_seed(PipelineConfig& cfg, std::uint64_t run_seed);

/// "mc+cd+ags+sim" style term lists. Order-insensitive; the empty list is "none".
LossSwitches parse_terms(const std::string& s);
std::string to_string(const LossSwitches& use);

/// One sweep dimension. `key` is "section.field" after alias expansion.
struct SweepAxis {
  std::string key;
  std::vector<std::string> values;

  friend bool operator==(const SweepAxis&, const SweepAxis&) = default;
};

/// One point of the sweep grid: a (key, value) override per axis.
struct SweepCell {
  std::vector<std::pair<std::string, std::string>> overrides;

  /// "batch_size=8;objective=mi", or "base" with no axes. Keys are printed
  /// without their section.
  std::string label() const;
};

struct ExperimentSpec {
  std::string name = "experiment";
  PipelineConfig base;
  std::vector<SweepAxis> sweep;  // cartesian product, first axis outermost
  std::vector<std::uint64_t> seeds{0};
  std::size_t workers = 1;
  std::filesystem::path out = "out";

  /// Throws ConfigError naming the field. Also resolves every cell.
  void validate() const;
  std::vector<SweepCell> cells() const;
  /// Base config with the cell overrides applied and the run seed spread.
  PipelineConfig resolve(const SweepCell& cell, std::uint64_t seed) const;
};

/// Reads the key-value config grammar (see README). Unknown sections or keys
/// and malformed values raise ConfigError with "section.key: reason".
ExperimentSpec parse_spec(std::istream& in);
ExperimentSpec load_spec(const std::filesystem::path& path);
/// Inverse of parse_spec: every field written out, defaults included.
std::string format_spec(const ExperimentSpec& spec);

/// One "section.key=value" line per field, in a fixed order. Seeds excluded.
std::string describe(const PipelineConfig& cfg);
/// Sets one "section.key" field of `cfg` from text.
void set_field(PipelineConfig& cfg, const std::string& key, const std::string& value);
/// Expands a sweep shorthand ("batch_size", "lambda", "terms", "objective",
/// "setting") to its "section.key" form; full keys pass through.
std::string sweep_key(const std::string& name);

/// Lambda values outside the studied [0.2, 2.0] grid.
bool lambda_is_extrapolation(double lambda);

// --- canonical suites --------------------------------------------------------------

ExperimentSpec suite_batch_sensitivity();
ExperimentSpec suite_lambda();
ExperimentSpec suite_ablation();
ExperimentSpec suite_objectives();
ExperimentSpec suite_settings();

std::vector<std::string> suite_names();
/// Throws ConfigError for an unknown name.
ExperimentSpec suite_by_name(const std::string& name);

}  // namespace dmilab
