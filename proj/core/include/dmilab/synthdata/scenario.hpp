#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dmilab/tensor_grad/tensor.hpp"

namespace dmilab {

enum class Setting { closed, partial, open };

std::string to_string(Setting s);
/// Accepts "closed", "partial", "open".
Setting parse_setting(const std::string& s);

struct ShiftSpec {
  double angle_deg = 90.0;   // rotation in a random 2-plane of the latent space
  double translation = 4.0;  // length of a random translation vector
  double source_noise = 1.0;
  double target_noise = 1.5;

  friend bool operator==(const ShiftSpec&, const ShiftSpec&) = default;
};

struct ScenarioConfig {
  std::size_t K = 26;
  std::size_t dim_global = 8;
  std::size_t dim_local = 8;
  std::size_t source_per_class = 40;
  std::size_t target_per_class = 30;
  /// Ratio between the largest and smallest target class count (1 = balanced).
  /// Counts decay geometrically over a random class order.
  double target_imbalance = 1.0;
  /// Class means are drawn on spheres of this radius in each block.
  double radius_global = 5.0;
  double radius_local = 5.0;
  /// Minimum pairwise distance between class means within a block.
  double min_separation = 2.0;
  ShiftSpec shift;
  Setting setting = Setting::closed;
  /// partial: number of classes present in the target.
  std::size_t partial_size = 0;
  /// open: number of unknown target classes, labelled K, K+1, ...
  std::size_t open_extra = 0;
  std::uint64_t seed = 0;

  std::size_t dim() const { return dim_global + dim_local; }
  /// Throws ConfigError naming the offending field.
  void validate() const;

  friend bool operator==(const ScenarioConfig&, const ScenarioConfig&) = default;
};

struct LabeledSet {
  Tensor features;                  // n x dim
  std::vector<std::size_t> labels;  // target labels >= K are unknown classes

  std::size_t size() const { return labels.size(); }
  friend bool operator==(const LabeledSet&, const LabeledSet&) = default;
};

/// Everything one adaptation run needs. Target labels are ground truth kept
/// for evaluation only.
struct ScenarioBundle {
  ScenarioConfig config;
  LabeledSet source;
  LabeledSet target;
  /// Teacher inputs: the global and local blocks of each target sample's
  /// latent before the domain shift is applied.
  Tensor target_global;
  Tensor target_local;
  /// (K + open_extra) x dim latent class means; unknown classes last.
  Tensor class_means;
  /// Classes 0..K-1 that occur in the target, sorted.
  std::vector<std::size_t> target_classes;

  std::size_t K() const { return config.K; }
  /// Rows 0..K-1 of class_means restricted to one block.
  Tensor global_means() const;
  Tensor local_means() const;

  friend bool operator==(const ScenarioBundle&, const ScenarioBundle&) = default;
};

ScenarioBundle generate(const ScenarioConfig& config);

void save_bundle(const ScenarioBundle& bundle, const std::filesystem::path& path);
ScenarioBundle load_bundle(const std::filesystem::path& path);

}  // namespace dmilab
