#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "dmilab/prob_info/prob_info.hpp"
#include "dmilab/tensor_grad/graph.hpp"

namespace dmilab {

/// A non-empty subset S of {0..K-1} together with its complement.
class ClassSubset {
 public:
  /// Members are sorted and deduplicated. Throws ConfigError if empty or out
  /// of range.
  ClassSubset(std::size_t K, std::vector<std::size_t> members);

  static ClassSubset full(std::size_t K);

  std::size_t K() const { return K_; }
  const std::vector<std::size_t>& members() const { return members_; }
  const std::vector<std::size_t>& complement() const { return complement_; }
  std::size_t size() const { return members_.size(); }
  std::size_t complement_size() const { return complement_.size(); }
  bool contains(std::size_t k) const;

  friend bool operator==(const ClassSubset&, const ClassSubset&) = default;

 private:
  std::size_t K_;
  std::vector<std::size_t> members_;
  std::vector<std::size_t> complement_;
};

struct DmiConfig {
  /// Suppression strength; 1 is the unscaled definition.
  double lambda = 0.5;
  /// Smallest region size for which a region term is defined.
  static constexpr std::size_t kMinRegionSize = 2;
  double clamp_floor = kLogFloor;
  /// Rows whose max probability is below this do not contribute to the
  /// candidate subset. 0 disables the filter.
  double confidence_threshold = 0.0;

  void validate() const;
};

/// Components of one decomposed-MI evaluation.
///
/// When not skipped, value == enhancement - scale * suppression. `scale` is
/// lambda * log|S| / log|S^c|, or 0 when |S^c| <= 1. A subset with |S| <= 1
/// marks the evaluation as skipped and every number is 0.
struct DmiBreakdown {
  double value = 0.0;
  double enhancement = 0.0;
  double suppression = 0.0;
  double scale = 0.0;
  std::size_t s_size = 0;
  std::size_t sc_size = 0;
  bool skipped = false;
  std::string skip_reason;
};

enum class Region { confident, uncertain };

struct RestrictedJoint {
  /// Renormalised sub-block; empty when the region carries no mass.
  std::optional<JointDistribution> block;
  double mass = 0.0;
};

/// S = argmax rows of x union argmax rows of y.
ClassSubset candidate_subset(const Tensor& x, const Tensor& y, double confidence_threshold = 0.0);
inline ClassSubset candidate_subset(const ProbMatrix& x, const ProbMatrix& y,
                                    double confidence_threshold = 0.0) {
  return candidate_subset(x.tensor(), y.tensor(), confidence_threshold);
}

/// Mass below 1e-12 reports the region as empty. Throws ConfigError if the
/// requested region has no classes.
RestrictedJoint restrict_joint(const JointDistribution& p, const ClassSubset& s, Region which);

DmiBreakdown dmi(const JointDistribution& p, const ClassSubset& s, const DmiConfig& cfg);

struct BoundCheck {
  bool pass = false;
  /// Distance to the nearest bound; negative when violated.
  double margin = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

/// -lambda log|S| <= value <= log|S|, with 1e-9 slack.
BoundCheck bound_check(const DmiBreakdown& b, const DmiConfig& cfg);

// --- differentiable ---------------------------------------------------------

struct DmiTerm {
  Var value;  // invalid when breakdown.skipped
  DmiBreakdown breakdown;
};

DmiTerm dmi(Var p, const ClassSubset& s, const DmiConfig& cfg);

DmiTerm dmi_from_predictions(Var x, Var y, const ClassSubset& s, const DmiConfig& cfg,
                             bool symmetrize = true);

/// Sum over conditioning classes k of w_k * I_D(P^(k)) with a single,
/// batch-level S. The breakdown holds the w-weighted components.
DmiTerm conditional_dmi(Var x, Var y, Var z, const ClassSubset& s, const DmiConfig& cfg,
                        bool symmetrize = true);

/// Information maximisation of one prediction matrix restricted to S, minus
/// the scaled same quantity on S^c. For a region R:
///   IM_R = H(mean_i q_i) - mean_i H(q_i),  q_i = t_i|R / sum(t_i|R)
/// Rows with region mass below 1e-9 are excluded from that region.
DmiTerm selective_im(Var t, const ClassSubset& s, const DmiConfig& cfg);

/// IM of `t` on region R alone. Constant 0 when every row is excluded.
Var region_information(Var t, const std::vector<std::size_t>& region, double floor = kLogFloor);

// Value-level wrappers that evaluate the graph versions on constants.
DmiBreakdown dmi_from_predictions(const ProbMatrix& x, const ProbMatrix& y, const ClassSubset& s,
                                  const DmiConfig& cfg, bool symmetrize = true);
DmiBreakdown conditional_dmi(const ProbMatrix& x, const ProbMatrix& y, const ProbMatrix& z,
                             const ClassSubset& s, const DmiConfig& cfg, bool symmetrize = true);
DmiBreakdown selective_im(const ProbMatrix& t, const ClassSubset& s, const DmiConfig& cfg);

}  // namespace dmilab
