#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "dmilab/dmi/dmi.hpp"
#include "dmilab/prob_info/prob_info.hpp"
#include "dmilab/tensor_grad/graph.hpp"

namespace dmilab {

/// Which dependence measure fills the DMI call sites of the training losses.
///   dmi: decomposed MI on a confident subset
///   mi:  plain MI of the full joint (no subset, never skipped)
///   kl:  mutual consistency becomes a KL divergence; the other DMI sites use
///        their plain-MI forms
enum class Objective { dmi, mi, kl };

std::string to_string(Objective o);
/// Accepts "dmi", "mi", "kl".
Objective parse_objective(const std::string& s);

/// Marks a sample that carries no pseudo-label.
inline constexpr std::size_t kIgnoreLabel = std::numeric_limits<std::size_t>::max();

/// mean_i -sum_k ((1 - sigma) [k == y_i] + sigma / K) log pred_ik.
/// Throws ConfigError for sigma outside [0, 1) and ShapeError for a label out
/// of range.
Var smoothed_cross_entropy(Var pred, const std::vector<std::size_t>& labels, double sigma);
double smoothed_cross_entropy(const ProbMatrix& pred, const std::vector<std::size_t>& labels,
                              double sigma);

// --- plain objectives ---------------------------------------------------------

/// I(X;Y) of the symmetrised joint estimated from x and y.
Var plain_mi(Var x, Var y);
/// sum_k w_k I(P^(k)) over the joints conditioned on z.
Var plain_conditional_mi(Var x, Var y, Var z);
/// H(mean_i t_i) - mean_i H(t_i) over all classes.
Var plain_im(Var t);
/// mean_i KL(b_i || a_i).
Var mean_kl(Var a, Var b);

/// Value of the KL or plain-MI comparison objective between two predictions.
/// Throws ConfigError for Objective::dmi.
double baseline_objective(Objective objective, const ProbMatrix& a, const ProbMatrix& b);

// --- the four training terms ----------------------------------------------------

struct LossTerm {
  Var value;  // invalid when skipped
  bool skipped = false;
  /// DMI evaluations in this term that hit a degenerate subset.
  std::size_t degenerate = 0;
  /// Mean |S| over the non-degenerate DMI evaluations (0 if none).
  double s_size = 0.0;

  double scalar() const { return skipped ? 0.0 : value.value().item(); }
};

/// -D(p_t; p_b) - D(p_t; p_c); each DMI evaluation picks its own subset from
/// its pair. Skipped only when both evaluations are degenerate.
LossTerm mc_loss(Var p_t, Var p_b, Var p_c, Objective objective, const DmiConfig& cfg);

/// D(p_b; p_c | p_t) with one subset taken from (p_b, p_c).
LossTerm cd_loss(Var p_b, Var p_c, Var p_t, Objective objective, const DmiConfig& cfg);

/// Cross-entropy of p_t against pseudo-labels, averaged over the labelled
/// rows. Rows marked kIgnoreLabel contribute nothing. Skipped when no row is
/// labelled.
LossTerm ags_loss(Var p_t, const std::vector<std::size_t>& pseudo_labels);

/// -selective IM of p_t on the externally chosen subset `s`.
LossTerm sim_loss(Var p_t, const ClassSubset& s, Objective objective, const DmiConfig& cfg);

/// Per-row argmax of a and b where they coincide, kIgnoreLabel elsewhere.
std::vector<std::size_t> agreement_labels(const Tensor& a, const Tensor& b);

}  // namespace dmilab
