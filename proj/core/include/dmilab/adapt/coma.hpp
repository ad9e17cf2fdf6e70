#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dmilab/adapt/losses.hpp"
#include "dmilab/adapt/optim.hpp"
#include "dmilab/adapt/training.hpp"
#include "dmilab/dmi/dmi.hpp"
#include "dmilab/models/classifier.hpp"
#include "dmilab/models/teachers.hpp"
#include "dmilab/synthdata/scenario.hpp"

namespace dmilab {

/// Which of the four terms take part. Disabled terms are neither computed nor
/// recorded (their columns read 0).
struct LossSwitches {
  bool mc = true;
  bool cd = true;
  bool ags = true;
  bool sim = true;

  friend bool operator==(const LossSwitches&, const LossSwitches&) = default;
};

struct AdaptConfig {
  double alpha = 1.0;  // weight of conditional decorrelation in L_TCA
  double beta = 0.5;   // weight of selective IM in L_MDA
  DmiConfig dmi;
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr_target = 1e-2;
  double lr_proxy = 1e-2;
  double lr_prompt = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  Objective objective = Objective::dmi;
  LossSwitches use;
  /// Fraction of target samples held out of adaptation and used only for
  /// evaluation. 0 evaluates on the adaptation pool itself.
  double holdout_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Everything one adaptation run mutates.
struct AdaptState {
  ClassifierParams target;  // theta_t
  ClassifierParams proxy;   // theta_b
  PrototypeTeacherParams prototype;  // frozen apart from its prompt v
  OptState opt_target;
  OptState opt_proxy;
  OptState opt_prompt;

  /// theta_t <- theta_s, fresh optimizer buffers with the configured rates.
  static AdaptState start(const ClassifierParams& source, const ClassifierParams& proxy,
                          const PrototypeTeacherParams& prototype, const AdaptConfig& cfg);
};

// --- loss assembly (shared by the steps and the gradient tests) ------------------

struct TcaLosses {
  LossTerm mc;
  LossTerm cd;
  Var total;  // invalid when skipped
  bool skipped = false;
};

/// L_TCA = L_MC + alpha * L_CD over the enabled, non-degenerate terms.
TcaLosses tca_losses(Var p_t, Var p_b, Var p_c, const AdaptConfig& cfg);

struct MdaLosses {
  LossTerm ags;
  LossTerm sim;
  Var total;  // invalid when skipped
  bool skipped = false;
  std::size_t agreed = 0;
  std::size_t s_size = 0;
};

/// L_MDA = L_AGS + beta * L_SIM. Pseudo-labels and the subset come from the
/// frozen teacher predictions `p_c` and `p_b`. Under the dmi objective the
/// whole step is skipped when that subset has fewer than two classes.
MdaLosses mda_losses(Var p_t, const Tensor& p_c, const Tensor& p_b, const AdaptConfig& cfg);

// --- steps ---------------------------------------------------------------------

struct StepRecord {
  double l_mc = 0.0, l_cd = 0.0, l_tca = 0.0;
  double l_ags = 0.0, l_sim = 0.0, l_mda = 0.0;
  bool skipped = false;
  std::size_t degenerate = 0;
  std::size_t agreed = 0;
  double s_size = 0.0;
  /// Names of every parameter that received a gradient this step.
  std::vector<std::string> updated;
};

/// Updates the prompt and theta_b on one batch; theta_t enters as constants.
/// Throws NumericError on a non-finite loss.
StepRecord tca_step(AdaptState& state, const Tensor& features, const Tensor& global_view,
                    const AdaptConfig& cfg);

/// Updates theta_t on one batch; both teachers enter as constants.
StepRecord mda_step(AdaptState& state, const Tensor& features, const Tensor& global_view,
                    const AdaptConfig& cfg);

// --- full run ------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double target_accuracy = 0.0;
  double proxy_accuracy = 0.0;
  double prototype_accuracy = 0.0;
  /// Means over the epoch's non-skipped steps.
  double l_mc = 0.0, l_cd = 0.0, l_tca = 0.0;
  double l_ags = 0.0, l_sim = 0.0, l_mda = 0.0;
  /// Fraction of pool samples on which the two teachers agreed in MDA.
  double agreement_rate = 0.0;
  double mean_s_size = 0.0;
  std::size_t skipped_tca = 0;
  std::size_t skipped_mda = 0;
  std::size_t degenerate_terms = 0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct AdaptReport {
  std::vector<EpochRecord> epochs;
  /// Accuracy of theta_s on the evaluation set before adaptation.
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;
  double wall_clock_seconds = 0.0;
};

enum class Stage { tca, mda };

/// Seen after every step; lets callers audit which parameters moved.
struct StepEvent {
  Stage stage;
  std::size_t epoch;
  std::size_t batch;
  const StepRecord& record;
  const AdaptState& state;
};

using StepObserver = std::function<void(const StepEvent&)>;
/// Called once per finished epoch, after evaluation.
using EpochObserver = std::function<void(const EpochRecord&)>;

struct AdaptResult {
  AdaptState state;
  AdaptReport report;
};

/// Pool/evaluation index split implied by cfg.holdout_fraction.
struct TargetSplit {
  std::vector<std::size_t> pool;
  std::vector<std::size_t> eval;
};
TargetSplit split_target(std::size_t n, const AdaptConfig& cfg);

/// Alternates tca_step and mda_step over shuffled pool batches for
/// cfg.epochs epochs. A non-finite loss raises DivergenceError.
AdaptResult adapt(const ScenarioBundle& bundle, const ClassifierParams& source,
                  const ClassifierParams& proxy, const PrototypeTeacherParams& prototype,
                  const AdaptConfig& cfg, const StepObserver& observer = {},
                  const EpochObserver& on_epoch = {});

}  // namespace dmilab
