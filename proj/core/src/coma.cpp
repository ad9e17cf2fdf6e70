#include "dmilab/adapt/coma.hpp"

#include <algorithm>
#include <chrono>
#include <optional>
#include <cmath>
#include <random>

#include "dmilab/errors.hpp"

namespace dmilab {

namespace {

constexpr std::uint64_t kAdaptStream = 3;
constexpr std::uint64_t kSplitStream = 4;

std::optional<Var> accumulate(std::optional<Var> total, const LossTerm& term, double weight) {
  if (term.skipped) return total;
  Var weighted = weight == 1.0 ? term.value : scale(term.value, weight);
  return total ? add(*total, weighted) : weighted;
}

LossTerm disabled() {
  LossTerm t;
  t.skipped = true;
  return t;
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(std::string(what) + " is not finite");
}

std::vector<std::string> names_of(const GradientMap& grads) {
  std::vector<std::string> out;
  for (const auto& [name, _] : grads) out.push_back(name);
  return out;
}

}  // namespace

void AdaptConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("adapt.alpha must be positive");
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("adapt.beta must be positive");
  dmi.validate();
  if (batch_size == 0) throw ConfigError("adapt.batch_size must be positive");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) {
    throw ConfigError("adapt.holdout_fraction must lie in [0, 1)");
  }
  OptState{lr_target, momentum, weight_decay, {}}.validate();
  OptState{lr_proxy, momentum, weight_decay, {}}.validate();
  OptState{lr_prompt, momentum, weight_decay, {}}.validate();
}

AdaptState AdaptState::start(const ClassifierParams& source, const ClassifierParams& proxy,
                             const PrototypeTeacherParams& prototype, const AdaptConfig& cfg) {
  if (source.dims() != proxy.dims()) throw ShapeError("adapt: source and proxy dims differ");
  if (prototype.K() != source.dims().K) throw ShapeError("adapt: teacher K differs from model K");
  AdaptState s;
  s.target = source;
  s.proxy = proxy;
  s.prototype = prototype;
  s.opt_target = {cfg.lr_target, cfg.momentum, cfg.weight_decay, {}};
  s.opt_proxy = {cfg.lr_proxy, cfg.momentum, cfg.weight_decay, {}};
  s.opt_prompt = {cfg.lr_prompt, cfg.momentum, cfg.weight_decay, {}};
  return s;
}

TcaLosses tca_losses(Var p_t, Var p_b, Var p_c, const AdaptConfig& cfg) {
  TcaLosses out;
  out.mc = cfg.use.mc ? mc_loss(p_t, p_b, p_c, cfg.objective, cfg.dmi) : disabled();
  out.cd = cfg.use.cd ? cd_loss(p_b, p_c, p_t, cfg.objective, cfg.dmi) : disabled();
  auto total = accumulate({}, out.mc, 1.0);
  total = accumulate(total, out.cd, cfg.alpha);
  out.skipped = !total;
  if (total) out.total = *total;
  return out;
}

MdaLosses mda_losses(Var p_t, const Tensor& p_c, const Tensor& p_b, const AdaptConfig& cfg) {
  MdaLosses out;
  const auto labels = agreement_labels(p_c, p_b);
  for (std::size_t y : labels) out.agreed += y != kIgnoreLabel;
  const ClassSubset s = candidate_subset(p_c, p_b, cfg.dmi.confidence_threshold);
  out.s_size = s.size();
  if (cfg.use.sim && cfg.objective == Objective::dmi && s.size() < DmiConfig::kMinRegionSize) {
    out.ags = disabled();
    out.sim = disabled();
    out.sim.degenerate = 1;
    out.skipped = true;
    return out;
  }
  out.ags = cfg.use.ags ? ags_loss(p_t, labels) : disabled();
  out.sim = cfg.use.sim ? sim_loss(p_t, s, cfg.objective, cfg.dmi) : disabled();
  auto total = accumulate({}, out.ags, 1.0);
  total = accumulate(total, out.sim, cfg.beta);
  out.skipped = !total;
  if (total) out.total = *total;
  return out;
}

StepRecord tca_step(AdaptState& state, const Tensor& features, const Tensor& global_view,
                    const AdaptConfig& cfg) {
  Graph g;
  Var x = g.constant(features);
  Var p_t = predict(g, state.target, x, "target.", false);
  Var p_b = predict(g, state.proxy, x, "proxy.", true);
  Var p_c = prototype_predict(g, state.prototype, global_view, kPromptName, true);
  const TcaLosses L = tca_losses(p_t, p_b, p_c, cfg);

  StepRecord r;
  r.l_mc = L.mc.scalar();
  r.l_cd = L.cd.scalar();
  r.degenerate = L.mc.degenerate + L.cd.degenerate;
  r.s_size = L.mc.s_size;
  r.skipped = L.skipped;
  if (L.skipped) return r;
  r.l_tca = L.total.value().item();
  require_finite(r.l_tca, "L_TCA");

  const GradientMap grads = g.backward(L.total);
  r.updated = names_of(grads);
  sgd_step(state.opt_proxy, state.proxy.tensors(), gradients_for(grads, "proxy."));
  if (auto it = grads.find(kPromptName); it != grads.end()) {
    ParamStore prompt{{kPromptName, state.prototype.prompt}};
    sgd_step(state.opt_prompt, prompt, {{kPromptName, it->second}});
    state.prototype.prompt = std::move(prompt.at(kPromptName));
  }
  return r;
}

StepRecord mda_step(AdaptState& state, const Tensor& features, const Tensor& global_view,
                    const AdaptConfig& cfg) {
  // Teacher predictions are recomputed with the parameters TCA just updated.
  const ProbMatrix p_c = prototype_predict(state.prototype, global_view);
  const ProbMatrix p_b = predict(state.proxy, features);
  Graph g;
  Var p_t = predict(g, state.target, g.constant(features), "target.", true);
  const MdaLosses L = mda_losses(p_t, p_c.tensor(), p_b.tensor(), cfg);

  StepRecord r;
  r.l_ags = L.ags.scalar();
  r.l_sim = L.sim.scalar();
  r.agreed = L.agreed;
  r.s_size = double(L.s_size);
  r.degenerate = L.ags.degenerate + L.sim.degenerate;
  r.skipped = L.skipped;
  if (L.skipped) return r;
  r.l_mda = L.total.value().item();
  require_finite(r.l_mda, "L_MDA");

  const GradientMap grads = g.backward(L.total);
  r.updated = names_of(grads);
  sgd_step(state.opt_target, state.target.tensors(), gradients_for(grads, "target."));
  return r;
}

TargetSplit split_target(std::size_t n, const AdaptConfig& cfg) {
  TargetSplit s;
  const auto order = epoch_order(n, cfg.seed, kSplitStream, 0);
  const auto held = static_cast<std::size_t>(std::floor(cfg.holdout_fraction * double(n)));
  if (held == 0) {
    for (std::size_t i = 0; i < n; ++i) s.pool.push_back(i);
    s.eval = s.pool;
    return s;
  }
  if (held >= n) throw ConfigError("adapt.holdout_fraction leaves no adaptation pool");
  s.pool.assign(order.begin(), order.end() - static_cast<long>(held));
  s.eval.assign(order.end() - static_cast<long>(held), order.end());
  std::sort(s.pool.begin(), s.pool.end());
  std::sort(s.eval.begin(), s.eval.end());
  return s;
}

namespace {

struct EvalSet {
  LabeledSet data;
  Tensor global_view;
};

struct EpochSums {
  double mc = 0, cd = 0, tca = 0, ags = 0, sim = 0, mda = 0, s_size = 0;
  std::size_t tca_steps = 0, mda_steps = 0, agreed = 0, seen = 0;
};

double mean_or_zero(double sum, std::size_t n) { return n == 0 ? 0.0 : sum / double(n); }

}  // namespace

AdaptResult adapt(const ScenarioBundle& bundle, const ClassifierParams& source,
                  const ClassifierParams& proxy, const PrototypeTeacherParams& prototype,
                  const AdaptConfig& cfg, const StepObserver& observer,
                  const EpochObserver& on_epoch) {
  cfg.validate();
  const auto started = std::chrono::steady_clock::now();
  const TargetSplit split = split_target(bundle.target.size(), cfg);
  const Tensor pool_x = gather_rows(bundle.target.features, split.pool);
  const Tensor pool_g = gather_rows(bundle.target_global, split.pool);
  EvalSet ev;
  ev.data.features = gather_rows(bundle.target.features, split.eval);
  for (std::size_t i : split.eval) ev.data.labels.push_back(bundle.target.labels[i]);
  ev.global_view = gather_rows(bundle.target_global, split.eval);

  AdaptResult out{AdaptState::start(source, proxy, prototype, cfg), {}};
  AdaptState& state = out.state;
  out.report.initial_accuracy = evaluate(source, ev.data).accuracy;
  out.report.final_accuracy = out.report.initial_accuracy;

  const std::size_t n = split.pool.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(n, cfg.seed, kAdaptStream, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    EpochSums sums;
    std::size_t batch = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++batch) {
      const std::span<const std::size_t> idx(order.data() + start,
                                             std::min(cfg.batch_size, n - start));
      const Tensor x = gather_rows(pool_x, idx);
      const Tensor gv = gather_rows(pool_g, idx);

      StepRecord t;
      try {
        t = tca_step(state, x, gv, cfg);
      } catch (const NumericError&) {
        throw DivergenceError("tca", static_cast<long>(epoch), static_cast<long>(batch));
      }
      if (observer) observer({Stage::tca, epoch, batch, t, state});
      rec.degenerate_terms += t.degenerate;
      if (t.skipped) {
        ++rec.skipped_tca;
      } else {
        ++sums.tca_steps;
        sums.mc += t.l_mc;
        sums.cd += t.l_cd;
        sums.tca += t.l_tca;
      }

      StepRecord m;
      try {
        m = mda_step(state, x, gv, cfg);
      } catch (const NumericError&) {
        throw DivergenceError("mda", static_cast<long>(epoch), static_cast<long>(batch));
      }
      if (observer) observer({Stage::mda, epoch, batch, m, state});
      rec.degenerate_terms += m.degenerate;
      sums.agreed += m.agreed;
      sums.seen += idx.size();
      sums.s_size += m.s_size;
      if (m.skipped) {
        ++rec.skipped_mda;
      } else {
        ++sums.mda_steps;
        sums.ags += m.l_ags;
        sums.sim += m.l_sim;
        sums.mda += m.l_mda;
      }
    }
    rec.l_mc = mean_or_zero(sums.mc, sums.tca_steps);
    rec.l_cd = mean_or_zero(sums.cd, sums.tca_steps);
    rec.l_tca = mean_or_zero(sums.tca, sums.tca_steps);
    rec.l_ags = mean_or_zero(sums.ags, sums.mda_steps);
    rec.l_sim = mean_or_zero(sums.sim, sums.mda_steps);
    rec.l_mda = mean_or_zero(sums.mda, sums.mda_steps);
    rec.agreement_rate = mean_or_zero(double(sums.agreed), sums.seen);
    rec.mean_s_size = mean_or_zero(sums.s_size, batch);
    rec.target_accuracy = evaluate(state.target, ev.data).accuracy;
    rec.proxy_accuracy = evaluate(state.proxy, ev.data).accuracy;
    rec.prototype_accuracy =
        evaluate(row_argmax(prototype_predict(state.prototype, ev.global_view).tensor()),
                 ev.data.labels, source.dims().K)
            .accuracy;
    out.report.final_accuracy = rec.target_accuracy;
    out.report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  out.report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

}  // namespace dmilab
