#include "dmilab/adapt/losses.hpp"

#include <cmath>
#include <optional>

#include "dmilab/errors.hpp"

namespace dmilab {

std::string to_string(Objective o) {
  switch (o) {
    case Objective::dmi:
      return "dmi";
    case Objective::mi:
      return "mi";
    case Objective::kl:
      return "kl";
  }
  return "?";
}

Objective parse_objective(const std::string& s) {
  if (s == "dmi") return Objective::dmi;
  if (s == "mi") return Objective::mi;
  if (s == "kl") return Objective::kl;
  throw ConfigError("objective must be one of dmi, mi, kl (got '" + s + "')");
}

namespace {

void check_pred(const Var& p, const char* who) {
  if (p.value().rank() != 2 || p.value().cols() < 2) {
    throw ShapeError(std::string(who) + ": expected [n x K] predictions, got " +
                     shape_to_string(p.value().shape()));
  }
}

void check_labels(const Tensor& pred, const std::vector<std::size_t>& labels, const char* who,
                  bool allow_ignore) {
  if (labels.size() != pred.rows()) {
    throw ShapeError(std::string(who) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(pred.rows()) + " rows");
  }
  for (std::size_t y : labels) {
    if (allow_ignore && y == kIgnoreLabel) continue;
    if (y >= pred.cols()) {
      throw ShapeError(std::string(who) + ": label " + std::to_string(y) + " out of range for K=" +
                       std::to_string(pred.cols()));
    }
  }
}

std::vector<std::size_t> all_classes(std::size_t K) {
  std::vector<std::size_t> v(K);
  for (std::size_t k = 0; k < K; ++k) v[k] = k;
  return v;
}

}  // namespace

Var smoothed_cross_entropy(Var pred, const std::vector<std::size_t>& labels, double sigma) {
  check_pred(pred, "smoothed_cross_entropy");
  if (!(sigma >= 0.0 && sigma < 1.0)) throw ConfigError("label smoothing sigma must lie in [0, 1)");
  const Tensor& p = pred.value();
  check_labels(p, labels, "smoothed_cross_entropy", false);
  const std::size_t n = p.rows(), K = p.cols();
  Tensor target = Tensor::filled({n, K}, sigma / double(K));
  for (std::size_t i = 0; i < n; ++i) target(i, labels[i]) += 1.0 - sigma;
  Graph& g = pred.graph();
  Var per_entry = mul(g.constant(std::move(target)), safe_log(pred, kLogFloor));
  return scale(sum(per_entry), -1.0 / double(n));
}

double smoothed_cross_entropy(const ProbMatrix& pred, const std::vector<std::size_t>& labels,
                              double sigma) {
  Graph g;
  return smoothed_cross_entropy(g.constant(pred.tensor()), labels, sigma).value().item();
}

Var plain_mi(Var x, Var y) { return mutual_information(estimate_joint(x, y, true)); }

Var plain_conditional_mi(Var x, Var y, Var z) {
  std::optional<Var> total;
  for (const auto& cj : conditional_joints(x, y, z, true)) {
    if (cj.zero_weight) continue;
    Var term = mul(cj.weight, mutual_information(cj.joint));
    total = total ? add(*total, term) : term;
  }
  if (!total) return scale(sum(x), 0.0);
  return *total;
}

Var plain_im(Var t) {
  check_pred(t, "plain_im");
  return region_information(t, all_classes(t.value().cols()));
}

Var mean_kl(Var a, Var b) {
  check_pred(a, "mean_kl");
  if (a.value().shape() != b.value().shape()) throw ShapeError("mean_kl: shape mismatch");
  Var ratio = sub(safe_log(b, kLogFloor), safe_log(a, kLogFloor));
  return scale(sum(mul(b, ratio)), 1.0 / double(a.value().rows()));
}

double baseline_objective(Objective objective, const ProbMatrix& a, const ProbMatrix& b) {
  Graph g;
  Var va = g.constant(a.tensor()), vb = g.constant(b.tensor());
  switch (objective) {
    case Objective::kl:
      return mean_kl(va, vb).value().item();
    case Objective::mi:
      return plain_mi(va, vb).value().item();
    case Objective::dmi:
      break;
  }
  throw ConfigError("baseline_objective: dmi is not a baseline");
}

LossTerm mc_loss(Var p_t, Var p_b, Var p_c, Objective objective, const DmiConfig& cfg) {
  check_pred(p_t, "mc_loss");
  LossTerm out;
  if (objective == Objective::kl) {
    out.value = add(mean_kl(p_t, p_b), mean_kl(p_t, p_c));
    return out;
  }
  if (objective == Objective::mi) {
    out.value = neg(add(plain_mi(p_t, p_b), plain_mi(p_t, p_c)));
    return out;
  }
  std::optional<Var> total;
  std::size_t live = 0;
  for (Var other : {p_b, p_c}) {
    const ClassSubset s = candidate_subset(p_t.value(), other.value(), cfg.confidence_threshold);
    DmiTerm term = dmi_from_predictions(p_t, other, s, cfg);
    if (term.breakdown.skipped) {
      ++out.degenerate;
      continue;
    }
    ++live;
    out.s_size += double(s.size());
    total = total ? sub(*total, term.value) : neg(term.value);
  }
  if (!total) {
    out.skipped = true;
    return out;
  }
  out.s_size /= double(live);
  out.value = *total;
  return out;
}

LossTerm cd_loss(Var p_b, Var p_c, Var p_t, Objective objective, const DmiConfig& cfg) {
  check_pred(p_b, "cd_loss");
  LossTerm out;
  if (objective != Objective::dmi) {
    out.value = plain_conditional_mi(p_b, p_c, p_t);
    return out;
  }
  const ClassSubset s = candidate_subset(p_b.value(), p_c.value(), cfg.confidence_threshold);
  DmiTerm term = conditional_dmi(p_b, p_c, p_t, s, cfg);
  if (term.breakdown.skipped) {
    out.skipped = true;
    out.degenerate = 1;
    return out;
  }
  out.s_size = double(s.size());
  out.value = term.value;
  return out;
}

LossTerm ags_loss(Var p_t, const std::vector<std::size_t>& pseudo_labels) {
  check_pred(p_t, "ags_loss");
  const Tensor& p = p_t.value();
  check_labels(p, pseudo_labels, "ags_loss", true);
  Tensor mask = Tensor::zeros(p.shape());
  std::size_t labelled = 0;
  for (std::size_t i = 0; i < pseudo_labels.size(); ++i) {
    if (pseudo_labels[i] == kIgnoreLabel) continue;
    mask(i, pseudo_labels[i]) = 1.0;
    ++labelled;
  }
  LossTerm out;
  if (labelled == 0) {
    out.skipped = true;
    return out;
  }
  Var picked = mul(p_t.graph().constant(std::move(mask)), safe_log(p_t, kLogFloor));
  out.value = scale(sum(picked), -1.0 / double(labelled));
  return out;
}

LossTerm sim_loss(Var p_t, const ClassSubset& s, Objective objective, const DmiConfig& cfg) {
  check_pred(p_t, "sim_loss");
  LossTerm out;
  if (objective != Objective::dmi) {
    out.value = neg(plain_im(p_t));
    return out;
  }
  DmiTerm term = selective_im(p_t, s, cfg);
  if (term.breakdown.skipped) {
    out.skipped = true;
    out.degenerate = 1;
    return out;
  }
  out.s_size = double(s.size());
  out.value = neg(term.value);
  return out;
}

std::vector<std::size_t> agreement_labels(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("agreement_labels: shape mismatch");
  const auto ya = row_argmax(a), yb = row_argmax(b);
  std::vector<std::size_t> out(ya.size(), kIgnoreLabel);
  for (std::size_t i = 0; i < ya.size(); ++i) {
    if (ya[i] == yb[i]) out[i] = ya[i];
  }
  return out;
}

}  // namespace dmilab
