#include "dmilab/dmi/dmi.hpp"

#include <algorithm>
#include <cmath>

#include "dmilab/errors.hpp"

namespace dmilab {

ClassSubset::ClassSubset(std::size_t K, std::vector<std::size_t> members)
    : K_(K), members_(std::move(members)) {
  std::sort(members_.begin(), members_.end());
  members_.erase(std::unique(members_.begin(), members_.end()), members_.end());
  if (members_.empty()) throw ConfigError("class subset must not be empty");
  if (members_.back() >= K_) {
    throw ConfigError("class " + std::to_string(members_.back()) + " out of range for K=" +
                      std::to_string(K_));
  }
  complement_.reserve(K_ - members_.size());
  for (std::size_t k = 0, m = 0; k < K_; ++k) {
    if (m < members_.size() && members_[m] == k) {
      ++m;
    } else {
      complement_.push_back(k);
    }
  }
}

ClassSubset ClassSubset::full(std::size_t K) {
  std::vector<std::size_t> all(K);
  for (std::size_t k = 0; k < K; ++k) all[k] = k;
  return ClassSubset(K, std::move(all));
}

bool ClassSubset::contains(std::size_t k) const {
  return std::binary_search(members_.begin(), members_.end(), k);
}

void DmiConfig::validate() const {
  if (!(lambda > 0.0)) throw ConfigError("dmi lambda must be > 0");
  if (!(clamp_floor > 0.0)) throw ConfigError("dmi clamp floor must be > 0");
  if (confidence_threshold < 0.0 || confidence_threshold >= 1.0) {
    throw ConfigError("dmi confidence threshold must lie in [0, 1)");
  }
}

ClassSubset candidate_subset(const Tensor& x, const Tensor& y, double confidence_threshold) {
  if (x.shape() != y.shape() || x.rank() != 2) {
    throw ShapeError("candidate_subset: shape mismatch " + shape_to_string(x.shape()) + " vs " +
                     shape_to_string(y.shape()));
  }
  const std::size_t K = x.cols();
  std::vector<std::size_t> members;
  for (const Tensor* t : {&x, &y}) {
    const auto arg = row_argmax(*t);
    for (std::size_t i = 0; i < arg.size(); ++i) {
      if ((*t)(i, arg[i]) >= confidence_threshold) members.push_back(arg[i]);
    }
  }
  // With the filter on, a batch may have no confident row at all; fall back to
  // the unfiltered argmaxes so the subset stays well defined.
  if (members.empty()) return candidate_subset(x, y, 0.0);
  return ClassSubset(K, std::move(members));
}

namespace {

double region_scale(std::size_t s_size, std::size_t sc_size, double lambda) {
  if (sc_size < DmiConfig::kMinRegionSize) return 0.0;
  return lambda * std::log(static_cast<double>(s_size)) / std::log(static_cast<double>(sc_size));
}

DmiBreakdown skipped_breakdown(const ClassSubset& s) {
  DmiBreakdown b;
  b.s_size = s.size();
  b.sc_size = s.complement_size();
  b.skipped = true;
  b.skip_reason = "candidate subset has fewer than 2 classes";
  return b;
}

const std::vector<std::size_t>& region_of(const ClassSubset& s, Region which) {
  return which == Region::confident ? s.members() : s.complement();
}

}  // namespace

RestrictedJoint restrict_joint(const JointDistribution& p, const ClassSubset& s, Region which) {
  if (s.K() != p.K()) throw ShapeError("restrict_joint: subset K differs from joint K");
  const auto& idx = region_of(s, which);
  if (idx.empty()) throw ConfigError("restrict_joint: requested region is empty");
  const std::size_t m = idx.size();
  Tensor block = Tensor::zeros({m, m});
  double mass = 0.0;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = 0; b < m; ++b) {
      block(a, b) = p(idx[a], idx[b]);
      mass += block(a, b);
    }
  RestrictedJoint out;
  out.mass = mass;
  if (mass < 1e-12) return out;
  for (double& v : block.data()) v /= mass;
  out.block.emplace(std::move(block));
  return out;
}

DmiBreakdown dmi(const JointDistribution& p, const ClassSubset& s, const DmiConfig& cfg) {
  cfg.validate();
  if (s.size() < DmiConfig::kMinRegionSize) return skipped_breakdown(s);
  DmiBreakdown b;
  b.s_size = s.size();
  b.sc_size = s.complement_size();
  b.scale = region_scale(b.s_size, b.sc_size, cfg.lambda);

  const auto conf = restrict_joint(p, s, Region::confident);
  b.enhancement = conf.block ? mutual_information(*conf.block) : 0.0;
  if (b.sc_size >= DmiConfig::kMinRegionSize) {
    const auto unc = restrict_joint(p, s, Region::uncertain);
    b.suppression = unc.block ? mutual_information(*unc.block) : 0.0;
  }
  b.value = b.enhancement - b.scale * b.suppression;
  return b;
}

BoundCheck bound_check(const DmiBreakdown& b, const DmiConfig& cfg) {
  BoundCheck out;
  const double log_s = std::log(static_cast<double>(std::max<std::size_t>(b.s_size, 1)));
  out.upper = log_s;
  out.lower = -cfg.lambda * log_s;
  out.margin = std::min(b.value - out.lower, out.upper - b.value);
  out.pass = out.margin >= -1e-9;
  return out;
}

// --- differentiable ---------------------------------------------------------

namespace {

/// MI of the renormalised region block, or nullopt if it has no mass.
std::optional<Var> region_mi(Var p, const std::vector<std::size_t>& idx, double floor) {
  Var block = select_cols(select_rows(p, idx), idx);
  Var mass = sum(block);
  if (mass.value().item() < 1e-12) return std::nullopt;
  return mutual_information(div(block, mass), floor);
}

Var zero_like(Var anchor) { return anchor.graph().constant(Tensor::scalar(0.0)); }

DmiTerm combine(Var anchor, std::optional<Var> enh, std::optional<Var> sup, DmiBreakdown b) {
  b.enhancement = enh ? enh->value().item() : 0.0;
  b.suppression = sup ? sup->value().item() : 0.0;
  b.value = b.enhancement - b.scale * b.suppression;
  Var value = enh ? *enh : zero_like(anchor);
  if (sup && b.scale != 0.0) value = sub(value, scale(*sup, b.scale));
  return {value, b};
}

}  // namespace

DmiTerm dmi(Var p, const ClassSubset& s, const DmiConfig& cfg) {
  cfg.validate();
  const Tensor& pv = p.value();
  if (pv.rank() != 2 || pv.rows() != s.K() || pv.cols() != s.K()) {
    throw ShapeError("dmi: joint " + shape_to_string(pv.shape()) + " does not match K=" +
                     std::to_string(s.K()));
  }
  if (s.size() < DmiConfig::kMinRegionSize) return {Var{}, skipped_breakdown(s)};
  DmiBreakdown b;
  b.s_size = s.size();
  b.sc_size = s.complement_size();
  b.scale = region_scale(b.s_size, b.sc_size, cfg.lambda);
  auto enh = region_mi(p, s.members(), cfg.clamp_floor);
  std::optional<Var> sup;
  if (b.sc_size >= DmiConfig::kMinRegionSize) sup = region_mi(p, s.complement(), cfg.clamp_floor);
  return combine(p, enh, sup, b);
}

DmiTerm dmi_from_predictions(Var x, Var y, const ClassSubset& s, const DmiConfig& cfg,
                             bool symmetrize) {
  if (x.value().cols() != s.K()) throw ShapeError("dmi_from_predictions: K mismatch");
  return dmi(estimate_joint(x, y, symmetrize), s, cfg);
}

DmiTerm conditional_dmi(Var x, Var y, Var z, const ClassSubset& s, const DmiConfig& cfg,
                        bool symmetrize) {
  cfg.validate();
  if (x.value().cols() != s.K()) throw ShapeError("conditional_dmi: K mismatch");
  if (s.size() < DmiConfig::kMinRegionSize) {
    // Shape checks still apply to a skipped batch.
    (void)conditional_joints(x, y, z, symmetrize);
    return {Var{}, skipped_breakdown(s)};
  }
  const auto joints = conditional_joints(x, y, z, symmetrize);
  DmiBreakdown agg;
  agg.s_size = s.size();
  agg.sc_size = s.complement_size();
  agg.scale = region_scale(agg.s_size, agg.sc_size, cfg.lambda);
  std::optional<Var> total;
  for (const auto& cj : joints) {
    if (cj.zero_weight) continue;
    DmiTerm term = dmi(cj.joint, s, cfg);
    Var weighted = mul(cj.weight, term.value);
    total = total ? add(*total, weighted) : weighted;
    agg.enhancement += cj.weight_value * term.breakdown.enhancement;
    agg.suppression += cj.weight_value * term.breakdown.suppression;
  }
  Var value = total ? *total : zero_like(x);
  agg.value = value.value().item();
  return {value, agg};
}

Var region_information(Var t, const std::vector<std::size_t>& region, double floor) {
  // Fused for the same reason as mutual_information: H(mean q) - mean H(q)
  // cancels O(log |R|) terms, so it is accumulated in extended precision with
  // a hand-derived gradient.
  using ld = long double;
  const Tensor& tv = t.value();
  if (tv.rank() != 2) throw ShapeError("region_information expects [n x K]");
  const std::size_t n = tv.rows(), m = region.size();
  for (std::size_t k : region) {
    if (k >= tv.cols()) throw ShapeError("region_information: class index out of range");
  }
  std::vector<std::size_t> keep;
  std::vector<ld> mass;
  for (std::size_t i = 0; i < n; ++i) {
    ld s = 0.0L;
    for (std::size_t k : region) s += tv(i, k);
    if (s >= 1e-9L) {
      keep.push_back(i);
      mass.push_back(s);
    }
  }
  Tensor grad = Tensor::zeros(tv.shape());
  if (keep.empty()) return scalar_function(t, 0.0, std::move(grad));

  // When t is a softmax, renormalizing over the region equals a softmax of the
  // region's logits. Reading the logits makes the value exactly independent of
  // the classes outside the region instead of independent up to rounding.
  const Graph::Node& producer = t.graph().node(t.id());
  const Tensor* logits =
      producer.op == Op::kSoftmax ? &t.graph().node(producer.parents[0]).value : nullptr;
  auto region_row = [&](std::size_t a, ld* out) {
    const std::size_t i = keep[a];
    if (!logits) {
      for (std::size_t j = 0; j < m; ++j) out[j] = tv(i, region[j]) / mass[a];
      return;
    }
    ld top = (*logits)(i, region[0]);
    for (std::size_t k : region) top = std::max<ld>(top, (*logits)(i, k));
    ld z = 0.0L;
    for (std::size_t j = 0; j < m; ++j) z += out[j] = std::exp((*logits)(i, region[j]) - top);
    for (std::size_t j = 0; j < m; ++j) out[j] /= z;
  };

  const ld lfloor = floor;
  const ld inv_n = 1.0L / static_cast<ld>(keep.size());
  auto h_term = [&](ld x) { return x > lfloor ? x * std::log(x) : x * std::log(lfloor); };
  auto h_prime = [&](ld x) { return x > lfloor ? std::log(x) + 1.0L : std::log(lfloor); };

  std::vector<ld> q(keep.size() * m), u(m, 0.0L);
  ld mean_h = 0.0L;
  for (std::size_t a = 0; a < keep.size(); ++a) {
    region_row(a, &q[a * m]);
    for (std::size_t j = 0; j < m; ++j) {
      const ld v = q[a * m + j];
      u[j] += v * inv_n;
      mean_h -= h_term(v) * inv_n;
    }
  }
  ld h_u = 0.0L;
  for (ld v : u) h_u -= h_term(v);

  // dF/dq_aj = (h'(q_aj) - h'(u_j)) / N, pulled back through q = t / mass.
  for (std::size_t a = 0; a < keep.size(); ++a) {
    ld dot = 0.0L;
    std::vector<ld> gq(m);
    for (std::size_t j = 0; j < m; ++j) {
      gq[j] = (h_prime(q[a * m + j]) - h_prime(u[j])) * inv_n;
      dot += gq[j] * q[a * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) {
      grad(keep[a], region[j]) = static_cast<double>((gq[j] - dot) / mass[a]);
    }
  }
  return scalar_function(t, static_cast<double>(h_u - mean_h), std::move(grad));
}

DmiTerm selective_im(Var t, const ClassSubset& s, const DmiConfig& cfg) {
  cfg.validate();
  if (t.value().rank() != 2 || t.value().cols() != s.K()) {
    throw ShapeError("selective_im: prediction " + shape_to_string(t.value().shape()) +
                     " does not match K=" + std::to_string(s.K()));
  }
  if (s.size() < DmiConfig::kMinRegionSize) return {Var{}, skipped_breakdown(s)};
  DmiBreakdown b;
  b.s_size = s.size();
  b.sc_size = s.complement_size();
  b.scale = region_scale(b.s_size, b.sc_size, cfg.lambda);
  std::optional<Var> enh = region_information(t, s.members(), cfg.clamp_floor);
  std::optional<Var> sup;
  if (b.sc_size >= DmiConfig::kMinRegionSize) {
    sup = region_information(t, s.complement(), cfg.clamp_floor);
  }
  return combine(t, enh, sup, b);
}

DmiBreakdown dmi_from_predictions(const ProbMatrix& x, const ProbMatrix& y, const ClassSubset& s,
                                  const DmiConfig& cfg, bool symmetrize) {
  Graph g;
  return dmi_from_predictions(g.constant(x.tensor()), g.constant(y.tensor()), s, cfg, symmetrize)
      .breakdown;
}

DmiBreakdown conditional_dmi(const ProbMatrix& x, const ProbMatrix& y, const ProbMatrix& z,
                             const ClassSubset& s, const DmiConfig& cfg, bool symmetrize) {
  Graph g;
  return conditional_dmi(g.constant(x.tensor()), g.constant(y.tensor()), g.constant(z.tensor()),
                         s, cfg, symmetrize)
      .breakdown;
}

DmiBreakdown selective_im(const ProbMatrix& t, const ClassSubset& s, const DmiConfig& cfg) {
  Graph g;
  return selective_im(g.constant(t.tensor()), s, cfg).breakdown;
}

}  // namespace dmilab
