#include "dmilab/prob_info/prob_info.hpp"

#include <cmath>
#include <vector>

#include "dmilab/errors.hpp"

namespace dmilab {

ProbMatrix::ProbMatrix(Tensor rows, double tol) : rows_(std::move(rows)) {
  if (rows_.rank() != 2) {
    throw ShapeError("ProbMatrix expects rank 2, got " + shape_to_string(rows_.shape()));
  }
  if (rows_.cols() < 2) throw ShapeError("ProbMatrix needs K >= 2");
  for (std::size_t i = 0; i < n(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < K(); ++k) {
      const double v = rows_(i, k);
      if (!std::isfinite(v) || v < 0.0) {
        throw NumericError("ProbMatrix row " + std::to_string(i) + " has invalid entry");
      }
      s += v;
    }
    if (std::abs(s - 1.0) > tol) {
      throw NumericError("ProbMatrix row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

JointDistribution::JointDistribution(Tensor p, double tol) : p_(std::move(p)) {
  if (p_.rank() != 2 || p_.rows() != p_.cols()) {
    throw ShapeError("joint must be square, got " + shape_to_string(p_.shape()));
  }
  double s = 0.0;
  for (double v : p_.data()) {
    if (!std::isfinite(v) || v < 0.0) throw NumericError("joint has a negative or non-finite entry");
    s += v;
  }
  if (std::abs(s - 1.0) > tol) throw NumericError("joint sums to " + std::to_string(s));
}

std::vector<double> JointDistribution::row_marginal() const {
  std::vector<double> r(K(), 0.0);
  for (std::size_t i = 0; i < K(); ++i)
    for (std::size_t j = 0; j < K(); ++j) r[i] += p_(i, j);
  return r;
}

std::vector<double> JointDistribution::col_marginal() const {
  std::vector<double> c(K(), 0.0);
  for (std::size_t i = 0; i < K(); ++i)
    for (std::size_t j = 0; j < K(); ++j) c[j] += p_(i, j);
  return c;
}

namespace {

void check_pair(std::size_t n1, std::size_t k1, std::size_t n2, std::size_t k2, const char* what) {
  if (n1 != n2 || k1 != k2) {
    throw ShapeError(std::string(what) + ": shape mismatch [" + std::to_string(n1) + "x" +
                     std::to_string(k1) + "] vs [" + std::to_string(n2) + "x" +
                     std::to_string(k2) + "]");
  }
}

/// MI of P / sum(P): sum_ij p_ij log(max(p_ij / q_ij, floor)) with
/// q_ij = max(r_i c_j, floor^2), accumulated in extended precision. MI of a
/// weakly dependent joint is a small number built from O(1) logs, and double
/// accumulation leaves enough noise to swamp central differences on small
/// gradient entries. Normalising inside makes the result exactly invariant to
/// the rounding in an upstream renormalisation. When `grad` is given it
/// receives the exact derivative with respect to the unnormalised input.
double mi_kernel(const Tensor& input, double floor, Tensor* grad) {
  using ld = long double;
  const std::size_t K = input.rows();
  ld mass = 0.0L;
  for (double v : input.data()) mass += v;
  if (!(mass > 0.0L)) throw NumericError("mutual_information: joint has no mass");
  std::vector<ld> p(K * K);
  for (std::size_t i = 0; i < K * K; ++i) p[i] = input[i] / mass;
  std::vector<ld> r(K, 0.0L), c(K, 0.0L);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      r[i] += p[i * K + j];
      c[j] += p[i * K + j];
    }
  const ld lfloor = floor;
  const ld floor_q = lfloor * lfloor;
  ld total = 0.0L;
  std::vector<ld> dr(K, 0.0L), dc(K, 0.0L), local(K * K, 0.0L);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      const ld v = p[i * K + j];
      const ld rc = r[i] * c[j];
      const bool q_free = rc > floor_q;
      const ld q = q_free ? rc : floor_q;
      const bool ratio_free = v / q > lfloor;
      const ld lg = std::log(ratio_free ? v / q : lfloor);
      if (v != 0.0L) total += v * lg;
      local[i * K + j] = lg + (ratio_free ? 1.0L : 0.0L);
      if (ratio_free && q_free) {
        // d(v log(v/q))/dq = -v/q; dq/dr_i = c_j, dq/dc_j = r_i
        dr[i] -= v / q * c[j];
        dc[j] -= v / q * r[i];
      }
    }
  if (grad) {
    // g is the gradient w.r.t. the normalised joint; pull it back through
    // p = input / mass.
    std::vector<ld> g(K * K);
    ld dot = 0.0L;
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) {
        g[i * K + j] = local[i * K + j] + dr[i] + dc[j];
        dot += g[i * K + j] * p[i * K + j];
      }
    *grad = Tensor::zeros({K, K});
    for (std::size_t i = 0; i < K * K; ++i) (*grad)[i] = static_cast<double>((g[i] - dot) / mass);
  }
  return static_cast<double>(total);
}

JointDistribution finalize(Tensor p, bool symmetrize) {
  const std::size_t K = p.rows();
  if (symmetrize) {
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = i + 1; j < K; ++j) {
        const double m = 0.5 * (p(i, j) + p(j, i));
        p(i, j) = m;
        p(j, i) = m;
      }
  }
  double s = 0.0;
  for (double& v : p.data()) {
    if (v < 0.0) v = 0.0;
    s += v;
  }
  for (double& v : p.data()) v /= s;
  return JointDistribution(std::move(p));
}

}  // namespace

JointDistribution estimate_joint(const ProbMatrix& x, const ProbMatrix& y, bool symmetrize) {
  check_pair(x.n(), x.K(), y.n(), y.K(), "estimate_joint");
  const std::size_t n = x.n(), K = x.K();
  Tensor p = Tensor::zeros({K, K});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < K; ++i) {
      const double xi = x(s, i);
      if (xi == 0.0) continue;
      for (std::size_t j = 0; j < K; ++j) p(i, j) += xi * y(s, j);
    }
  for (double& v : p.data()) v /= static_cast<double>(n);
  return finalize(std::move(p), symmetrize);
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v < -1e-12) throw NumericError("entropy: negative probability " + std::to_string(v));
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

double mutual_information(const JointDistribution& p) {
  return mi_kernel(p.matrix(), kLogFloor, nullptr);
}

ConditionedJoints conditional_joints(const ProbMatrix& x, const ProbMatrix& y,
                                     const ProbMatrix& z, bool symmetrize) {
  check_pair(x.n(), x.K(), y.n(), y.K(), "conditional_joints");
  check_pair(x.n(), x.K(), z.n(), z.K(), "conditional_joints");
  const std::size_t n = x.n(), K = x.K();
  ConditionedJoints out;
  out.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    double mass = 0.0;
    for (std::size_t s = 0; s < n; ++s) mass += z(s, k);
    if (mass < 1e-9) {
      out.push_back({0.0,
                     JointDistribution(Tensor::filled({K, K}, 1.0 / static_cast<double>(K * K))),
                     true});
      continue;
    }
    Tensor p = Tensor::zeros({K, K});
    for (std::size_t s = 0; s < n; ++s) {
      const double w = z(s, k);
      for (std::size_t i = 0; i < K; ++i) {
        const double xi = w * x(s, i);
        if (xi == 0.0) continue;
        for (std::size_t j = 0; j < K; ++j) p(i, j) += xi * y(s, j);
      }
    }
    for (double& v : p.data()) v /= mass;
    out.push_back({mass / static_cast<double>(n), finalize(std::move(p), symmetrize), false});
  }
  return out;
}

std::vector<std::size_t> row_argmax(const Tensor& rows) {
  const std::size_t n = rows.rows(), K = rows.cols();
  std::vector<std::size_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (rows(i, k) > rows(i, best)) best = k;
    }
    out[i] = best;
  }
  return out;
}

// --- differentiable ---------------------------------------------------------

namespace {

Var symmetrize_and_normalize(Var p, bool symmetrize) {
  if (symmetrize) p = scale(add(p, transpose(p)), 0.5);
  return div(p, sum(p));
}

}  // namespace

Var estimate_joint(Var x, Var y, bool symmetrize) {
  const Tensor& xv = x.value();
  const Tensor& yv = y.value();
  check_pair(xv.rows(), xv.cols(), yv.rows(), yv.cols(), "estimate_joint");
  Var p = scale(matmul(transpose(x), y), 1.0 / static_cast<double>(xv.rows()));
  return symmetrize_and_normalize(p, symmetrize);
}

Var entropy(Var q, double floor) { return neg(sum(mul(q, safe_log(q, floor)))); }

Var mutual_information(Var p, double floor) {
  // Equal to H(r) + H(c) - H(P), but that form cancels three O(log K) terms
  // down to a small MI.
  const Tensor& pv = p.value();
  if (pv.rank() != 2 || pv.rows() != pv.cols()) {
    throw ShapeError("mutual_information expects a square joint, got " +
                     shape_to_string(pv.shape()));
  }
  Tensor grad;
  const double value = mi_kernel(pv, floor, &grad);
  return scalar_function(p, value, std::move(grad));
}

std::vector<ConditionedJointVar> conditional_joints(Var x, Var y, Var z, bool symmetrize) {
  const Tensor& xv = x.value();
  check_pair(xv.rows(), xv.cols(), y.value().rows(), y.value().cols(), "conditional_joints");
  check_pair(xv.rows(), xv.cols(), z.value().rows(), z.value().cols(), "conditional_joints");
  const std::size_t n = xv.rows(), K = xv.cols();
  Var xt = transpose(x);
  std::vector<ConditionedJointVar> out(K);
  for (std::size_t k = 0; k < K; ++k) {
    Var zk = select_cols(z, {k});
    Var mass = sum(zk);
    if (mass.value().item() < 1e-9) {
      out[k].zero_weight = true;
      continue;
    }
    // X^T diag(z_k) Y, with the diagonal applied to Y's rows.
    Var yw = mul(y, broadcast_cols(zk, K));
    Var p = div(matmul(xt, yw), mass);
    out[k].joint = symmetrize_and_normalize(p, symmetrize);
    out[k].weight = scale(mass, 1.0 / static_cast<double>(n));
    out[k].weight_value = out[k].weight.value().item();
  }
  return out;
}

}  // namespace dmilab
