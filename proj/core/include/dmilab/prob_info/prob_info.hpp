#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dmilab/tensor_grad/graph.hpp"
#include "dmilab/tensor_grad/tensor.hpp"

namespace dmilab {

/// Floor applied to every probability before a logarithm.
inline constexpr double kLogFloor = 1e-12;

/// n x K row-stochastic batch prediction matrix (K >= 2).
class ProbMatrix {
 public:
  /// Validates nonnegativity and row sums within `tol`.
  explicit ProbMatrix(Tensor rows, double tol = 1e-9);

  std::size_t n() const { return rows_.rows(); }
  std::size_t K() const { return rows_.cols(); }
  const Tensor& tensor() const { return rows_; }
  double operator()(std::size_t i, std::size_t k) const { return rows_(i, k); }
  std::span<const double> row(std::size_t i) const {
    return rows_.data().subspan(i * K(), K());
  }

 private:
  Tensor rows_;
};

/// K x K nonnegative matrix summing to one.
class JointDistribution {
 public:
  explicit JointDistribution(Tensor p, double tol = 1e-9);

  std::size_t K() const { return p_.rows(); }
  const Tensor& matrix() const { return p_; }
  double operator()(std::size_t i, std::size_t j) const { return p_(i, j); }
  std::vector<double> row_marginal() const;
  std::vector<double> col_marginal() const;

 private:
  Tensor p_;
};

struct ConditionedJoint {
  double weight = 0.0;
  JointDistribution joint;
  /// Conditioning mass below 1e-9; `joint` is a uniform placeholder.
  bool zero_weight = false;
};

using ConditionedJoints = std::vector<ConditionedJoint>;

/// P = X^T Y / n, optionally (P + P^T) / 2, clamped and renormalised.
JointDistribution estimate_joint(const ProbMatrix& x, const ProbMatrix& y, bool symmetrize = true);

/// Shannon entropy in nats with 0 log 0 = 0.
double entropy(std::span<const double> p);

/// I(X;Y) of a joint, in nats.
double mutual_information(const JointDistribution& p);

/// One weighted joint per conditioning class k, weights w_k = mean_i Z_ik.
ConditionedJoints conditional_joints(const ProbMatrix& x, const ProbMatrix& y,
                                     const ProbMatrix& z, bool symmetrize = true);

/// Row-wise argmax, ties to the lowest index.
std::vector<std::size_t> row_argmax(const Tensor& rows);

// Differentiable counterparts. Shapes are checked the same way; probability
// invariants are the caller's responsibility.

Var estimate_joint(Var x, Var y, bool symmetrize = true);

/// -sum q log(max(q, floor)) over every entry of q.
Var entropy(Var q, double floor = kLogFloor);

/// sum_ij P_ij log(P_ij / (r_i c_j)) of P / sum(P).
Var mutual_information(Var p, double floor = kLogFloor);

struct ConditionedJointVar {
  double weight_value = 0.0;
  bool zero_weight = false;
  Var weight;  // scalar, invalid when zero_weight
  Var joint;   // K x K, invalid when zero_weight
};

std::vector<ConditionedJointVar> conditional_joints(Var x, Var y, Var z, bool symmetrize = true);

}  // namespace dmilab
