#pragma once

#include <functional>
#include <string>

#include "dmilab/tensor_grad/graph.hpp"

namespace dmilab {

/// Builds a scalar loss. Parameters must be registered through
/// graph.parameter(name, params.at(name)).
using LossBuilder = std::function<Var(Graph&, const ParamStore&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_entry;  // "name[flat_index]"
};

/// Central-difference comparison over every entry of every parameter.
/// Relative error per entry is |a - n| / max(1e-8, |a| + |n|).
/// Throws NumericError naming the entry if a perturbed loss is non-finite.
GradCheckResult grad_check_detailed(const LossBuilder& loss_fn, const ParamStore& params,
                                    double epsilon);

inline double grad_check(const LossBuilder& loss_fn, const ParamStore& params,
                         double epsilon) {
  return grad_check_detailed(loss_fn, params, epsilon).max_relative_error;
}

}  // namespace dmilab
