#pragma once

#include "dmilab/tensor_grad/tensor.hpp"

namespace dmilab {

/// SGD with momentum and L2 weight decay for one parameter group:
///   buf <- momentum * buf + grad + weight_decay * p
///   p   <- p - lr * buf
/// Buffers start at zero and are created on first use.
struct OptState {
  double lr = 1e-2;
  double momentum = 0.9;
  double weight_decay = 1e-3;
  ParamStore buffers;

  void validate() const;
};

/// Updates every entry of `params` that has a gradient; entries without one
/// are left alone, buffer included. Throws ShapeError when a gradient or
/// existing buffer does not match its parameter and ConfigError for a gradient
/// naming no parameter.
void sgd_step(OptState& state, ParamStore& params, const GradientMap& grads);

}  // namespace dmilab
