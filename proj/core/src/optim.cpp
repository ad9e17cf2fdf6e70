#include "dmilab/adapt/optim.hpp"

#include <cmath>

#include "dmilab/errors.hpp"

namespace dmilab {

void OptState::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("optimizer.lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("optimizer.momentum must lie in [0, 1)");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("optimizer.weight_decay must be nonnegative");
  }
}

void sgd_step(OptState& state, ParamStore& params, const GradientMap& grads) {
  state.validate();
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("sgd_step: gradient for unknown parameter '" + name + "'");
    if (!g.same_shape(it->second)) {
      throw ShapeError("sgd_step: gradient shape " + shape_to_string(g.shape()) +
                       " does not match parameter '" + name + "' " +
                       shape_to_string(it->second.shape()));
    }
  }
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    auto [buf_it, fresh] = state.buffers.try_emplace(name, Tensor::zeros(p.shape()));
    Tensor& buf = buf_it->second;
    if (!buf.same_shape(p)) throw ShapeError("sgd_step: momentum buffer for '" + name + "' is stale");
    auto pd = p.data();
    auto bd = buf.data();
    auto gd = g.data();
    for (std::size_t i = 0; i < pd.size(); ++i) {
      bd[i] = state.momentum * bd[i] + gd[i] + state.weight_decay * pd[i];
      pd[i] -= state.lr * bd[i];
    }
  }
}

}  // namespace dmilab
