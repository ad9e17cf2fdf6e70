#include "dmilab/tensor_grad/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "dmilab/errors.hpp"

namespace dmilab {

namespace {

double evaluate(const LossBuilder& fn, const ParamStore& params, const std::string& entry) {
  try {
    Graph g;
    return fn(g, params).value().item();
  } catch (const NumericError& e) {
    throw NumericError("grad_check: loss failed when perturbing " + entry + ": " + e.what());
  }
}

}  // namespace

GradCheckResult grad_check_detailed(const LossBuilder& loss_fn, const ParamStore& params,
                                    double epsilon) {
  if (!(epsilon > 0.0)) throw ConfigError("grad_check: epsilon must be positive");

  GradientMap analytic;
  {
    Graph g;
    Var loss = loss_fn(g, params);
    if (!std::isfinite(loss.value().item())) throw NumericError("grad_check: non-finite loss");
    analytic = g.backward(loss);
  }

  GradCheckResult result;
  ParamStore probe = params;
  for (const auto& [name, base] : params) {
    const auto it = analytic.find(name);
    Tensor& slot = probe.at(name);
    for (std::size_t i = 0; i < base.numel(); ++i) {
      const std::string entry = name + "[" + std::to_string(i) + "]";
      slot[i] = base[i] + epsilon;
      const double up = evaluate(loss_fn, probe, entry);
      slot[i] = base[i] - epsilon;
      const double down = evaluate(loss_fn, probe, entry);
      slot[i] = base[i];
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: non-finite loss when perturbing " + entry);
      }
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = it == analytic.end() ? 0.0 : it->second[i];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      if (rel > result.max_relative_error || result.worst_entry.empty()) {
        result.max_relative_error = std::max(rel, result.max_relative_error);
        if (rel >= result.max_relative_error) result.worst_entry = entry;
      }
    }
  }
  return result;
}

}  // namespace dmilab
