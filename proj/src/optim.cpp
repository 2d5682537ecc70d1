#include "multehr/optim.hpp"

#include <cmath>
#include <string>

#include "multehr/errors.hpp"

namespace multehr {

AdamState make_adam_state(std::span<const Tensor> params, AdamConfig config) {
  AdamState state;
  state.config = config;
  for (const Tensor& p : params) {
    state.first_moment.emplace_back(p.numel(), 0.0);
    state.second_moment.emplace_back(p.numel(), 0.0);
  }
  return state;
}

void adam_step(std::span<Tensor> params, AdamState& state) {
  if (params.size() != state.first_moment.size()) {
    throw ContractError("adam_step: " + std::to_string(params.size()) + " parameters for state of " +
                        std::to_string(state.first_moment.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].numel() != state.first_moment[k].size()) {
      throw ContractError("adam_step: parameter " + std::to_string(k) + " of shape " +
                          shape_str(params[k].shape()) + " does not match its moment buffers");
    }
    if (params[k].has_grad() && params[k].grad().size() != params[k].numel()) {
      throw ContractError("adam_step: gradient shape mismatch for parameter " + std::to_string(k));
    }
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(c.beta1, t);
  const double correction2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::span<double> p = params[k].mutable_data();
    std::span<const double> g = params[k].grad();
    std::vector<double>& m = state.first_moment[k];
    std::vector<double>& v = state.second_moment[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p[i] -= c.learning_rate * c.weight_decay * p[i];
      p[i] -= c.learning_rate * m_hat / (std::sqrt(v_hat) + c.epsilon);
    }
  }
}

}  // namespace multehr
