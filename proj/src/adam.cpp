#include "cacom/adam.hpp"

#include <cmath>

namespace cacom::ad {

AdamState AdamState::for_params(const std::vector<Tensor>& params, AdamConfig config) {
  AdamState s;
  s.config = config;
  for (const auto& p : params) {
    s.first_moment.emplace_back(p.numel(), 0.0f);
    s.second_moment.emplace_back(p.numel(), 0.0f);
  }
  return s;
}

float global_grad_norm(const std::vector<Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  }
  return static_cast<float>(std::sqrt(sq));
}

float adam_step(std::vector<Tensor>& params, AdamState& state, float clip_norm) {
  if (state.first_moment.size() != params.size()) {
    throw std::logic_error("adam_step: optimizer state does not cover the parameter list");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (state.first_moment[k].size() != params[k].numel()) {
      throw DimensionError("adam_step: moment buffer shape mismatch for parameter " + std::to_string(k));
    }
    for (float g : params[k].grad()) {
      if (!std::isfinite(g)) throw NumericalAbort("non-finite gradient in parameter " + std::to_string(k));
    }
  }
  const float norm = global_grad_norm(params);
  const float factor = (clip_norm > 0.0f && norm > clip_norm) ? clip_norm / norm : 1.0f;

  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const float bias1 = static_cast<float>(1.0 - std::pow(static_cast<double>(c.beta1), t));
  const float bias2 = static_cast<float>(1.0 - std::pow(static_cast<double>(c.beta2), t));

  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) continue;
    auto grad = params[k].grad();
    auto value = params[k].mutable_data();
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      const float g = grad[i] * factor;
      m[i] = c.beta1 * m[i] + (1.0f - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0f - c.beta2) * g * g;
      const float m_hat = m[i] / bias1;
      const float v_hat = v[i] / bias2;
      value[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
  return norm;
}

void zero_grads(std::vector<Tensor>& params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace cacom::ad
