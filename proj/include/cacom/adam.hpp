#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "cacom/tensor.hpp"

namespace cacom {

/// A gradient or loss went non-finite; training cannot continue.
class NumericalAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace ad {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;

  static AdamState for_params(const std::vector<Tensor>& params, AdamConfig config);
};

/// Global L2 norm over every parameter's gradient (missing grads count as 0).
float global_grad_norm(const std::vector<Tensor>& params);

/// Clips the joint gradient to `clip_norm` (no clipping when <= 0), then
/// applies one bias-corrected Adam update. Returns the pre-clip norm.
/// Throws NumericalAbort if any gradient is non-finite.
float adam_step(std::vector<Tensor>& params, AdamState& state, float clip_norm);

void zero_grads(std::vector<Tensor>& params);

}  // namespace ad
}  // namespace cacom
