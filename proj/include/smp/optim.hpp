// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "smp/tensor.hpp"

namespace smp {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-2f;
};

/// Adam with bias correction. Moments are created on the first step and are
/// bound to the shapes of the parameters seen then.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Updates every parameter from its accumulated gradient (missing gradient
  /// counts as zero) using learning rate `lr`.
  void step(std::span<Tensor> params, float lr);
  void step(std::span<Tensor> params) { step(params, config_.lr); }

  std::uint64_t steps() const noexcept { return step_; }
  const AdamConfig& config() const noexcept { return config_; }
  std::span<const float> first_moment(std::size_t i) const { return m_.at(i); }
  std::span<const float> second_moment(std::size_t i) const { return v_.at(i); }

 private:
  AdamConfig config_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
};

/// Cosine decay from base_lr at step 0 to min_lr at step total.
float cosine_lr(float base_lr, std::size_t step, std::size_t total, float min_lr = 0.0f);

/// Plain gradient descent: p -= lr * grad.
void sgd_step(Tensor& param, float lr);

}  // namespace smp
