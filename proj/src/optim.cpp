// SPDX-License-Identifier: Apache-2.0
#include "smp/optim.hpp"

#include <cmath>
#include <numbers>

#include "smp/errors.hpp"
#include "smp/kernels.hpp"

namespace smp {

void Adam::step(std::span<Tensor> params, float lr) {
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }
  if (m_.size() != params.size()) throw DimensionError("adam: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (m_[i].size() != params[i].numel()) throw DimensionError("adam: parameter shape changed between steps");

  ++step_;
  const kernels::AdamCoefficients c{
      lr,
      config_.beta1,
      config_.beta2,
      config_.eps,
      static_cast<float>(1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(step_))),
      static_cast<float>(1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(step_))),
  };
  std::vector<float> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    std::span<const float> g = p.grad_view();
    if (g.empty()) {
      zeros.assign(p.numel(), 0.0f);
      g = zeros;
    }
    kernels::adam_update(p.values(), g, m_[i], v_[i], c);
  }
}

float cosine_lr(float base_lr, std::size_t step, std::size_t total, float min_lr) {
  if (total == 0 || step >= total) return min_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return static_cast<float>(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * t)));
}

void sgd_step(Tensor& param, float lr) {
  auto g = param.grad_view();
  if (g.empty()) return;
  kernels::axpy(-lr, g, param.values());
}

}  // namespace smp
