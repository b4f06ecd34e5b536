// SPDX-License-Identifier: Apache-2.0
#include "smp/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include "smp/errors.hpp"
#include "smp/kernels.hpp"

namespace smp {

std::size_t numel(const Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  if (std::any_of(shape.begin(), shape.end(), [](std::size_t d) { return d == 0; }))
    throw DimensionError("tensor dimensions must be positive, got " + to_string(shape));
  if (smp::numel(shape) != values.size())
    throw DimensionError("shape " + to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  impl_ = std::make_shared<Impl>();
  impl_->shape = std::move(shape);
  impl_->values = std::move(values);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = smp::numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

Tensor::Impl& Tensor::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  return s.size() == 1 ? 1 : s[0];
}

std::size_t Tensor::cols() const { return shape().back(); }

std::span<float> Tensor::values() { return impl().values; }
std::span<const float> Tensor::values() const { return impl().values; }

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return impl().values[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool on) { impl().requires_grad = on; }

bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<float> Tensor::grad() const {
  auto& im = impl();
  if (im.grad.empty()) im.grad.assign(im.values.size(), 0.0f);
  return im.grad;
}

std::span<const float> Tensor::grad_view() const { return impl().grad; }

void Tensor::accumulate_grad(std::span<const float> g) const {
  auto& im = impl();
  if (g.size() != im.values.size())
    throw DimensionError("gradient size " + std::to_string(g.size()) + " vs tensor " +
                         to_string(im.shape));
  if (im.grad.empty()) {
    im.grad.assign(g.begin(), g.end());
  } else {
    kernels::add(im.grad, g, im.grad);
  }
}

void Tensor::zero_grad() const {
  auto& im = impl();
  std::fill(im.grad.begin(), im.grad.end(), 0.0f);
}

void Tensor::drop_grad() const {
  auto& im = impl();
  im.grad.clear();
  im.grad.shrink_to_fit();
}

Tensor Tensor::clone() const {
  const auto& im = impl();
  return Tensor(im.shape, im.values, im.requires_grad);
}

}  // namespace smp
