// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace smp {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape) noexcept;
std::string to_string(const Shape& shape);

/// Dense row-major float32 tensor with an optional gradient accumulator.
///
/// A Tensor is a handle: copies share storage. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const noexcept { return impl_ != nullptr; }
  bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const { return values().size(); }
  /// Leading extent for rank-2 tensors, 1 for rank-1.
  std::size_t rows() const;
  /// Trailing extent.
  std::size_t cols() const;

  std::span<float> values();
  std::span<const float> values() const;
  float item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  // Gradient mutators are const: a Tensor is a handle and autograd writes
  // through captured copies.
  /// Gradient buffer; allocated as zeros on first access.
  std::span<float> grad() const;
  /// Gradient buffer or an empty span when none was accumulated.
  std::span<const float> grad_view() const;
  /// Adds g to the gradient. The first contribution is copied verbatim.
  void accumulate_grad(std::span<const float> g) const;
  void zero_grad() const;
  void drop_grad() const;

  /// Deep copy of shape, values and requires_grad flag; no gradient.
  Tensor clone() const;

 private:
  struct Impl {
    Shape shape;
    std::vector<float> values;
    std::vector<float> grad;
    bool requires_grad = false;
  };
  Impl& impl() const;
  std::shared_ptr<Impl> impl_;
};

}  // namespace smp
