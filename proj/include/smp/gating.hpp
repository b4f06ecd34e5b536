// SPDX-License-Identifier: Apache-2.0
#pragma once

// Learned binary masks over weight tensors: gating tensors, Bernoulli and
// maximum-likelihood mask draws, straight-through gradient flow into the
// gates, and finalization of a gated weight into its sparse form.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "smp/graph.hpp"
#include "smp/rng.hpp"
#include "smp/tensor.hpp"

namespace smp {

float sigmoid(float x) noexcept;

/// Binary tensor aligned element-wise with one weight tensor.
class PruneMask {
 public:
  PruneMask() = default;
  PruneMask(Shape shape, std::vector<std::uint8_t> bits);
  static PruneMask ones(const Shape& shape);
  static PruneMask zeros(const Shape& shape);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return bits_.size(); }
  std::size_t nnz() const noexcept;
  double sparsity() const noexcept;
  std::span<const std::uint8_t> bits() const noexcept { return bits_; }
  bool kept(std::size_t i) const { return bits_.at(i) != 0; }
  void set(std::size_t i, bool keep) { bits_.at(i) = keep ? 1 : 0; }
  /// 0/1 float tensor of the same shape (no gradient).
  Tensor as_tensor() const;
  /// Zeroes the entries of `values` whose bit is 0.
  void apply(std::span<float> values) const;

  friend bool operator==(const PruneMask&, const PruneMask&) = default;

 private:
  Shape shape_;
  std::vector<std::uint8_t> bits_;
};

/// Lifecycle of a gated weight.
///   train_bern   gates trained, forward masks drawn by Bernoulli(sigmoid(g))
///   train_round  gates trained, forward masks drawn by thresholding
///   frozen_gate  gates fixed; masks still sampled (Bernoulli unless configured)
///   finalized    weight overwritten by W * round(sigmoid(G)); gate discarded
enum class GateMode { train_bern, train_round, frozen_gate, finalized };

enum class SampleKind { bernoulli, round };

const char* to_string(GateMode mode) noexcept;

/// Each bit is 1 with probability sigmoid(g), drawn from `rng` in flat index order.
PruneMask sample_bern(const Tensor& gate, Rng& rng);
/// Maximum-likelihood draw: bit = 1 iff sigmoid(g) >= 0.5, i.e. iff g >= 0.
PruneMask sample_round(const Tensor& gate);

/// W' = W * mask with the mask as a constant: dL/dW = dL/dW' * mask.
Tensor masked_forward(Graph& graph, const Tensor& weight, const PruneMask& mask);

/// Gradient at g implied by a straight-through sample node that received
/// `upstream`: dL/dsigmoid(g) = upstream, so dL/dg = upstream * s * (1 - s).
std::vector<float> ste_gate_grad(std::span<const float> upstream, std::span<const float> gate);

/// Prunable weight paired with a gating tensor of the same shape.
class GatedParameter {
 public:
  /// Gate initialised to the constant `init` everywhere. The weight tensor is
  /// shared, not copied.
  GatedParameter(Tensor weight, float init, GateMode mode = GateMode::train_bern);
  GatedParameter(Tensor weight, Tensor gate, GateMode mode);

  Tensor& weight() noexcept { return weight_; }
  const Tensor& weight() const noexcept { return weight_; }
  /// Throws LifecycleError once finalized.
  Tensor& gate();
  const Tensor& gate() const;
  GateMode mode() const noexcept { return mode_; }
  /// Switches between the three training modes. Finalization is one-way.
  void set_mode(GateMode mode);
  bool gate_trainable() const noexcept {
    return mode_ == GateMode::train_bern || mode_ == GateMode::train_round;
  }

  PruneMask sample_bern(Rng& rng) const;
  PruneMask sample_round() const;
  /// Mask for one training step according to the mode. frozen_gate uses
  /// `frozen_kind`.
  PruneMask sample(Rng& rng, SampleKind frozen_kind = SampleKind::bernoulli) const;

  /// Overwrites W with W * round(sigmoid(G)) and discards G.
  void finalize();

  /// Copy bound to another weight tensor; the gate is deep-copied.
  GatedParameter rebind(Tensor weight) const;

 private:
  GatedParameter() = default;

  Tensor weight_;
  Tensor gate_;
  GateMode mode_ = GateMode::train_bern;
};

/// Nodes created for one gated weight in one step.
struct GatedForward {
  Tensor probs;      // sigmoid(G)
  Tensor sample;     // straight-through sample node (forward value = mask bits)
  Tensor effective;  // W * sample
  PruneMask mask;
};

/// Records sigmoid(G) -> sample -> W * sample in `graph`. When the gate is
/// frozen the sample is a constant and only W receives gradients.
GatedForward gated_forward(Graph& graph, GatedParameter& param, const PruneMask& mask);

struct NnzCount {
  std::size_t nnz = 0;
  std::size_t total = 0;
  double sparsity() const noexcept {
    return total == 0 ? 0.0 : 1.0 - static_cast<double>(nnz) / static_cast<double>(total);
  }
};

/// p_nnz = || round(sigmoid(phi)) ||_1 over all gate tensors, with p_total.
NnzCount count_nnz(std::span<const Tensor> gates);

}  // namespace smp
