// SPDX-License-Identifier: Apache-2.0
#include "smp/gating.hpp"

#include <algorithm>
#include <cmath>

#include "smp/errors.hpp"

namespace smp {

float sigmoid(float x) noexcept {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

PruneMask::PruneMask(Shape shape, std::vector<std::uint8_t> bits) : shape_(std::move(shape)), bits_(std::move(bits)) {
  if (numel(shape_) != bits_.size()) throw DimensionError("mask shape " + to_string(shape_) + " vs bit count");
  for (auto& b : bits_)
    if (b > 1) throw ContractError("mask bits must be 0 or 1");
}

PruneMask PruneMask::ones(const Shape& shape) { return PruneMask(shape, std::vector<std::uint8_t>(numel(shape), 1)); }
PruneMask PruneMask::zeros(const Shape& shape) { return PruneMask(shape, std::vector<std::uint8_t>(numel(shape), 0)); }

std::size_t PruneMask::nnz() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

double PruneMask::sparsity() const noexcept {
  return bits_.empty() ? 0.0 : 1.0 - static_cast<double>(nnz()) / static_cast<double>(bits_.size());
}

Tensor PruneMask::as_tensor() const {
  std::vector<float> v(bits_.size());
  std::transform(bits_.begin(), bits_.end(), v.begin(), [](std::uint8_t b) { return b ? 1.0f : 0.0f; });
  return Tensor(shape_, std::move(v));
}

void PruneMask::apply(std::span<float> values) const {
  if (values.size() != bits_.size()) throw DimensionError("mask apply: size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i)
    if (!bits_[i]) values[i] = 0.0f;
}

const char* to_string(GateMode mode) noexcept {
  switch (mode) {
    case GateMode::train_bern: return "train_bern";
    case GateMode::train_round: return "train_round";
    case GateMode::frozen_gate: return "frozen_gate";
    case GateMode::finalized: return "finalized";
  }
  return "?";
}

PruneMask sample_bern(const Tensor& gate, Rng& rng) {
  auto g = gate.values();
  std::vector<std::uint8_t> bits(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) bits[i] = rng.bernoulli(static_cast<double>(sigmoid(g[i]))) ? 1 : 0;
  return PruneMask(gate.shape(), std::move(bits));
}

PruneMask sample_round(const Tensor& gate) {
  auto g = gate.values();
  std::vector<std::uint8_t> bits(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) bits[i] = g[i] >= 0.0f ? 1 : 0;
  return PruneMask(gate.shape(), std::move(bits));
}

Tensor masked_forward(Graph& graph, const Tensor& weight, const PruneMask& mask) {
  if (weight.shape() != mask.shape())
    throw DimensionError("masked_forward: weight " + to_string(weight.shape()) + " vs mask " + to_string(mask.shape()));
  return graph.mul(weight, mask.as_tensor());
}

std::vector<float> ste_gate_grad(std::span<const float> upstream, std::span<const float> gate) {
  if (upstream.size() != gate.size()) throw DimensionError("ste_gate_grad: size mismatch");
  std::vector<float> out(gate.size());
  for (std::size_t i = 0; i < gate.size(); ++i) {
    const float s = sigmoid(gate[i]);
    out[i] = upstream[i] * (s * (1.0f - s));
  }
  return out;
}

GatedParameter::GatedParameter(Tensor weight, float init, GateMode mode)
    : GatedParameter(weight, Tensor::full(weight.shape(), init), mode) {}

GatedParameter::GatedParameter(Tensor weight, Tensor gate, GateMode mode)
    : weight_(std::move(weight)), gate_(std::move(gate)), mode_(mode) {
  if (mode_ == GateMode::finalized) throw LifecycleError("a gated parameter cannot be constructed finalized");
  if (weight_.shape() != gate_.shape())
    throw DimensionError("gate shape " + to_string(gate_.shape()) + " must equal weight shape " +
                         to_string(weight_.shape()));
  gate_.set_requires_grad(gate_trainable());
}

Tensor& GatedParameter::gate() {
  if (mode_ == GateMode::finalized) throw LifecycleError("gate discarded after finalization");
  return gate_;
}

const Tensor& GatedParameter::gate() const {
  if (mode_ == GateMode::finalized) throw LifecycleError("gate discarded after finalization");
  return gate_;
}

void GatedParameter::set_mode(GateMode mode) {
  if (mode_ == GateMode::finalized) throw LifecycleError("finalized parameter cannot change mode");
  if (mode == GateMode::finalized) throw LifecycleError("use finalize() to finalize a gated parameter");
  mode_ = mode;
  gate_.set_requires_grad(gate_trainable());
}

PruneMask GatedParameter::sample_bern(Rng& rng) const {
  if (mode_ == GateMode::finalized) throw LifecycleError("sample_bern on a finalized parameter");
  return smp::sample_bern(gate_, rng);
}

PruneMask GatedParameter::sample_round() const {
  if (mode_ == GateMode::finalized) throw LifecycleError("sample_round on a finalized parameter");
  return smp::sample_round(gate_);
}

PruneMask GatedParameter::sample(Rng& rng, SampleKind frozen_kind) const {
  switch (mode_) {
    case GateMode::train_bern: return sample_bern(rng);
    case GateMode::train_round: return sample_round();
    case GateMode::frozen_gate: return frozen_kind == SampleKind::bernoulli ? sample_bern(rng) : sample_round();
    case GateMode::finalized: break;
  }
  throw LifecycleError("sample on a finalized parameter");
}

void GatedParameter::finalize() {
  if (mode_ == GateMode::finalized) throw LifecycleError("parameter already finalized");
  smp::sample_round(gate_).apply(weight_.values());
  mode_ = GateMode::finalized;
  gate_ = Tensor();
}

GatedParameter GatedParameter::rebind(Tensor weight) const {
  GatedParameter copy;
  copy.weight_ = std::move(weight);
  copy.mode_ = mode_;
  if (mode_ != GateMode::finalized) {
    if (copy.weight_.shape() != gate_.shape()) throw DimensionError("rebind: weight shape differs from gate");
    copy.gate_ = gate_.clone();
  }
  return copy;
}

GatedForward gated_forward(Graph& graph, GatedParameter& param, const PruneMask& mask) {
  if (param.mode() == GateMode::finalized) throw LifecycleError("gated_forward on a finalized parameter");
  if (mask.shape() != param.weight().shape()) throw DimensionError("gated_forward: mask shape mismatch");
  GatedForward out;
  out.probs = graph.sigmoid(param.gate());
  out.sample = graph.ste_sample(out.probs, mask.as_tensor());
  out.effective = graph.mul(param.weight(), out.sample);
  out.mask = mask;
  return out;
}

NnzCount count_nnz(std::span<const Tensor> gates) {
  NnzCount c;
  for (const auto& g : gates) {
    for (float v : g.values()) c.nnz += v >= 0.0f ? 1 : 0;
    c.total += g.numel();
  }
  return c;
}

}  // namespace smp
