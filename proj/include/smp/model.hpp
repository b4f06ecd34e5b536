// SPDX-License-Identifier: Apache-2.0
#pragma once

// Desk-scale captioning models: a small region encoder followed by either a
// soft-attention recurrent decoder (LSTM or GRU) or a single-block
// transformer. All learnable tensors live in one registry that separates
// prunable weights from biases and normalisation parameters.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smp/dataset.hpp"
#include "smp/gating.hpp"
#include "smp/graph.hpp"
#include "smp/rng.hpp"
#include "smp/tensor.hpp"

namespace smp {

enum class Arch { sa_lstm, sa_gru, mini_transformer };
enum class Part { encoder, decoder };
enum class ParamRole { prunable, excluded };

Arch parse_arch(const std::string& name);
const char* to_string(Arch arch) noexcept;
const char* to_string(Part part) noexcept;

struct ModelDims {
  std::size_t feature_dim = kRegionFeatures;
  std::size_t regions = 6;
  std::size_t encoder_dim = 48;
  std::size_t embed_dim = 24;
  std::size_t hidden_dim = 96;
  std::size_t attention_dim = 32;
  std::size_t vocab = vocab::size;
  std::size_t max_len = 8;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  float dropout = 0.0f;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct Parameter {
  std::string name;
  Part part = Part::decoder;
  ParamRole role = ParamRole::prunable;
  Tensor value;
  /// Present while the weight is gated (supermask training or finalized).
  std::optional<GatedParameter> gated;
  /// Fixed hard mask used by magnitude, gradual, SNIP and lottery pruning.
  std::optional<PruneMask> mask;

  bool prunable() const noexcept { return role == ParamRole::prunable; }
};

class ParameterRegistry {
 public:
  std::size_t add(std::string name, Part part, ParamRole role, Tensor value);

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return params_.at(i); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }
  std::size_t index(const std::string& name) const;
  Parameter& find(const std::string& name) { return params_.at(index(name)); }
  const Parameter& find(const std::string& name) const { return params_.at(index(name)); }

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

  /// Deep copy: values, gates and masks are duplicated.
  ParameterRegistry clone() const;

  std::size_t total_count() const noexcept;
  std::size_t prunable_count() const noexcept;
  std::size_t excluded_count() const noexcept;

 private:
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> by_name_;
};

/// Effective weights for one training step, aligned with the registry.
struct StepWeights {
  std::vector<Tensor> effective;
  /// Gate nodes for gated entries (empty optional otherwise).
  std::vector<std::optional<GatedForward>> gated;
};

/// Records W * mask for every gated or hard-masked parameter. Gated entries
/// are sampled according to their mode; frozen gates use `frozen_kind`.
StepWeights materialize(Graph& graph, ParameterRegistry& registry, Rng& rng,
                        SampleKind frozen_kind = SampleKind::bernoulli);

/// Constant weights for inference: gated weights use the ML draw, hard masks
/// are applied, everything else is used as is.
std::vector<Tensor> inference_weights(const ParameterRegistry& registry);

struct FlopCount {
  double dense = 0.0;   // every multiply-add of a dense model
  double sparse = 0.0;  // multiply-adds with zero weights skipped
};

class CaptionModel {
 public:
  CaptionModel(Arch arch, ModelDims dims, ParameterRegistry registry);

  Arch arch() const noexcept { return arch_; }
  const ModelDims& dims() const noexcept { return dims_; }
  /// Dropout on decoder outputs during training; ConfigError outside [0, 1).
  void set_dropout(float p);
  ParameterRegistry& params() noexcept { return registry_; }
  const ParameterRegistry& params() const noexcept { return registry_; }

  /// Teacher-forced logits, time-major rows: [steps*batch x vocab].
  Tensor forward(Graph& graph, std::span<const Tensor> weights, const Batch& batch, Rng* dropout_rng) const;
  /// Greedy decoding; each caption ends at (and includes) eos or is cut at
  /// max_len tokens.
  std::vector<std::vector<int>> greedy(std::span<const Tensor> weights, const Batch& batch) const;
  /// Analytic multiply-add count for encoding one scene and greedily
  /// decoding `caption_len` tokens, times two.
  FlopCount flops(std::span<const Tensor> weights, std::size_t caption_len) const;

  CaptionModel clone() const;

 private:
  const Tensor& w(std::span<const Tensor> weights, const std::string& name) const;
  Tensor forward_recurrent(Graph& g, std::span<const Tensor> ws, const Batch& b, Rng* rng) const;
  Tensor forward_transformer(Graph& g, std::span<const Tensor> ws, const Batch& b, Rng* rng) const;
  std::vector<std::vector<int>> greedy_recurrent(std::span<const Tensor> ws, const Batch& b) const;
  std::vector<std::vector<int>> greedy_transformer(std::span<const Tensor> ws, const Batch& b) const;
  Tensor encode(Graph& g, std::span<const Tensor> ws, const Batch& b) const;

  Arch arch_;
  ModelDims dims_;
  ParameterRegistry registry_;
};

/// Builds encoder and decoder with Glorot-uniform weights drawn from `seed`.
CaptionModel build_model(Arch arch, const ModelDims& dims, std::uint64_t seed);

/// Closed-form learnable parameter count for (arch, dims).
std::size_t expected_parameter_count(Arch arch, const ModelDims& dims);

/// Wraps every prunable weight of the selected parts in a GatedParameter
/// initialised to `init`. Parameters that are already gated are left alone.
void attach_gates(CaptionModel& model, float init, std::span<const Part> parts,
                  GateMode mode = GateMode::train_bern);

/// Zeroes weights at pruned positions and stores the mask.
void apply_mask(Parameter& param, PruneMask mask);

/// Freezes or unfreezes the weights (and biases) of one part.
void set_trainable(CaptionModel& model, Part part, bool trainable);

}  // namespace smp
