// SPDX-License-Identifier: Apache-2.0
#pragma once

// Supermask pruning objective: annealed sparsity loss on the ML-draw density
// of the gates, added to the task loss, with gates updated by their own
// constant learning rate.

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smp/gating.hpp"
#include "smp/graph.hpp"
#include "smp/model.hpp"
#include "smp/train.hpp"

namespace smp {

/// alpha = 1 - (1 + cos(n pi / n_max)) / 2. Steps beyond n_max clamp to 1
/// with a warning on stderr.
double anneal_alpha(std::size_t n, std::size_t n_max);

/// max(5, 0.5 / (1 - s_target)); DomainError for s_target >= 1.
double default_lambda(double s_target);

/// alpha * |s_target - (1 - p_nnz / p_total)| as a plain number.
double sparsity_loss_value(std::size_t p_nnz, std::size_t p_total, double s_target, double alpha);

/// Recorded sparsity loss over gate tensors. The density term is the ML draw
/// of sigmoid(G) (kept iff g >= 0) with a straight-through gradient.
Tensor sparsity_loss(Graph& graph, std::span<const Tensor> gates, double s_target, double alpha);

/// L_c + lambda * L_s.
Tensor total_loss(Graph& graph, const Tensor& task_loss, const Tensor& sparsity, double lambda);

enum class GateOptimizer { sgd, adam };
GateOptimizer parse_gate_optimizer(const std::string& name);
const char* to_string(GateOptimizer opt) noexcept;

struct SmpConfig {
  double s_target = 0.8;
  /// Unset means default_lambda(s_target).
  std::optional<double> lambda;
  float gate_lr = 100.0f;
  float m = 5.0f;
  GateOptimizer gate_optimizer = GateOptimizer::sgd;
  /// Adam settings when gate_optimizer is adam (lr comes from gate_lr).
  AdamConfig gate_adam{};
  /// Disable the sparsity loss entirely (mask-only training).
  bool sparsity_loss = true;
  /// Prunable parameters matching this predicate are left ungated.
  std::function<bool(const std::string&)> exclude;

  double resolved_lambda() const { return lambda ? *lambda : default_lambda(s_target); }
};

struct TelemetryRecord {
  std::size_t step = 0;
  double xe_loss = 0.0;
  double weighted_sparsity_loss = 0.0;
  double gate_mean = 0.0;
  double sparsity = 0.0;
  /// Filled every `layer_every` steps.
  std::vector<double> layer_sparsity;
};

void write_ndjson(std::ostream& os, const TelemetryRecord& rec);

/// Wraps the prunable weights of `parts` in gates initialised to config.m.
void attach_smp_gates(CaptionModel& model, const SmpConfig& config, std::span<const Part> parts);

/// Training hook implementing one SMP step: the sparsity loss over all
/// trainable gates is added to the task loss and gates are updated after the
/// weights.
class SmpHook : public TrainHook {
 public:
  explicit SmpHook(SmpConfig config, std::size_t layer_every = 100);

  void on_begin(CaptionModel& model, const TrainOptions& options) override;
  Tensor extra_loss(Graph& graph, CaptionModel& model, const StepContext& ctx) override;
  void after_update(CaptionModel& model, const StepContext& ctx) override;

  const std::vector<TelemetryRecord>& telemetry() const noexcept { return telemetry_; }
  const SmpConfig& config() const noexcept { return config_; }

 private:
  SmpConfig config_;
  std::size_t layer_every_;
  std::size_t n_max_ = 0;
  std::vector<std::size_t> gated_;
  Adam gate_adam_;
  TelemetryRecord pending_;
  std::vector<TelemetryRecord> telemetry_;
};

struct FinalizeReport {
  double global_sparsity = 0.0;
  std::size_t nnz = 0;
  std::size_t total = 0;
  std::vector<std::string> names;
  std::vector<double> layer_sparsity;
};

/// Finalizes every gated parameter (W <- W * round(sigmoid(G))) and records
/// the ML-draw mask as the parameter's hard mask. Throws LifecycleError when
/// a gate is already finalized.
FinalizeReport smp_finalize(CaptionModel& model);

}  // namespace smp
