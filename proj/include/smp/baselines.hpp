// SPDX-License-Identifier: Apache-2.0
#pragma once

// Comparison pruners: one-shot magnitude pruning (class-blind, class-uniform,
// class-distribution), gradual magnitude pruning on a cubic ramp, SNIP
// connection sensitivity, one-shot lottery-ticket rewinding and mask-only
// supermask training.

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "smp/dataset.hpp"
#include "smp/gating.hpp"
#include "smp/model.hpp"
#include "smp/smp.hpp"
#include "smp/train.hpp"

namespace smp {

enum class PrunerKind {
  hard_blind,
  hard_uniform,
  hard_distribution,
  gradual_uniform,
  snip,
  lottery,
  supermask_maskonly,
};

PrunerKind parse_pruner_kind(const std::string& name);
const char* to_string(PrunerKind kind) noexcept;

struct GradualWindow {
  std::size_t start = 0;
  std::size_t end = 0;
  std::size_t frequency = 1;
};

struct PrunerSpec {
  PrunerKind kind = PrunerKind::hard_blind;
  double s_target = 0.0;
  /// Threshold factor for hard_distribution; unset means calibrate it to
  /// s_target.
  std::optional<double> lambda_c;
  /// Required for gradual_uniform, forbidden otherwise.
  std::optional<GradualWindow> window;
  /// Inner pruner of a lottery spec.
  std::shared_ptr<const PrunerSpec> inner;
  /// Retraining budget as a fraction of the original training steps.
  double retrain_fraction = 1.0 / 3.0;
  /// Batches accumulated by SNIP.
  std::size_t snip_batches = 1;

  /// Throws ConfigError when the fields do not fit the kind.
  void validate() const;
};

// ---------------------------------------------------------------------------
// Mask computation on plain weight lists. Masks are aligned with `weights`.
// Magnitude ties at the cut are pruned in ascending flat index order.

std::vector<PruneMask> magnitude_prune_blind(std::span<const Tensor> weights, double s_target);
std::vector<PruneMask> magnitude_prune_uniform(std::span<const Tensor> weights, double s_target);
std::vector<PruneMask> magnitude_prune_distribution(std::span<const Tensor> weights, double lambda_c);

/// Population standard deviation of a tensor's values.
double tensor_stddev(const Tensor& t);

/// Bisection on the distribution factor so the global sparsity lands within
/// `tol` of s_target. Returns the closest factor found.
double calibrate_distribution_factor(std::span<const Tensor> weights, double s_target, double tol = 0.005);

/// Fraction of pruned entries across masks.
double mask_sparsity(std::span<const PruneMask> masks);

/// s_f * (1 - (1 - clamp((t - t0) / (t_end - t0), 0, 1))^3).
double gradual_schedule(std::size_t t, std::size_t t0, std::size_t t_end, double s_f);

/// Raises every tensor's sparsity to floor(s_t * size) pruned entries,
/// keeping earlier pruned positions pruned. Throws ContractError when s_t is
/// below `s_prev`.
void gradual_prune_step(std::span<const Tensor> weights, std::span<PruneMask> masks, double s_prev, double s_t);

// ---------------------------------------------------------------------------
// Model-level helpers. `parts` selects which prunable tensors participate.

std::vector<std::size_t> prunable_indices(const CaptionModel& model, std::span<const Part> parts);
std::vector<Tensor> prunable_weights(const CaptionModel& model, std::span<const Part> parts);
/// Stores each mask on its parameter and zeroes the pruned weights.
void apply_masks(CaptionModel& model, std::span<const Part> parts, std::span<const PruneMask> masks);

/// One-shot masks for a hard_* spec on the current weights.
std::vector<PruneMask> hard_masks(const CaptionModel& model, const PrunerSpec& spec, std::span<const Part> parts);

/// Gradual magnitude pruning during training; prunes after the weight update
/// on every scheduled step.
class GradualHook : public TrainHook {
 public:
  GradualHook(PrunerSpec spec, std::vector<Part> parts);

  void on_begin(CaptionModel& model, const TrainOptions& options) override;
  void after_update(CaptionModel& model, const StepContext& ctx) override;

  /// (step, scheduled sparsity) of every pruning event.
  const std::vector<std::pair<std::size_t, double>>& events() const noexcept { return events_; }

 private:
  PrunerSpec spec_;
  std::vector<Part> parts_;
  std::vector<PruneMask> masks_;
  double last_ = 0.0;
  std::vector<std::pair<std::size_t, double>> events_;
};

/// |dL/dc| for multiplicative all-ones masks c, summed over batches and
/// divided by the total. Aligned with prunable_indices(model, parts).
/// Throws DomainError when every saliency is zero.
std::vector<std::vector<double>> snip_saliency(const CaptionModel& model, std::span<const Batch> batches,
                                               std::span<const Part> parts);
/// Keeps the p_total - floor(s * p_total) most salient connections globally.
std::vector<PruneMask> snip_masks(std::span<const std::vector<double>> saliency, std::span<const Tensor> weights,
                                  double s_target);
std::vector<PruneMask> snip_prune(const CaptionModel& model, std::span<const Batch> batches, double s_target,
                                  std::span<const Part> parts);

/// Copy of every parameter value keyed by name, taken before training.
class InitSnapshot {
 public:
  static InitSnapshot capture(const CaptionModel& model);
  const std::map<std::string, std::vector<float>>& values() const noexcept { return values_; }
  bool contains(const std::string& name) const { return values_.count(name) != 0; }

 private:
  std::map<std::string, std::vector<float>> values_;
};

/// Masks the trained model with `inner` and rewinds every parameter to its
/// snapshot value, pruned weights staying zero. Throws ContractError when the
/// snapshot lacks a parameter.
std::vector<PruneMask> lottery_oneshot(CaptionModel& model, const InitSnapshot& init, const PrunerSpec& inner,
                                       std::span<const Part> parts);

struct MaskOnlyResult {
  FinalizeReport report;
  std::vector<TelemetryRecord> telemetry;
};

/// Trains gates only: weights are frozen and no sparsity loss is applied.
/// Gates are finalized at the end.
MaskOnlyResult supermask_maskonly_train(CaptionModel& model, const Dataset& data, const TrainOptions& options,
                                        const SmpConfig& config, std::span<const Part> parts);

/// Applies the hard masks of `spec` to a trained model, then retrains with
/// the masks fixed for retrain_fraction * options.steps steps.
std::vector<PruneMask> hard_prune_retrain(CaptionModel& model, const Dataset& data, const PrunerSpec& spec,
                                          const TrainOptions& options, std::span<const Part> parts);

}  // namespace smp
