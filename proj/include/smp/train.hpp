// SPDX-License-Identifier: Apache-2.0
#pragma once

// Teacher-forced training loop with cosine learning-rate decay and hooks for
// the pruning methods, plus evaluation and cost accounting.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "smp/dataset.hpp"
#include "smp/model.hpp"
#include "smp/optim.hpp"

namespace smp {

struct TrainOptions {
  std::size_t steps = 0;
  std::size_t batch_size = 32;
  AdamConfig adam{};
  bool cosine = true;
  float min_lr = 0.0f;
  std::uint64_t seed = 0;
  /// Abort when the task loss exceeds this multiple of its first value.
  float divergence_factor = 10.0f;
  /// Lower bound on the reference loss for the divergence check. Phases that
  /// continue from a trained model start near zero loss; the harness passes
  /// the loss of a uniform predictor, log(vocab), as the from-scratch scale.
  float divergence_floor = 0.0f;
  /// Sampling used by gates in frozen_gate mode.
  SampleKind frozen_kind = SampleKind::bernoulli;
};

struct StepContext {
  std::size_t step = 0;   // 0-based index of the step being run
  std::size_t total = 0;  // planned number of steps
  float lr = 0.0f;
  float xe_loss = 0.0f;
  const StepWeights* weights = nullptr;
};

/// Per-step callbacks. Hooks run in registration order.
class TrainHook {
 public:
  virtual ~TrainHook() = default;
  virtual void on_begin(CaptionModel&, const TrainOptions&) {}
  /// Additional loss term added to the task loss; an undefined tensor means
  /// none. Called after the forward pass and the task loss.
  virtual Tensor extra_loss(Graph&, CaptionModel&, const StepContext&) { return {}; }
  /// Called after the weight update of every step.
  virtual void after_update(CaptionModel&, const StepContext&) {}
  virtual void on_end(CaptionModel&) {}
};

struct TrainResult {
  std::vector<float> xe_loss;  // one entry per step
  std::size_t steps = 0;
};

/// Runs `options.steps` Adam steps on every weight that requires grad.
/// Gated weights are sampled per their mode, hard masks are re-applied after
/// each update. Throws TrainingError on NaN or diverging loss.
TrainResult train(CaptionModel& model, const Dataset& data, const TrainOptions& options,
                  std::span<TrainHook* const> hooks = {});

struct CaptionStats {
  double unique_fraction = 0.0;
  double avg_length = 0.0;  // words, end token excluded
};

struct EvalResult {
  double token_accuracy = 0.0;  // teacher-forced argmax over non-pad targets
  double exact_match = 0.0;     // greedy caption equals the reference
  double xe_loss = 0.0;
  CaptionStats caption_stats;
};

/// Evaluates the inference weights (gates under the ML draw) on a split.
EvalResult evaluate(const CaptionModel& model, std::span<const SceneSample> samples, std::size_t batch_size = 256);

struct CostReport {
  std::size_t nnz = 0;            // nonzero prunable weights plus every excluded parameter
  std::size_t p_total = 0;        // all learnable parameters
  std::size_t prunable_nnz = 0;
  std::size_t prunable_total = 0;
  double flops_dense = 0.0;
  double flops_per_caption = 0.0;  // zero weights skipped
  std::size_t caption_len = 0;
  std::string decoding = "greedy";
};

CostReport cost_report(const CaptionModel& model, std::size_t caption_len = 9);

/// Global and per-tensor sparsity of the inference weights over prunable
/// tensors.
struct SparsityReport {
  double global = 0.0;
  std::size_t nnz = 0;
  std::size_t total = 0;
  std::vector<std::string> names;
  std::vector<double> layer;
};

SparsityReport sparsity_report(const CaptionModel& model);

}  // namespace smp
