// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment orchestration: JSON configs with dotted overrides, per-seed runs
// under the prune-finetune schemes, sweeps and plot-data emission.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "smp/baselines.hpp"
#include "smp/model.hpp"
#include "smp/smp.hpp"

namespace smp {

enum class Scheme { decoder_only, A, B, C };
Scheme parse_scheme(const std::string& name);
const char* to_string(Scheme scheme) noexcept;

/// Fully resolved experiment description. Every field except `out` feeds the
/// config hash.
struct ExperimentConfig {
  std::string name = "run";
  Arch arch = Arch::sa_lstm;
  ModelDims dims{};
  std::uint64_t dataset_seed = 1;
  std::size_t n_samples = 4000;
  /// "dense", "smp" or a pruner kind.
  std::string method = "smp";
  double s_target = 0.8;
  std::optional<double> lambda;  // unset: default_lambda
  float m = 5.0f;
  float gate_lr = 1e4f;
  GateOptimizer gate_optimizer = GateOptimizer::sgd;
  SampleKind frozen_sampling = SampleKind::bernoulli;
  AdamConfig adam{3e-2f, 0.9f, 0.999f, 1e-2f};
  float min_lr = 0.0f;
  std::size_t steps = 1500;
  std::size_t batch_size = 32;
  float dropout = 0.0f;
  std::optional<float> sparse_dropout;  // unset: dropout / 2
  Scheme scheme = Scheme::decoder_only;
  std::vector<std::uint64_t> seeds{1};
  /// Dense joint training that produces the frozen pretrained encoder.
  std::size_t encoder_pretrain_steps = 1500;
  /// Fine-tuning phase of the schemes; 0 means steps / 3.
  std::size_t finetune_steps = 0;
  std::optional<float> finetune_lr;  // unset: adam.lr
  // Baseline parameters.
  std::size_t gradual_start = 0;  // 0 with gradual_end 0: steps / 30
  std::size_t gradual_end = 0;    // 0: steps / 2
  std::size_t gradual_frequency = 25;
  std::optional<double> distribution_factor;
  std::string lottery_inner = "hard_blind";
  std::size_t snip_batches = 1;
  double retrain_fraction = 1.0 / 3.0;
  std::string eval_split = "test";
  std::size_t caption_len = 9;
  std::filesystem::path out = "runs";

  void validate() const;
  float pruning_dropout() const { return sparse_dropout ? *sparse_dropout : dropout / 2.0f; }
  std::size_t resolved_finetune_steps() const { return finetune_steps ? finetune_steps : steps / 3; }
};

/// Built-in defaults as a JSON tree.
nlohmann::json default_config_json();
/// Applies "a.b.c=value" to a tree. Values parse as JSON when possible and
/// fall back to strings.
void apply_override(nlohmann::json& tree, const std::string& assignment);
/// Defaults merged with `tree`; unknown keys are a ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& tree);
nlohmann::json config_to_json(const ExperimentConfig& config);
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
/// FNV-1a 64 of the canonical JSON without the output directory, as hex.
std::string config_hash(const ExperimentConfig& config);

struct SeedMetrics {
  std::uint64_t seed = 0;
  double token_accuracy = 0.0;
  double exact_match = 0.0;
  double xe_loss = 0.0;
  double unique_fraction = 0.0;
  double avg_length = 0.0;
  double sparsity = 0.0;          // prunable tensors of the whole model
  double encoder_sparsity = 0.0;
  double decoder_sparsity = 0.0;
  std::size_t nnz = 0;            // cost-report NNZ (excluded params included)
  std::size_t prunable_nnz = 0;
  double flops = 0.0;
  double flops_dense = 0.0;
  std::size_t checkpoint_bytes = 0;
  std::vector<std::string> telemetry;  // one file per phase, in phase order
  std::string checkpoint;
  std::optional<std::string> error;
};

nlohmann::json to_json(const SeedMetrics& m);
SeedMetrics seed_metrics_from_json(const nlohmann::json& j);

struct RunReport {
  std::string name;
  std::string config_hash;
  ExperimentConfig config;
  std::vector<SeedMetrics> seeds;
  /// mean and population standard deviation over successful seeds.
  std::map<std::string, std::pair<double, double>> summary;
};

nlohmann::json to_json(const RunReport& r);

/// Trains, prunes, evaluates and saves one seed; files go to `dir`.
SeedMetrics run_seed(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& dir);

/// Runs every seed of a config under config.out / config.name and writes
/// report.json. Dispatches on the scheme.
RunReport run_experiment(const ExperimentConfig& config);
RunReport run_scheme_A(const ExperimentConfig& config);
RunReport run_scheme_B(const ExperimentConfig& config);
RunReport run_scheme_C(const ExperimentConfig& config);

/// Mean/std fold over seed metrics.
std::map<std::string, std::pair<double, double>> summarize(const std::vector<SeedMetrics>& seeds);

struct SweepResult {
  std::vector<RunReport> runs;
  std::filesystem::path csv;          // one row per (config, seed)
  std::filesystem::path summary_csv;  // one row per config
};

/// Runs every (config, seed) pair, in up to `jobs` child processes; failed
/// runs are recorded and the sweep continues. Aggregates are written to
/// `out`.
SweepResult run_sweep(const std::vector<ExperimentConfig>& configs, const std::filesystem::path& out, int jobs = 1);

/// Writes layer_sparsity.csv, progression.csv and weight_histogram.csv for a
/// seed directory holding model.smpc and telemetry. Throws when telemetry is
/// missing.
std::vector<std::filesystem::path> emit_figures_data(const std::filesystem::path& seed_dir);

}  // namespace smp
