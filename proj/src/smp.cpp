// SPDX-License-Identifier: Apache-2.0
#include "smp/smp.hpp"

#include <cmath>
#include <iostream>
#include <numbers>

#include "smp/errors.hpp"

namespace smp {

double anneal_alpha(std::size_t n, std::size_t n_max) {
  if (n_max == 0) throw DomainError("anneal_alpha: n_max must be positive");
  if (n > n_max) {
    std::cerr << "warning: anneal step " << n << " beyond n_max " << n_max << ", alpha clamped to 1\n";
    return 1.0;
  }
  if (n == n_max) return 1.0;
  return 1.0 - 0.5 * (1.0 + std::cos(static_cast<double>(n) * std::numbers::pi / static_cast<double>(n_max)));
}

double default_lambda(double s_target) {
  if (!(s_target < 1.0)) throw DomainError("default_lambda: s_target must be below 1");
  return std::max(5.0, 0.5 / (1.0 - s_target));
}

double sparsity_loss_value(std::size_t p_nnz, std::size_t p_total, double s_target, double alpha) {
  if (p_total == 0) throw DomainError("sparsity loss over zero parameters");
  const double current = 1.0 - static_cast<double>(p_nnz) / static_cast<double>(p_total);
  return alpha * std::abs(s_target - current);
}

Tensor sparsity_loss(Graph& graph, std::span<const Tensor> gates, double s_target, double alpha) {
  std::size_t total = 0;
  std::vector<Tensor> counts;
  counts.reserve(gates.size());
  for (const Tensor& g : gates) {
    Tensor rounded = graph.ste_sample(graph.sigmoid(g), sample_round(g).as_tensor());
    counts.push_back(graph.sum(rounded));
    total += g.numel();
  }
  if (total == 0) throw DomainError("sparsity loss over zero parameters");
  Tensor nnz = counts.size() == 1 ? counts.front() : graph.add_n(counts);
  // s_target - (1 - nnz / total) = nnz / total - (1 - s_target)
  Tensor diff = graph.add_scalar(graph.scale(nnz, static_cast<float>(1.0 / static_cast<double>(total))),
                                 static_cast<float>(s_target - 1.0));
  return graph.scale(graph.abs(diff), static_cast<float>(alpha));
}

Tensor total_loss(Graph& graph, const Tensor& task_loss, const Tensor& sparsity, double lambda) {
  if (lambda == 0.0) return task_loss;
  const Tensor terms[] = {task_loss, graph.scale(sparsity, static_cast<float>(lambda))};
  return graph.add_n(terms);
}

GateOptimizer parse_gate_optimizer(const std::string& name) {
  if (name == "sgd") return GateOptimizer::sgd;
  if (name == "adam") return GateOptimizer::adam;
  throw ConfigError("unknown gate optimizer '" + name + "' (expected sgd or adam)");
}

const char* to_string(GateOptimizer opt) noexcept { return opt == GateOptimizer::sgd ? "sgd" : "adam"; }

void write_ndjson(std::ostream& os, const TelemetryRecord& rec) {
  auto num = [&os](double v) {
    if (std::isfinite(v))
      os << v;
    else
      os << "null";
  };
  const auto old = os.precision(9);
  os << "{\"step\":" << rec.step << ",\"xe_loss\":";
  num(rec.xe_loss);
  os << ",\"weighted_sparsity_loss\":";
  num(rec.weighted_sparsity_loss);
  os << ",\"gate_mean\":";
  num(rec.gate_mean);
  os << ",\"sparsity\":";
  num(rec.sparsity);
  if (!rec.layer_sparsity.empty()) {
    os << ",\"layer_sparsity\":[";
    for (std::size_t i = 0; i < rec.layer_sparsity.size(); ++i) {
      if (i) os << ',';
      num(rec.layer_sparsity[i]);
    }
    os << ']';
  }
  os << "}\n";
  os.precision(old);
}

void attach_smp_gates(CaptionModel& model, const SmpConfig& config, std::span<const Part> parts) {
  for (auto& p : model.params()) {
    if (!p.prunable() || p.gated) continue;
    if (std::find(parts.begin(), parts.end(), p.part) == parts.end()) continue;
    if (config.exclude && config.exclude(p.name)) continue;
    if (p.mask) throw ContractError("attach_smp_gates: " + p.name + " already carries a hard mask");
    p.gated.emplace(p.value, config.m, GateMode::train_bern);
  }
}

SmpHook::SmpHook(SmpConfig config, std::size_t layer_every)
    : config_(std::move(config)), layer_every_(layer_every), gate_adam_(config_.gate_adam) {
  if (config_.s_target < 0.0 || config_.s_target >= 1.0) throw ConfigError("s_target must be in [0, 1)");
  if (config_.resolved_lambda() < 0.0) throw ConfigError("lambda must be nonnegative");
}

void SmpHook::on_begin(CaptionModel& model, const TrainOptions& options) {
  n_max_ = options.steps;
  gated_.clear();
  auto& reg = model.params();
  for (std::size_t i = 0; i < reg.size(); ++i)
    if (reg[i].gated && reg[i].gated->gate_trainable()) gated_.push_back(i);
  telemetry_.clear();
  telemetry_.reserve(options.steps);
  gate_adam_ = Adam(AdamConfig{config_.gate_lr, config_.gate_adam.beta1, config_.gate_adam.beta2,
                               config_.gate_adam.eps});
}

Tensor SmpHook::extra_loss(Graph& graph, CaptionModel& model, const StepContext& ctx) {
  auto& reg = model.params();
  std::vector<Tensor> gates;
  gates.reserve(gated_.size());
  for (std::size_t i : gated_) gates.push_back(reg[i].gated->gate());
  pending_ = TelemetryRecord{};
  pending_.step = ctx.step;
  pending_.xe_loss = ctx.xe_loss;
  if (gates.empty()) return {};

  const NnzCount count = count_nnz(gates);
  pending_.sparsity = count.sparsity();
  double gsum = 0.0;
  for (const Tensor& g : gates)
    for (float v : g.values()) gsum += v;
  pending_.gate_mean = gsum / static_cast<double>(count.total);
  if (layer_every_ && ctx.step % layer_every_ == 0) {
    for (const Tensor& g : gates) {
      const Tensor one[] = {g};
      pending_.layer_sparsity.push_back(count_nnz(one).sparsity());
    }
  }
  if (!config_.sparsity_loss) return {};

  const double alpha = anneal_alpha(ctx.step, n_max_);
  const double lambda = config_.resolved_lambda();
  pending_.weighted_sparsity_loss = lambda * sparsity_loss_value(count.nnz, count.total, config_.s_target, alpha);
  if (lambda == 0.0 || alpha == 0.0) return {};
  return graph.scale(sparsity_loss(graph, gates, config_.s_target, alpha), static_cast<float>(lambda));
}

void SmpHook::after_update(CaptionModel& model, const StepContext&) {
  auto& reg = model.params();
  if (config_.gate_optimizer == GateOptimizer::sgd) {
    for (std::size_t i : gated_) sgd_step(reg[i].gated->gate(), config_.gate_lr);
  } else {
    std::vector<Tensor> gates;
    for (std::size_t i : gated_) gates.push_back(reg[i].gated->gate());
    gate_adam_.step(gates, config_.gate_lr);
  }
  telemetry_.push_back(std::move(pending_));
}

FinalizeReport smp_finalize(CaptionModel& model) {
  FinalizeReport r;
  for (const auto& p : model.params())
    if (p.gated && p.gated->mode() == GateMode::finalized)
      throw LifecycleError("smp_finalize: " + p.name + " is already finalized");
  for (auto& p : model.params()) {
    if (!p.gated) continue;
    PruneMask mask = p.gated->sample_round();
    r.names.push_back(p.name);
    r.layer_sparsity.push_back(mask.sparsity());
    r.nnz += mask.nnz();
    r.total += mask.size();
    p.gated->finalize();
    p.mask = std::move(mask);
  }
  r.global_sparsity = r.total ? 1.0 - static_cast<double>(r.nnz) / static_cast<double>(r.total) : 0.0;
  return r;
}

}  // namespace smp
