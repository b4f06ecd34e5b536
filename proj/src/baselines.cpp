// SPDX-License-Identifier: Apache-2.0
#include "smp/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "smp/errors.hpp"

namespace smp {

namespace {

constexpr struct {
  PrunerKind kind;
  const char* name;
} kKindNames[] = {
    {PrunerKind::hard_blind, "hard_blind"},
    {PrunerKind::hard_uniform, "hard_uniform"},
    {PrunerKind::hard_distribution, "hard_distribution"},
    {PrunerKind::gradual_uniform, "gradual_uniform"},
    {PrunerKind::snip, "snip"},
    {PrunerKind::lottery, "lottery"},
    {PrunerKind::supermask_maskonly, "supermask_maskonly"},
};

bool is_hard(PrunerKind k) {
  return k == PrunerKind::hard_blind || k == PrunerKind::hard_uniform || k == PrunerKind::hard_distribution;
}

void check_target(double s) {
  if (!(s >= 0.0 && s < 1.0)) throw DomainError("sparsity target must be in [0, 1)");
}

std::size_t floor_count(double s, std::size_t n) {
  return static_cast<std::size_t>(std::floor(s * static_cast<double>(n)));
}

// Prunes the `count` lowest (score, flat index) pairs of a flat list spread
// over the given tensors; equal scores go in ascending index order.
template <typename Score>
std::vector<PruneMask> prune_lowest(std::span<const Tensor> weights, std::vector<std::pair<Score, std::size_t>> items,
                                    std::size_t count) {
  std::vector<PruneMask> masks;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& w : weights) {
    masks.push_back(PruneMask::ones(w.shape()));
    offsets.push_back(off);
    off += w.numel();
  }
  if (count > items.size()) count = items.size();
  std::nth_element(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(count), items.end());
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t flat = items[i].second;
    const auto t = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
    masks[t].set(flat - offsets[t], false);
  }
  return masks;
}

}  // namespace

PrunerKind parse_pruner_kind(const std::string& name) {
  for (const auto& k : kKindNames)
    if (name == k.name) return k.kind;
  throw ConfigError("unknown pruner kind '" + name + "'");
}

const char* to_string(PrunerKind kind) noexcept {
  for (const auto& k : kKindNames)
    if (kind == k.kind) return k.name;
  return "?";
}

void PrunerSpec::validate() const {
  if (!(s_target >= 0.0 && s_target < 1.0)) throw ConfigError("pruner s_target must be in [0, 1)");
  if (kind == PrunerKind::gradual_uniform) {
    if (!window) throw ConfigError("gradual_uniform needs a schedule window");
    if (window->start >= window->end) throw ConfigError("gradual window start must precede end");
    if (window->frequency == 0) throw ConfigError("gradual frequency must be positive");
  } else if (window) {
    throw ConfigError(std::string("schedule window given for ") + to_string(kind));
  }
  if (kind == PrunerKind::lottery) {
    if (!inner) throw ConfigError("lottery needs an inner pruner");
    if (inner->kind == PrunerKind::lottery) throw ConfigError("lottery cannot wrap another lottery");
    inner->validate();
  } else if (inner) {
    throw ConfigError(std::string("inner pruner given for ") + to_string(kind));
  }
  if (lambda_c && *lambda_c < 0.0) throw ConfigError("lambda_c must be nonnegative");
  if (!(retrain_fraction >= 0.0)) throw ConfigError("retrain_fraction must be nonnegative");
  if (kind == PrunerKind::snip && snip_batches == 0) throw ConfigError("snip needs at least one batch");
}

// ---------------------------------------------------------------------------

std::vector<PruneMask> magnitude_prune_blind(std::span<const Tensor> weights, double s_target) {
  check_target(s_target);
  std::vector<std::pair<float, std::size_t>> items;
  std::size_t flat = 0;
  for (const Tensor& w : weights)
    for (float v : w.values()) items.emplace_back(std::abs(v), flat++);
  return prune_lowest(weights, std::move(items), floor_count(s_target, flat));
}

std::vector<PruneMask> magnitude_prune_uniform(std::span<const Tensor> weights, double s_target) {
  check_target(s_target);
  std::vector<PruneMask> masks;
  for (const Tensor& w : weights) {
    std::vector<std::pair<float, std::size_t>> items;
    std::size_t i = 0;
    for (float v : w.values()) items.emplace_back(std::abs(v), i++);
    const Tensor one[] = {w};
    masks.push_back(prune_lowest(one, std::move(items), floor_count(s_target, w.numel())).front());
  }
  return masks;
}

double tensor_stddev(const Tensor& t) {
  auto v = t.values();
  double mean = 0.0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (float x : v) var += (x - mean) * (x - mean);
  return std::sqrt(var / static_cast<double>(v.size()));
}

std::vector<PruneMask> magnitude_prune_distribution(std::span<const Tensor> weights, double lambda_c) {
  if (!(lambda_c >= 0.0)) throw DomainError("lambda_c must be nonnegative");
  std::vector<PruneMask> masks;
  for (const Tensor& w : weights) {
    const double threshold = lambda_c * tensor_stddev(w);
    PruneMask m = PruneMask::ones(w.shape());
    auto v = w.values();
    for (std::size_t i = 0; i < v.size(); ++i)
      if (std::abs(static_cast<double>(v[i])) < threshold) m.set(i, false);
    masks.push_back(std::move(m));
  }
  return masks;
}

double mask_sparsity(std::span<const PruneMask> masks) {
  std::size_t nnz = 0, total = 0;
  for (const auto& m : masks) {
    nnz += m.nnz();
    total += m.size();
  }
  return total ? 1.0 - static_cast<double>(nnz) / static_cast<double>(total) : 0.0;
}

double calibrate_distribution_factor(std::span<const Tensor> weights, double s_target, double tol) {
  check_target(s_target);
  auto sparsity_at = [&](double f) {
    const auto m = magnitude_prune_distribution(weights, f);
    return mask_sparsity(m);
  };
  double lo = 0.0, hi = 1.0;
  while (sparsity_at(hi) < s_target && hi < 1e6) hi *= 2.0;
  double best = hi, best_err = std::abs(sparsity_at(hi) - s_target);
  for (int it = 0; it < 100 && best_err > tol / 4; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double s = sparsity_at(mid);
    if (std::abs(s - s_target) < best_err) {
      best = mid;
      best_err = std::abs(s - s_target);
    }
    (s < s_target ? lo : hi) = mid;
  }
  return best;
}

double gradual_schedule(std::size_t t, std::size_t t0, std::size_t t_end, double s_f) {
  if (t0 >= t_end) throw DomainError("gradual_schedule: t0 must precede t_end");
  double x = (static_cast<double>(t) - static_cast<double>(t0)) / static_cast<double>(t_end - t0);
  x = std::clamp(x, 0.0, 1.0);
  const double r = 1.0 - x;
  return s_f * (1.0 - r * r * r);
}

void gradual_prune_step(std::span<const Tensor> weights, std::span<PruneMask> masks, double s_prev, double s_t) {
  check_target(s_t);
  if (s_t < s_prev) throw ContractError("gradual_prune_step: sparsity may not decrease");
  if (weights.size() != masks.size()) throw DimensionError("gradual_prune_step: masks do not match weights");
  for (std::size_t t = 0; t < weights.size(); ++t) {
    const Tensor& w = weights[t];
    PruneMask& mask = masks[t];
    if (mask.shape() != w.shape()) throw DimensionError("gradual_prune_step: mask shape mismatch");
    const std::size_t want = floor_count(s_t, w.numel());
    const std::size_t have = mask.size() - mask.nnz();
    if (want <= have) continue;
    std::vector<std::pair<float, std::size_t>> items;
    auto v = w.values();
    for (std::size_t i = 0; i < v.size(); ++i)
      if (mask.kept(i)) items.emplace_back(std::abs(v[i]), i);
    const std::size_t extra = want - have;
    std::nth_element(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(extra), items.end());
    for (std::size_t i = 0; i < extra; ++i) mask.set(items[i].second, false);
  }
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> prunable_indices(const CaptionModel& model, std::span<const Part> parts) {
  std::vector<std::size_t> out;
  const auto& reg = model.params();
  for (std::size_t i = 0; i < reg.size(); ++i)
    if (reg[i].prunable() && std::find(parts.begin(), parts.end(), reg[i].part) != parts.end()) out.push_back(i);
  return out;
}

std::vector<Tensor> prunable_weights(const CaptionModel& model, std::span<const Part> parts) {
  std::vector<Tensor> out;
  for (std::size_t i : prunable_indices(model, parts)) out.push_back(model.params()[i].value);
  return out;
}

void apply_masks(CaptionModel& model, std::span<const Part> parts, std::span<const PruneMask> masks) {
  const auto idx = prunable_indices(model, parts);
  if (idx.size() != masks.size()) throw DimensionError("apply_masks: one mask per prunable tensor expected");
  for (std::size_t j = 0; j < idx.size(); ++j) apply_mask(model.params()[idx[j]], masks[j]);
}

std::vector<PruneMask> hard_masks(const CaptionModel& model, const PrunerSpec& spec, std::span<const Part> parts) {
  const auto weights = prunable_weights(model, parts);
  switch (spec.kind) {
    case PrunerKind::hard_blind:
      return magnitude_prune_blind(weights, spec.s_target);
    case PrunerKind::hard_uniform:
      return magnitude_prune_uniform(weights, spec.s_target);
    case PrunerKind::hard_distribution:
      return magnitude_prune_distribution(
          weights, spec.lambda_c ? *spec.lambda_c : calibrate_distribution_factor(weights, spec.s_target));
    default:
      throw ConfigError(std::string("hard_masks: ") + to_string(spec.kind) + " is not a one-shot magnitude pruner");
  }
}

GradualHook::GradualHook(PrunerSpec spec, std::vector<Part> parts) : spec_(std::move(spec)), parts_(std::move(parts)) {
  if (spec_.kind != PrunerKind::gradual_uniform) throw ConfigError("GradualHook needs a gradual_uniform spec");
  spec_.validate();
}

void GradualHook::on_begin(CaptionModel& model, const TrainOptions&) {
  masks_.clear();
  for (std::size_t i : prunable_indices(model, parts_)) {
    const Parameter& p = model.params()[i];
    masks_.push_back(p.mask ? *p.mask : PruneMask::ones(p.value.shape()));
  }
  last_ = mask_sparsity(masks_);
  events_.clear();
}

void GradualHook::after_update(CaptionModel& model, const StepContext& ctx) {
  const GradualWindow& w = *spec_.window;
  const std::size_t t = ctx.step;
  if (t < w.start || t > w.end) return;
  if ((t - w.start) % w.frequency != 0 && t != w.end) return;
  const double s_t = std::max(last_, gradual_schedule(t, w.start, w.end, spec_.s_target));
  gradual_prune_step(prunable_weights(model, parts_), masks_, last_, s_t);
  apply_masks(model, parts_, masks_);
  last_ = s_t;
  events_.emplace_back(t, s_t);
}

// ---------------------------------------------------------------------------

std::vector<std::vector<double>> snip_saliency(const CaptionModel& model, std::span<const Batch> batches,
                                               std::span<const Part> parts) {
  if (batches.empty()) throw ContractError("snip needs at least one batch");
  const auto idx = prunable_indices(model, parts);
  std::vector<std::vector<double>> sal(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) sal[j].assign(model.params()[idx[j]].value.numel(), 0.0);

  std::vector<Tensor> ws = inference_weights(model.params());
  for (std::size_t j : idx) ws[j].set_requires_grad(true);
  for (const Batch& b : batches) {
    Graph g;
    Tensor loss = g.cross_entropy(model.forward(g, ws, b, nullptr), b.targets, vocab::pad);
    for (std::size_t j : idx) ws[j].drop_grad();
    g.backward(loss);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const Tensor& w = ws[idx[j]];
      auto gv = w.grad_view();
      if (gv.empty()) continue;
      auto v = w.values();
      for (std::size_t i = 0; i < v.size(); ++i)
        sal[j][i] += std::abs(static_cast<double>(gv[i]) * static_cast<double>(v[i]));
    }
  }
  double total = 0.0;
  for (const auto& s : sal) total = std::accumulate(s.begin(), s.end(), total);
  if (!(total > 0.0)) throw DomainError("snip: every connection has zero saliency");
  for (auto& s : sal)
    for (double& x : s) x /= total;
  return sal;
}

std::vector<PruneMask> snip_masks(std::span<const std::vector<double>> saliency, std::span<const Tensor> weights,
                                  double s_target) {
  check_target(s_target);
  if (saliency.size() != weights.size()) throw DimensionError("snip_masks: saliency does not match weights");
  std::vector<std::pair<double, std::size_t>> items;
  std::size_t flat = 0;
  for (std::size_t t = 0; t < weights.size(); ++t) {
    if (saliency[t].size() != weights[t].numel()) throw DimensionError("snip_masks: saliency size mismatch");
    for (double s : saliency[t]) items.emplace_back(s, flat++);
  }
  return prune_lowest(weights, std::move(items), floor_count(s_target, flat));
}

std::vector<PruneMask> snip_prune(const CaptionModel& model, std::span<const Batch> batches, double s_target,
                                  std::span<const Part> parts) {
  const auto sal = snip_saliency(model, batches, parts);
  return snip_masks(sal, prunable_weights(model, parts), s_target);
}

InitSnapshot InitSnapshot::capture(const CaptionModel& model) {
  InitSnapshot s;
  for (const auto& p : model.params()) {
    auto v = p.value.values();
    s.values_.emplace(p.name, std::vector<float>(v.begin(), v.end()));
  }
  return s;
}

std::vector<PruneMask> lottery_oneshot(CaptionModel& model, const InitSnapshot& init, const PrunerSpec& inner,
                                       std::span<const Part> parts) {
  if (!is_hard(inner.kind)) throw ConfigError(std::string("lottery inner pruner must be hard_*, got ") + to_string(inner.kind));
  for (const auto& p : model.params())
    if (!init.contains(p.name)) throw ContractError("lottery: snapshot has no value for " + p.name);
  std::vector<PruneMask> masks = hard_masks(model, inner, parts);
  for (auto& p : model.params()) {
    const auto& v0 = init.values().at(p.name);
    if (v0.size() != p.value.numel()) throw DimensionError("lottery: snapshot shape differs for " + p.name);
    std::copy(v0.begin(), v0.end(), p.value.values().begin());
  }
  apply_masks(model, parts, masks);
  return masks;
}

MaskOnlyResult supermask_maskonly_train(CaptionModel& model, const Dataset& data, const TrainOptions& options,
                                        const SmpConfig& config, std::span<const Part> parts) {
  for (auto& p : model.params()) p.value.set_requires_grad(false);
  SmpConfig c = config;
  c.sparsity_loss = false;
  attach_smp_gates(model, c, parts);
  SmpHook hook(c);
  TrainHook* hooks[] = {&hook};
  train(model, data, options, hooks);
  MaskOnlyResult r;
  r.telemetry = hook.telemetry();
  r.report = smp_finalize(model);
  return r;
}

std::vector<PruneMask> hard_prune_retrain(CaptionModel& model, const Dataset& data, const PrunerSpec& spec,
                                          const TrainOptions& options, std::span<const Part> parts) {
  spec.validate();
  std::vector<PruneMask> masks = hard_masks(model, spec, parts);
  apply_masks(model, parts, masks);
  TrainOptions retrain = options;
  retrain.steps = static_cast<std::size_t>(std::llround(spec.retrain_fraction * static_cast<double>(options.steps)));
  train(model, data, retrain);
  return masks;
}

}  // namespace smp
