// SPDX-License-Identifier: Apache-2.0
#include "smp/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "smp/errors.hpp"

namespace smp {

namespace {

// Epoch-wise shuffled index stream over the training split.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, Rng rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    shuffle();
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == order_.size()) shuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  Rng rng_;
};

std::string layer_dump(const CaptionModel& model) {
  const SparsityReport r = sparsity_report(model);
  std::ostringstream os;
  os << "per-layer sparsity:";
  for (std::size_t i = 0; i < r.names.size(); ++i) os << "\n  " << r.names[i] << " " << r.layer[i];
  return os.str();
}

}  // namespace

TrainResult train(CaptionModel& model, const Dataset& data, const TrainOptions& options,
                  std::span<TrainHook* const> hooks) {
  TrainResult result;
  if (data.train.empty()) throw ContractError("train: empty training split");
  for (TrainHook* h : hooks) h->on_begin(model, options);

  Rng root(options.seed);
  BatchSampler sampler(data.train.size(), root.split());
  Rng mask_rng = root.split();
  Rng dropout_rng = root.split();
  Adam adam(options.adam);

  auto& reg = model.params();
  std::vector<Tensor> trainable;
  std::vector<std::size_t> trainable_index;
  for (std::size_t i = 0; i < reg.size(); ++i)
    if (reg[i].value.requires_grad()) {
      trainable.push_back(reg[i].value);
      trainable_index.push_back(i);
    }

  float first_loss = 0.0f;
  result.xe_loss.reserve(options.steps);
  for (std::size_t step = 0; step < options.steps; ++step) {
    const auto idx = sampler.next(options.batch_size);
    const Batch batch = make_batch(data.train, idx, model.dims().max_len);

    Graph g;
    StepWeights ws = materialize(g, reg, mask_rng, options.frozen_kind);
    Tensor logits = model.forward(g, ws.effective, batch, &dropout_rng);
    Tensor xe = g.cross_entropy(logits, batch.targets, vocab::pad);

    StepContext ctx;
    ctx.step = step;
    ctx.total = options.steps;
    ctx.lr = options.cosine ? cosine_lr(options.adam.lr, step, options.steps, options.min_lr) : options.adam.lr;
    ctx.xe_loss = xe.item();
    ctx.weights = &ws;

    std::vector<Tensor> terms{xe};
    for (TrainHook* h : hooks) {
      Tensor extra = h->extra_loss(g, model, ctx);
      if (extra.defined()) terms.push_back(extra);
    }
    Tensor loss = terms.size() == 1 ? xe : g.add_n(terms);

    const float lv = loss.item();
    if (!std::isfinite(lv))
      throw TrainingError("non-finite loss at step " + std::to_string(step) + "\n" + layer_dump(model));
    if (step == 0) first_loss = std::max(ctx.xe_loss, options.divergence_floor);
    if (ctx.xe_loss > options.divergence_factor * first_loss)
      throw TrainingError("training diverged at step " + std::to_string(step) + ": loss " +
                          std::to_string(ctx.xe_loss) + " > " + std::to_string(options.divergence_factor) +
                          " x reference " + std::to_string(first_loss));
    result.xe_loss.push_back(ctx.xe_loss);

    for (auto& p : reg) {
      p.value.drop_grad();
      if (p.gated && p.gated->mode() != GateMode::finalized) p.gated->gate().drop_grad();
    }
    g.backward(loss);
    if (!trainable.empty()) adam.step(trainable, ctx.lr);
    for (std::size_t i : trainable_index)
      if (reg[i].mask) reg[i].mask->apply(reg[i].value.values());
    for (TrainHook* h : hooks) h->after_update(model, ctx);
    ++result.steps;
  }
  for (TrainHook* h : hooks) h->on_end(model);
  return result;
}

EvalResult evaluate(const CaptionModel& model, std::span<const SceneSample> samples, std::size_t batch_size) {
  EvalResult r;
  if (samples.empty()) return r;
  const std::vector<Tensor> ws = inference_weights(model.params());
  std::size_t correct = 0, counted = 0, exact = 0, words = 0;
  double xe_sum = 0.0;
  std::set<std::vector<int>> unique;
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - begin);
    const Batch b = make_batch(samples.subspan(begin, n), model.dims().max_len);
    Graph g;
    Tensor logits = model.forward(g, ws, b, nullptr);
    const std::size_t v = logits.cols();
    auto lv = logits.values();
    for (std::size_t row = 0; row < b.targets.size(); ++row) {
      const int t = b.targets[row];
      if (t == vocab::pad) continue;
      const float* p = lv.data() + row * v;
      const float mx = *std::max_element(p, p + v);
      double z = 0.0;
      for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(p[j] - mx));
      xe_sum += std::log(z) - static_cast<double>(p[t] - mx);
      correct += static_cast<std::size_t>(std::max_element(p, p + v) - p) == static_cast<std::size_t>(t);
      ++counted;
    }
    const auto captions = model.greedy(ws, b);
    for (std::size_t i = 0; i < n; ++i) {
      exact += captions[i] == b.references[i];
      unique.insert(captions[i]);
      words += captions[i].size() - (!captions[i].empty() && captions[i].back() == vocab::eos ? 1 : 0);
    }
  }
  r.token_accuracy = counted ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
  r.xe_loss = counted ? xe_sum / static_cast<double>(counted) : 0.0;
  r.exact_match = static_cast<double>(exact) / static_cast<double>(samples.size());
  r.caption_stats.unique_fraction = static_cast<double>(unique.size()) / static_cast<double>(samples.size());
  r.caption_stats.avg_length = static_cast<double>(words) / static_cast<double>(samples.size());
  return r;
}

CostReport cost_report(const CaptionModel& model, std::size_t caption_len) {
  CostReport c;
  const std::vector<Tensor> ws = inference_weights(model.params());
  const auto& reg = model.params();
  for (std::size_t i = 0; i < reg.size(); ++i) {
    const std::size_t n = ws[i].numel();
    c.p_total += n;
    if (reg[i].prunable()) {
      auto v = ws[i].values();
      const auto nz = static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
      c.prunable_nnz += nz;
      c.prunable_total += n;
      c.nnz += nz;
    } else {
      c.nnz += n;
    }
  }
  const FlopCount f = model.flops(ws, caption_len);
  c.flops_dense = f.dense;
  c.flops_per_caption = f.sparse;
  c.caption_len = caption_len;
  return c;
}

SparsityReport sparsity_report(const CaptionModel& model) {
  SparsityReport r;
  const std::vector<Tensor> ws = inference_weights(model.params());
  const auto& reg = model.params();
  for (std::size_t i = 0; i < reg.size(); ++i) {
    if (!reg[i].prunable()) continue;
    auto v = ws[i].values();
    const auto nz = static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
    r.names.push_back(reg[i].name);
    r.layer.push_back(1.0 - static_cast<double>(nz) / static_cast<double>(v.size()));
    r.nnz += nz;
    r.total += v.size();
  }
  r.global = r.total ? 1.0 - static_cast<double>(r.nnz) / static_cast<double>(r.total) : 0.0;
  return r;
}

}  // namespace smp
