// SPDX-License-Identifier: Apache-2.0
#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance runner. They share no code with the library paths they check.

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "smp/baselines.hpp"
#include "smp/checkpoint.hpp"
#include "smp/dataset.hpp"
#include "smp/graph.hpp"
#include "smp/model.hpp"
#include "support.hpp"

namespace smp::testing {

// Three to six layers summing to `total` entries. With `quantize` values are
// rounded to a coarse grid so magnitude ties are common.
inline std::vector<Tensor> random_layers(Rng& rng, std::size_t total, bool quantize) {
  const std::size_t layers = 3 + rng.below(4);
  std::vector<std::size_t> sizes(layers, 1);
  for (std::size_t i = layers; i < total; ++i) ++sizes[rng.below(layers)];
  std::vector<Tensor> out;
  for (std::size_t s : sizes) {
    const float scale = 0.2f + static_cast<float>(rng.uniform()) * 2.0f;
    Tensor t = random_tensor({s}, rng, scale);
    if (quantize)
      for (auto& v : t.values()) v = std::round(v * 4.0f) / 4.0f;
    out.push_back(std::move(t));
  }
  return out;
}

// Full sort of (|w|, global index); the first floor(s * n) entries are pruned.
inline std::vector<std::vector<std::uint8_t>> oracle_blind(const std::vector<Tensor>& ws, double s) {
  std::vector<std::pair<float, std::size_t>> all;
  std::vector<std::vector<std::uint8_t>> keep;
  std::size_t flat = 0;
  for (const auto& w : ws) {
    keep.emplace_back(w.numel(), 1);
    for (float v : w.values()) all.emplace_back(std::abs(v), flat++);
  }
  std::sort(all.begin(), all.end());
  const auto k = static_cast<std::size_t>(std::floor(s * static_cast<double>(all.size())));
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t idx = all[i].second, t = 0;
    while (idx >= ws[t].numel()) idx -= ws[t++].numel();
    keep[t][idx] = 0;
  }
  return keep;
}

inline std::vector<std::vector<std::uint8_t>> oracle_uniform(const std::vector<Tensor>& ws, double s) {
  std::vector<std::vector<std::uint8_t>> keep;
  for (const auto& w : ws) keep.push_back(oracle_blind({w}, s)[0]);
  return keep;
}

inline double population_std(const Tensor& t) {
  double mean = 0.0;
  for (float v : t.values()) mean += v;
  mean /= static_cast<double>(t.numel());
  double var = 0.0;
  for (float v : t.values()) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(t.numel()));
}

// Kendall tau-a; a pair tied in exactly one ranking counts as discordant.
inline double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
  long long concordant = 0, discordant = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double x = a[i] - a[j], y = b[i] - b[j];
      if ((x > 0 && y > 0) || (x < 0 && y < 0) || (x == 0 && y == 0))
        ++concordant;
      else
        ++discordant;
    }
  const double pairs = static_cast<double>(concordant + discordant);
  return pairs == 0 ? 1.0 : static_cast<double>(concordant - discordant) / pairs;
}

struct SnipOracle {
  std::size_t parameters = 0;
  double kendall_tau = 0.0;
  // Largest |saliency - normalized difference| / saliency over entries
  // holding at least 0.1% of the total.
  double max_relative_error = 0.0;
};

// Cross-entropy over non-pad targets, accumulated in double from float logits
// so the loss itself adds no rounding beyond the forward pass.
inline double reference_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  const std::size_t vocab_size = logits.cols();
  const auto v = logits.values();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (targets[r] == vocab::pad) continue;
    const float* row = v.data() + r * vocab_size;
    const double peak = *std::max_element(row, row + vocab_size);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab_size; ++c) z += std::exp(static_cast<double>(row[c]) - peak);
    total += peak + std::log(z) - static_cast<double>(row[targets[r]]);
    ++count;
  }
  return total / static_cast<double>(count);
}

// Saliency of the encoder of a model narrow enough to have at most 50
// prunable encoder weights, against central differences of the loss in each
// multiplicative mask entry around 1. The step is small enough that no
// encoder ReLU changes state for this seed and large enough to stay clear of
// float noise in the logits.
inline SnipOracle snip_vs_finite_difference(std::uint64_t seed, double delta = 1e-3) {
  ModelDims d = tiny_dims();
  d.encoder_dim = 3;
  const CaptionModel model = build_model(Arch::sa_lstm, d, seed);
  const Dataset data = generate_dataset(seed, 100);
  const Batch batch = make_batch(std::span(data.train).first(32), d.max_len);
  const Batch batches[] = {batch};
  const Part enc[] = {Part::encoder};
  const auto sal = snip_saliency(model, batches, enc);

  std::vector<Tensor> ws = inference_weights(model.params());
  auto loss = [&]() {
    Graph g;
    return reference_cross_entropy(model.forward(g, ws, batch, nullptr), batch.targets);
  };
  std::vector<double> saliency, numeric;
  for (std::size_t j : prunable_indices(model, enc)) {
    auto v = ws[j].values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float w0 = v[i];
      v[i] = static_cast<float>(w0 * (1.0 + delta));
      const double up = loss();
      v[i] = static_cast<float>(w0 * (1.0 - delta));
      const double down = loss();
      v[i] = w0;
      numeric.push_back(std::abs(up - down) / (2.0 * delta));
    }
  }
  for (const auto& s : sal) saliency.insert(saliency.end(), s.begin(), s.end());
  const double norm = std::accumulate(numeric.begin(), numeric.end(), 0.0);
  double worst = 0.0;
  for (std::size_t i = 0; i < saliency.size(); ++i) {
    const double n = numeric[i] / norm;
    if (n > 1e-3) worst = std::max(worst, std::abs(saliency[i] - n) / saliency[i]);
  }
  return {saliency.size(), kendall_tau(saliency, numeric), worst};
}

// Random record: rank 1-3, density anywhere from empty to full, with signed
// zeros, NaNs and infinities mixed in.
inline TensorRecord random_record(Rng& rng, std::size_t k) {
  const std::size_t rank = 1 + rng.below(3);
  Shape shape;
  for (std::size_t d = 0; d < rank; ++d) shape.push_back(1 + rng.below(rank == 1 ? 40 : 7));
  Tensor t = Tensor::zeros(shape);
  const double density = rng.uniform() < 0.15 ? 0.0 : rng.uniform();
  for (auto& v : t.values()) {
    if (rng.uniform() >= density) continue;
    const double u = rng.uniform();
    if (u < 0.03) v = -0.0f;
    else if (u < 0.05) v = std::bit_cast<float>(0x7fc00000u | static_cast<std::uint32_t>(rng.below(1000)));
    else if (u < 0.06) v = -std::numeric_limits<float>::infinity();
    else v = static_cast<float>(rng.normal() * 10.0);
  }
  return {"t" + std::to_string(k) + (rng.uniform() < 0.3 ? "/\xc3\xa9" : ""), std::move(t),
          rng.uniform() < 0.5 ? Storage::coo : Storage::dense};
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace smp::testing
