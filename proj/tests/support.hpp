// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared test helpers: random tensors, finite-difference gradient oracle and
// a small model configuration that trains in well under a second.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "smp/graph.hpp"
#include "smp/model.hpp"
#include "smp/rng.hpp"
#include "smp/tensor.hpp"

namespace smp::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, float scale = 1.0f, bool requires_grad = false) {
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = static_cast<float>(rng.normal()) * scale;
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

struct GradCheck {
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t failures = 0;
};

// Central differences of the scalar built by `f` against the gradients that
// backward() leaves on `leaves`. An entry passes when its error is within
// rel_tol of the larger magnitude or below abs_tol.
inline GradCheck finite_difference_check(std::vector<Tensor> leaves, const std::function<Tensor(Graph&)>& f,
                                         float h = 1e-3f, double rel_tol = 1e-3, double abs_tol = 1e-4) {
  for (auto& t : leaves) t.drop_grad();
  {
    Graph g;
    Tensor loss = f(g);
    g.backward(loss);
  }
  std::vector<std::vector<float>> analytic;
  for (auto& t : leaves) {
    const auto gv = t.grad_view();
    analytic.emplace_back(gv.begin(), gv.end());
    if (analytic.back().empty()) analytic.back().assign(t.numel(), 0.0f);
  }
  auto eval = [&f]() {
    Graph g;
    return static_cast<double>(f(g).item());
  };
  GradCheck out;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto v = leaves[l].values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const float saved = v[i];
      v[i] = saved + h;
      const double up = eval();
      v[i] = saved - h;
      const double down = eval();
      v[i] = saved;
      const double numeric = (up - down) / (2.0 * static_cast<double>(h));
      const double a = analytic[l][i];
      const double err = std::abs(a - numeric);
      const double rel = err / std::max({std::abs(a), std::abs(numeric), 1e-12});
      out.max_abs_error = std::max(out.max_abs_error, err);
      if (err > abs_tol) out.max_rel_error = std::max(out.max_rel_error, rel);
      if (err > abs_tol && rel > rel_tol) ++out.failures;
      ++out.checked;
    }
  }
  return out;
}

inline ModelDims tiny_dims() {
  ModelDims d;
  d.encoder_dim = 8;
  d.embed_dim = 6;
  d.hidden_dim = 10;
  d.attention_dim = 6;
  d.heads = 2;
  d.ffn_dim = 12;
  return d;
}

}  // namespace smp::testing
