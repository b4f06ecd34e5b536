// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "smp/rng.hpp"
#include "smp/tensor.hpp"

namespace smp {

/// Reverse-mode tape. Every op computes its result eagerly and, when any
/// input requires a gradient, appends a node whose closure propagates the
/// output gradient to the inputs. Nodes are appended in creation order, which
/// is a topological order of the computation.
///
/// Unless stated otherwise ops take rank-1 or rank-2 tensors; "rows" is the
/// leading extent of a rank-2 tensor (1 for rank-1) and "cols" the trailing one.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Linear algebra
  Tensor matmul(const Tensor& a, const Tensor& b);

  // Elementwise
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  /// x[m x n] + bias[n] broadcast over rows.
  Tensor add_row(const Tensor& x, const Tensor& bias);
  Tensor scale(const Tensor& a, float s);
  Tensor add_scalar(const Tensor& a, float s);
  Tensor sigmoid(const Tensor& a);
  Tensor tanh(const Tensor& a);
  Tensor relu(const Tensor& a);
  Tensor log(const Tensor& a);
  Tensor abs(const Tensor& a);
  /// Softmax along the last axis.
  Tensor softmax(const Tensor& a);
  /// Inverted dropout with keep probability 1 - p.
  Tensor dropout(const Tensor& a, float p, Rng& rng);

  // Reductions
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  /// Sum of several rank-1 scalars or same-shape tensors.
  Tensor add_n(std::span<const Tensor> terms);

  // Layout
  Tensor reshape(const Tensor& a, Shape shape);
  Tensor concat_cols(std::span<const Tensor> parts);
  Tensor concat_rows(std::span<const Tensor> parts);
  Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
  /// Row r of a[B x n] becomes rows r*k .. r*k+k-1 of the result [B*k x n].
  Tensor repeat_rows(const Tensor& a, std::size_t k);
  /// Mean over each consecutive block of k rows: [B*k x n] -> [B x n].
  Tensor group_mean(const Tensor& a, std::size_t k);
  /// out[b, :] = sum_j weights[b, j] * values[b*k + j, :] with k = cols(weights).
  Tensor group_weighted_sum(const Tensor& weights, const Tensor& values);
  /// Row lookup: out[i, :] = table[ids[i], :].
  Tensor embedding(const Tensor& table, std::span<const int> ids);

  // Model pieces
  Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f);
  /// Multi-head scaled dot-product attention over `groups` independent
  /// sequences. q is [groups*tq x d]; k and v are [groups*tk x d]. With
  /// `causal`, query i attends to keys 0..i only (requires tq == tk).
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t groups,
                   std::size_t heads, bool causal);

  /// Mean negative log-likelihood of targets under softmax(logits) over the
  /// positions whose target is not pad_id. logits is [N x V].
  Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int pad_id);

  /// Straight-through sampling node. Forward emits `bits`; backward passes
  /// the incoming gradient to `probs` unchanged (d sample(p) / dp = 1).
  Tensor ste_sample(const Tensor& probs, const Tensor& bits);

  /// Exact reverse-mode gradients of a scalar loss produced by this graph.
  /// Intermediate gradients are reset first, so a repeated call after
  /// zeroing leaf gradients reproduces the same result.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Number of node closures run by the most recent backward().
  std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    Tensor output;
    std::vector<Tensor> inputs;
    std::function<void()> backward;
  };
  static bool any_requires_grad(std::initializer_list<const Tensor*> inputs);
  void record(Tensor& out, std::vector<Tensor> inputs, std::function<void()> fn);

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

}  // namespace smp
