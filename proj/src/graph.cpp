// SPDX-License-Identifier: Apache-2.0
#include "smp/graph.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <numeric>

#include "smp/errors.hpp"
#include "smp/kernels.hpp"

namespace smp {
namespace {

float stable_sigmoid(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  const float e = std::exp(x);
  return e / (1.0f + e);
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + to_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

#ifndef NDEBUG
bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}
#endif

void debug_check_finite([[maybe_unused]] const Tensor& out,
                        [[maybe_unused]] std::initializer_list<const Tensor*> inputs) {
#ifndef NDEBUG
  bool inputs_finite = true;
  for (const Tensor* t : inputs) inputs_finite = inputs_finite && all_finite(t->values());
  assert(!inputs_finite || all_finite(out.values()));
#endif
}

}  // namespace

bool Graph::any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void Graph::record(Tensor& out, std::vector<Tensor> inputs, std::function<void()> fn) {
  out.set_requires_grad(true);
  nodes_.push_back(Node{out, std::move(inputs), std::move(fn)});
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions disagree " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  kernels::gemm_acc(a.values(), b.values(), out.values(), m, k, n);
  debug_check_finite(out, {&a, &b});
  if (any_requires_grad({&a, &b})) {
    record(out, {a, b}, [a, b, out, m, k, n]() mutable {
      auto g = out.grad_view();
      if (a.requires_grad()) {
        std::vector<float> bt(k * n);
        kernels::transpose(b.values(), bt, k, n);
        kernels::gemm_acc(g, bt, a.grad(), m, n, k);
      }
      if (b.requires_grad()) {
        std::vector<float> at(m * k);
        kernels::transpose(a.values(), at, m, k);
        kernels::gemm_acc(at, g, b.grad(), k, m, n);
      }
    });
  }
  return out;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  kernels::add(a.values(), b.values(), out.values());
  if (any_requires_grad({&a, &b})) {
    record(out, {a, b}, [a, b, out]() mutable {
      if (a.requires_grad()) a.accumulate_grad(out.grad_view());
      if (b.requires_grad()) b.accumulate_grad(out.grad_view());
    });
  }
  return out;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0f)); }

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  kernels::mul(a.values(), b.values(), out.values());
  if (any_requires_grad({&a, &b})) {
    record(out, {a, b}, [a, b, out]() mutable {
      auto g = out.grad_view();
      std::vector<float> tmp(g.size());
      if (a.requires_grad()) {
        kernels::mul(g, b.values(), tmp);
        a.accumulate_grad(tmp);
      }
      if (b.requires_grad()) {
        kernels::mul(g, a.values(), tmp);
        b.accumulate_grad(tmp);
      }
    });
  }
  return out;
}

Tensor Graph::add_row(const Tensor& x, const Tensor& bias) {
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n)
    throw DimensionError("add_row: bias " + to_string(bias.shape()) + " vs input " + to_string(x.shape()));
  Tensor out = x.clone();
  out.set_requires_grad(false);
  auto ov = out.values();
  for (std::size_t i = 0; i < m; ++i) kernels::add(ov.subspan(i * n, n), bias.values(), ov.subspan(i * n, n));
  if (any_requires_grad({&x, &bias})) {
    record(out, {x, bias}, [x, bias, out, m, n]() mutable {
      auto g = out.grad_view();
      if (x.requires_grad()) x.accumulate_grad(g);
      if (bias.requires_grad()) {
        std::vector<float> acc(n, 0.0f);
        for (std::size_t i = 0; i < m; ++i) kernels::add(acc, g.subspan(i * n, n), acc);
        bias.accumulate_grad(acc);
      }
    });
  }
  return out;
}

Tensor Graph::scale(const Tensor& a, float s) {
  Tensor out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * s;
  if (a.requires_grad()) {
    record(out, {a}, [a, out, s]() mutable {
      auto g = out.grad_view();
      std::vector<float> tmp(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * s;
      a.accumulate_grad(tmp);
    });
  }
  return out;
}

Tensor Graph::add_scalar(const Tensor& a, float s) {
  Tensor out = a.clone();
  out.set_requires_grad(false);
  for (float& v : out.values()) v += s;
  if (a.requires_grad()) {
    record(out, {a}, [a, out]() mutable { a.accumulate_grad(out.grad_view()); });
  }
  return out;
}

namespace {

// Shared shape for unary ops whose derivative is a function of input and output.
template <typename Fwd, typename Deriv>
Tensor unary(Graph& g, const Tensor& a, Fwd fwd, Deriv deriv,
             const std::function<void(Tensor&, std::vector<Tensor>, std::function<void()>)>& rec) {
  Tensor out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
  debug_check_finite(out, {&a});
  if (a.requires_grad()) {
    rec(out, {a}, [a, out, deriv]() mutable {
      auto gv = out.grad_view();
      auto x = a.values();
      auto y = out.values();
      std::vector<float> tmp(gv.size());
      for (std::size_t i = 0; i < gv.size(); ++i) tmp[i] = gv[i] * deriv(x[i], y[i]);
      a.accumulate_grad(tmp);
    });
  }
  (void)g;
  return out;
}

}  // namespace

#define SMP_RECORDER [this](Tensor& o, std::vector<Tensor> in, std::function<void()> f) { record(o, std::move(in), std::move(f)); }

Tensor Graph::sigmoid(const Tensor& a) {
  return unary(*this, a, stable_sigmoid, [](float, float y) { return y * (1.0f - y); }, SMP_RECORDER);
}

Tensor Graph::tanh(const Tensor& a) {
  return unary(*this, a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; },
               SMP_RECORDER);
}

Tensor Graph::relu(const Tensor& a) {
  return unary(*this, a, [](float x) { return x > 0.0f ? x : 0.0f; },
               [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; }, SMP_RECORDER);
}

Tensor Graph::log(const Tensor& a) {
  for (float v : a.values())
    if (!(v > 0.0f)) throw DomainError("log of non-positive value");
  return unary(*this, a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; },
               SMP_RECORDER);
}

Tensor Graph::abs(const Tensor& a) {
  return unary(*this, a, [](float x) { return std::fabs(x); },
               [](float x, float) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); }, SMP_RECORDER);
}

#undef SMP_RECORDER

Tensor Graph::softmax(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros(a.shape());
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < m; ++i) {
    const float* x = av.data() + i * n;
    float* y = ov.data() + i * n;
    const float mx = *std::max_element(x, x + n);
    float z = 0.0f;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  if (a.requires_grad()) {
    record(out, {a}, [a, out, m, n]() mutable {
      auto g = out.grad_view();
      auto y = out.values();
      std::vector<float> tmp(g.size());
      for (std::size_t i = 0; i < m; ++i) {
        float dot = 0.0f;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j) tmp[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
      }
      a.accumulate_grad(tmp);
    });
  }
  return out;
}

Tensor Graph::dropout(const Tensor& a, float p, Rng& rng) {
  if (p < 0.0f || p >= 1.0f) throw DomainError("dropout probability must be in [0, 1)");
  if (p == 0.0f) return a;
  const float keep_scale = 1.0f / (1.0f - p);
  Tensor mask = Tensor::zeros(a.shape());
  for (float& m : mask.values()) m = rng.bernoulli(1.0 - p) ? keep_scale : 0.0f;
  return mul(a, mask);
}

Tensor Graph::sum(const Tensor& a) {
  auto av = a.values();
  double acc = 0.0;
  for (float v : av) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (a.requires_grad()) {
    record(out, {a}, [a, out]() mutable {
      std::vector<float> tmp(a.numel(), out.grad_view()[0]);
      a.accumulate_grad(tmp);
    });
  }
  return out;
}

Tensor Graph::mean(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

Tensor Graph::add_n(std::span<const Tensor> terms) {
  if (terms.empty()) throw ContractError("add_n: no terms");
  Tensor acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

Tensor Graph::reshape(const Tensor& a, Shape shape) {
  if (smp::numel(shape) != a.numel())
    throw DimensionError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  Tensor out(std::move(shape), std::vector<float>(a.values().begin(), a.values().end()));
  if (a.requires_grad()) record(out, {a}, [a, out]() mutable { a.accumulate_grad(out.grad_view()); });
  return out;
}

Tensor Graph::concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
    total += p.cols();
  }
  Tensor out = Tensor::zeros({m, total});
  auto ov = out.values();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    auto pv = p.values();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(pv.data() + i * c, c, ov.data() + i * total + off);
    off += c;
  }
  bool need = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (need) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record(out, inputs, [inputs, out, m, total]() mutable {
      auto g = out.grad_view();
      std::size_t off = 0;
      for (auto& p : inputs) {
        const std::size_t c = p.cols();
        if (p.requires_grad()) {
          std::vector<float> tmp(m * c);
          for (std::size_t i = 0; i < m; ++i) std::copy_n(g.data() + i * total + off, c, tmp.data() + i * c);
          p.accumulate_grad(tmp);
        }
        off += c;
      }
    });
  }
  return out;
}

Tensor Graph::concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw DimensionError("concat_rows: column count mismatch");
    total += p.rows();
  }
  std::vector<float> values;
  values.reserve(total * n);
  for (const auto& p : parts) values.insert(values.end(), p.values().begin(), p.values().end());
  Tensor out({total, n}, std::move(values));
  bool need = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (need) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    record(out, inputs, [inputs, out]() mutable {
      auto g = out.grad_view();
      std::size_t off = 0;
      for (auto& p : inputs) {
        if (p.requires_grad()) p.accumulate_grad(g.subspan(off, p.numel()));
        off += p.numel();
      }
    });
  }
  return out;
}

Tensor Graph::slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const std::size_t m = a.rows(), n = a.cols();
  if (begin >= end || end > n) throw DimensionError("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor out = Tensor::zeros({m, w});
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < m; ++i) std::copy_n(av.data() + i * n + begin, w, ov.data() + i * w);
  if (a.requires_grad()) {
    record(out, {a}, [a, out, m, n, w, begin]() mutable {
      auto g = out.grad_view();
      auto ag = a.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j) ag[i * n + begin + j] += g[i * w + j];
    });
  }
  return out;
}

Tensor Graph::repeat_rows(const Tensor& a, std::size_t k) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({m * k, n});
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t r = 0; r < k; ++r) std::copy_n(av.data() + i * n, n, ov.data() + (i * k + r) * n);
  if (a.requires_grad()) {
    record(out, {a}, [a, out, m, n, k]() mutable {
      auto g = out.grad_view();
      std::vector<float> tmp(m * n, 0.0f);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t r = 0; r < k; ++r)
          kernels::add(std::span<const float>(tmp).subspan(i * n, n), g.subspan((i * k + r) * n, n),
                       std::span<float>(tmp).subspan(i * n, n));
      a.accumulate_grad(tmp);
    });
  }
  return out;
}

Tensor Graph::group_mean(const Tensor& a, std::size_t k) {
  const std::size_t rows = a.rows(), n = a.cols();
  if (k == 0 || rows % k != 0) throw DimensionError("group_mean: rows not divisible by group size");
  const std::size_t b = rows / k;
  const float inv = 1.0f / static_cast<float>(k);
  Tensor out = Tensor::zeros({b, n});
  auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t j = 0; j < n; ++j) ov[i * n + j] += av[(i * k + r) * n + j];
  for (float& v : ov) v *= inv;
  if (a.requires_grad()) {
    record(out, {a}, [a, out, b, k, n, inv]() mutable {
      auto g = out.grad_view();
      std::vector<float> tmp(b * k * n);
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t r = 0; r < k; ++r)
          for (std::size_t j = 0; j < n; ++j) tmp[(i * k + r) * n + j] = g[i * n + j] * inv;
      a.accumulate_grad(tmp);
    });
  }
  return out;
}

Tensor Graph::group_weighted_sum(const Tensor& weights, const Tensor& values) {
  require_rank2(weights, "group_weighted_sum");
  require_rank2(values, "group_weighted_sum");
  const std::size_t b = weights.rows(), k = weights.cols(), n = values.cols();
  if (values.rows() != b * k) throw DimensionError("group_weighted_sum: values rows != groups * group size");
  Tensor out = Tensor::zeros({b, n});
  auto wv = weights.values();
  auto vv = values.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t r = 0; r < k; ++r)
      kernels::axpy(wv[i * k + r], vv.subspan((i * k + r) * n, n), ov.subspan(i * n, n));
  if (any_requires_grad({&weights, &values})) {
    record(out, {weights, values}, [weights, values, out, b, k, n]() mutable {
      auto g = out.grad_view();
      auto wv = weights.values();
      auto vv = values.values();
      if (weights.requires_grad()) {
        std::vector<float> tmp(b * k);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t r = 0; r < k; ++r) {
            float dot = 0.0f;
            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * vv[(i * k + r) * n + j];
            tmp[i * k + r] = dot;
          }
        weights.accumulate_grad(tmp);
      }
      if (values.requires_grad()) {
        auto vg = values.grad();
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t r = 0; r < k; ++r)
            kernels::axpy(wv[i * k + r], g.subspan(i * n, n), vg.subspan((i * k + r) * n, n));
      }
    });
  }
  return out;
}

Tensor Graph::embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t v = table.rows(), e = table.cols();
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  Tensor out = Tensor::zeros({ids.size(), e});
  auto tv = table.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * e, e, ov.data() + i * e);
  }
  if (table.requires_grad()) {
    std::vector<int> idv(ids.begin(), ids.end());
    record(out, {table}, [table, out, idv, e]() mutable {
      auto g = out.grad_view();
      auto tg = table.grad();
      for (std::size_t i = 0; i < idv.size(); ++i)
        kernels::add(tg.subspan(static_cast<std::size_t>(idv[i]) * e, e), g.subspan(i * e, e),
                     tg.subspan(static_cast<std::size_t>(idv[i]) * e, e));
    });
  }
  return out;
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gamma.numel() != n || beta.numel() != n) throw DimensionError("layer_norm: parameter size mismatch");
  Tensor out = Tensor::zeros(x.shape());
  std::vector<float> xhat(m * n), inv_std(m);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < m; ++i) {
    float mu = 0.0f;
    for (std::size_t j = 0; j < n; ++j) mu += xv[i * n + j];
    mu /= static_cast<float>(n);
    float var = 0.0f;
    for (std::size_t j = 0; j < n; ++j) var += (xv[i * n + j] - mu) * (xv[i * n + j] - mu);
    var /= static_cast<float>(n);
    inv_std[i] = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (xv[i * n + j] - mu) * inv_std[i];
      ov[i * n + j] = gv[j] * xhat[i * n + j] + bv[j];
    }
  }
  if (any_requires_grad({&x, &gamma, &beta})) {
    record(out, {x, gamma, beta}, [x, gamma, beta, out, xhat, inv_std, m, n]() mutable {
      auto g = out.grad_view();
      auto gv = gamma.values();
      if (gamma.requires_grad() || beta.requires_grad()) {
        std::vector<float> dg(n, 0.0f), db(n, 0.0f);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            dg[j] += g[i * n + j] * xhat[i * n + j];
            db[j] += g[i * n + j];
          }
        if (gamma.requires_grad()) gamma.accumulate_grad(dg);
        if (beta.requires_grad()) beta.accumulate_grad(db);
      }
      if (x.requires_grad()) {
        std::vector<float> dx(m * n);
        const float inv_n = 1.0f / static_cast<float>(n);
        for (std::size_t i = 0; i < m; ++i) {
          float mean_d = 0.0f, mean_dx = 0.0f;
          for (std::size_t j = 0; j < n; ++j) {
            const float d = g[i * n + j] * gv[j];
            mean_d += d;
            mean_dx += d * xhat[i * n + j];
          }
          mean_d *= inv_n;
          mean_dx *= inv_n;
          for (std::size_t j = 0; j < n; ++j) {
            const float d = g[i * n + j] * gv[j];
            dx[i * n + j] = inv_std[i] * (d - mean_d - xhat[i * n + j] * mean_dx);
          }
        }
        x.accumulate_grad(dx);
      }
    });
  }
  return out;
}

Tensor Graph::attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t groups,
                        std::size_t heads, bool causal) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t d = q.cols();
  if (groups == 0 || heads == 0 || d % heads != 0 || k.cols() != d || v.cols() != d)
    throw DimensionError("attention: incompatible feature dimensions");
  if (q.rows() % groups != 0 || k.rows() % groups != 0 || v.rows() != k.rows())
    throw DimensionError("attention: rows not divisible into groups");
  const std::size_t tq = q.rows() / groups, tk = k.rows() / groups, dh = d / heads;
  if (causal && tq != tk) throw DimensionError("attention: causal mask needs equal query/key lengths");
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));

  Tensor out = Tensor::zeros({q.rows(), d});
  std::vector<float> probs(groups * heads * tq * tk, 0.0f);
  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  auto ov = out.values();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t h = 0; h < heads; ++h) {
      float* p = probs.data() + (g * heads + h) * tq * tk;
      for (std::size_t i = 0; i < tq; ++i) {
        const float* qi = qv.data() + (g * tq + i) * d + h * dh;
        const std::size_t limit = causal ? i + 1 : tk;
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < limit; ++j) {
          const float* kj = kv.data() + (g * tk + j) * d + h * dh;
          float s = 0.0f;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          p[i * tk + j] = s * scale;
          mx = std::max(mx, p[i * tk + j]);
        }
        float z = 0.0f;
        for (std::size_t j = 0; j < limit; ++j) z += (p[i * tk + j] = std::exp(p[i * tk + j] - mx));
        for (std::size_t j = 0; j < limit; ++j) p[i * tk + j] /= z;
        float* oi = ov.data() + (g * tq + i) * d + h * dh;
        for (std::size_t j = 0; j < limit; ++j) {
          const float* vj = vv.data() + (g * tk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[i * tk + j] * vj[c];
        }
      }
    }
  if (any_requires_grad({&q, &k, &v})) {
    record(out, {q, k, v}, [q, k, v, out, probs, groups, heads, tq, tk, d, dh, scale, causal]() mutable {
      auto go = out.grad_view();
      auto qv = q.values();
      auto kv = k.values();
      auto vv = v.values();
      std::vector<float> dq(q.numel(), 0.0f), dk(k.numel(), 0.0f), dv(v.numel(), 0.0f);
      std::vector<float> dp(tk), ds(tk);
      for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t h = 0; h < heads; ++h) {
          const float* p = probs.data() + (g * heads + h) * tq * tk;
          for (std::size_t i = 0; i < tq; ++i) {
            const std::size_t limit = causal ? i + 1 : tk;
            const float* doi = go.data() + (g * tq + i) * d + h * dh;
            float dot = 0.0f;
            for (std::size_t j = 0; j < limit; ++j) {
              const float* vj = vv.data() + (g * tk + j) * d + h * dh;
              float* dvj = dv.data() + (g * tk + j) * d + h * dh;
              float s = 0.0f;
              for (std::size_t c = 0; c < dh; ++c) {
                s += doi[c] * vj[c];
                dvj[c] += p[i * tk + j] * doi[c];
              }
              dp[j] = s;
              dot += s * p[i * tk + j];
            }
            for (std::size_t j = 0; j < limit; ++j) ds[j] = p[i * tk + j] * (dp[j] - dot) * scale;
            const float* qi = qv.data() + (g * tq + i) * d + h * dh;
            float* dqi = dq.data() + (g * tq + i) * d + h * dh;
            for (std::size_t j = 0; j < limit; ++j) {
              const float* kj = kv.data() + (g * tk + j) * d + h * dh;
              float* dkj = dk.data() + (g * tk + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) {
                dqi[c] += ds[j] * kj[c];
                dkj[c] += ds[j] * qi[c];
              }
            }
          }
        }
      if (q.requires_grad()) q.accumulate_grad(dq);
      if (k.requires_grad()) k.accumulate_grad(dk);
      if (v.requires_grad()) v.accumulate_grad(dv);
    });
  }
  return out;
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const int> targets, int pad_id) {
  require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n) throw DimensionError("cross_entropy: one target per logit row required");
  auto lv = logits.values();
  std::vector<float> soft(n * vocab, 0.0f);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] == pad_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab)
      throw ContractError("cross_entropy: target " + std::to_string(targets[i]) + " outside vocabulary");
    const float* x = lv.data() + i * vocab;
    const float mx = *std::max_element(x, x + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += (soft[i * vocab + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < vocab; ++j) soft[i * vocab + j] = static_cast<float>(soft[i * vocab + j] / z);
    total += std::log(z) + mx - x[targets[i]];
    ++count;
  }
  if (count == 0) throw DomainError("cross_entropy: every position is padding, mean is undefined");
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(count)));
  if (logits.requires_grad()) {
    std::vector<int> tg(targets.begin(), targets.end());
    record(out, {logits}, [logits, out, soft, tg, vocab, count, pad_id]() mutable {
      const float g = out.grad_view()[0] / static_cast<float>(count);
      std::vector<float> tmp(soft.size(), 0.0f);
      for (std::size_t i = 0; i < tg.size(); ++i) {
        if (tg[i] == pad_id) continue;
        for (std::size_t j = 0; j < vocab; ++j) tmp[i * vocab + j] = soft[i * vocab + j] * g;
        tmp[i * vocab + static_cast<std::size_t>(tg[i])] -= g;
      }
      logits.accumulate_grad(tmp);
    });
  }
  return out;
}

Tensor Graph::ste_sample(const Tensor& probs, const Tensor& bits) {
  require_same_shape(probs, bits, "ste_sample");
  Tensor out = bits.clone();
  out.set_requires_grad(false);
  if (probs.requires_grad()) {
    record(out, {probs}, [probs, out]() mutable { probs.accumulate_grad(out.grad_view()); });
  }
  return out;
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
  for (auto& node : nodes_) node.output.drop_grad();
  const bool produced_here =
      std::any_of(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.output.same_storage(loss); });
  if (!produced_here) throw ContractError("backward: loss is not a node of this graph");
  Tensor root = loss;
  root.grad()[0] = 1.0f;
  visits_ = 0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
    ++visits_;
  }
}

}  // namespace smp
