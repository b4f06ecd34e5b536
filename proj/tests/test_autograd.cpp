// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <set>
#include <string>

#include "smp/errors.hpp"
#include "smp/graph.hpp"
#include "smp/optim.hpp"
#include "smp/rng.hpp"
#include "support.hpp"

using namespace smp;
using smp::testing::finite_difference_check;
using smp::testing::random_tensor;

TEST_CASE("matmul small cases") {
  Graph g;
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  const Tensor p = g.matmul(eye, m);
  CHECK(std::vector<float>(p.values().begin(), p.values().end()) == std::vector<float>{1, 2, 3, 4});
  Tensor row({1, 2}, {1, 0});
  Tensor col({2, 1}, {2, 3});
  const Tensor r = g.matmul(row, col);
  CHECK(r.shape() == Shape{1, 1});
  CHECK(r.item() == 2.0f);
  CHECK_THROWS_AS(g.matmul(row, row), DimensionError);
}

TEST_CASE("matmul gradient of sum(a b) w.r.t. a is the row sums of b") {
  Rng rng(5);
  Tensor a = random_tensor({3, 4}, rng, 1.0f, true);
  Tensor b = random_tensor({4, 2}, rng, 1.0f, true);
  Graph g;
  g.backward(g.sum(g.matmul(a, b)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      const float expect = b.values()[k * 2] + b.values()[k * 2 + 1];
      CHECK(a.grad_view()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-6));
    }
  a.drop_grad();
  b.drop_grad();
  const auto res = finite_difference_check({a, b}, [&](Graph& gg) { return gg.sum(gg.matmul(a, b)); });
  CHECK(res.failures == 0);
}

TEST_CASE("sigmoid and softmax values") {
  Graph g;
  CHECK(g.sigmoid(Tensor::scalar(0.0f)).item() == 0.5f);
  // Independent evaluation of 1 / (1 + e^-5) in double precision.
  const double oracle = 1.0 / (1.0 + std::exp(-5.0));
  CHECK(g.sigmoid(Tensor::scalar(5.0f)).item() == doctest::Approx(oracle).epsilon(1e-6));
  CHECK(std::round(oracle * 1e6) / 1e6 == doctest::Approx(0.993307));
  const Tensor s = g.softmax(Tensor({1, 3}, {2.5f, 2.5f, 2.5f}));
  for (float v : s.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
}

TEST_CASE("cross entropy") {
  Graph g;
  SUBCASE("confident correct prediction has loss near zero") {
    Tensor logits({2, 3}, {50, 0, 0, 0, 0, 50});
    const std::vector<int> t{0, 2};
    CHECK(g.cross_entropy(logits, t, -1).item() < 1e-6f);
  }
  SUBCASE("uniform logits give ln V") {
    Tensor logits = Tensor::zeros({3, 4});
    const std::vector<int> t{0, 1, 3};
    CHECK(g.cross_entropy(logits, t, -1).item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));
    CHECK(g.cross_entropy(logits, t, -1).item() == doctest::Approx(1.386294).epsilon(1e-6));
  }
  SUBCASE("pad positions are excluded from the mean") {
    Rng rng(9);
    Tensor logits = random_tensor({6, 5}, rng);
    const std::vector<int> t{1, 0, 4, 0, 2, 3};  // 0 is the pad id here
    double nll = 0.0;
    int counted = 0;
    for (std::size_t r = 0; r < 6; ++r) {
      if (t[r] == 0) continue;
      double mx = -1e30, z = 0.0;
      for (std::size_t c = 0; c < 5; ++c) mx = std::max(mx, double(logits.values()[r * 5 + c]));
      for (std::size_t c = 0; c < 5; ++c) z += std::exp(double(logits.values()[r * 5 + c]) - mx);
      nll += -(double(logits.values()[r * 5 + std::size_t(t[r])]) - mx - std::log(z));
      ++counted;
    }
    CHECK(counted == 4);
    CHECK(g.cross_entropy(logits, t, 0).item() == doctest::Approx(nll / 4.0).epsilon(1e-6));
  }
}

TEST_CASE("backward on simple losses") {
  Rng rng(2);
  Tensor w = random_tensor({3, 3}, rng, 1.0f, true);
  {
    Graph g;
    g.backward(g.sum(w));
    for (float v : w.grad_view()) CHECK(v == 1.0f);
  }
  w.drop_grad();
  {
    Graph g;
    g.backward(g.sum(g.mul(w, w)));
    for (std::size_t i = 0; i < 9; ++i) CHECK(w.grad_view()[i] == 2.0f * w.values()[i]);
  }
  Graph g;
  CHECK_THROWS_AS(g.backward(w), ContractError);
}

TEST_CASE("two-layer MLP gradients match central differences") {
  Rng rng(21);
  Tensor x = random_tensor({4, 5}, rng);
  Tensor w1 = random_tensor({5, 6}, rng, 0.5f, true);
  Tensor b1 = random_tensor({6}, rng, 0.1f, true);
  Tensor w2 = random_tensor({6, 3}, rng, 0.5f, true);
  const std::vector<int> targets{0, 2, 1, 2};
  const auto res = finite_difference_check({w1, b1, w2}, [&](Graph& g) {
    Tensor h = g.tanh(g.add_row(g.matmul(x, w1), b1));
    return g.cross_entropy(g.matmul(h, w2), targets, -1);
  });
  CHECK(res.checked == 30 + 6 + 18);
  CHECK(res.failures == 0);
}

TEST_CASE("every differentiable op matches central differences") {
  Rng rng(33);
  Tensor a = random_tensor({4, 6}, rng, 1.0f, true);
  Tensor b = random_tensor({4, 6}, rng, 1.0f, true);
  Tensor bias = random_tensor({6}, rng, 1.0f, true);
  Tensor gamma = random_tensor({6}, rng, 0.5f, true);
  Tensor beta = random_tensor({6}, rng, 0.5f, true);
  Tensor wts = random_tensor({2, 2}, rng, 1.0f, true);
  Tensor table = random_tensor({5, 6}, rng, 1.0f, true);
  Tensor pos = Tensor({4, 6}, std::vector<float>(24, 0.0f), true);
  for (std::size_t i = 0; i < 24; ++i) pos.values()[i] = 0.5f + static_cast<float>(rng.uniform());
  Tensor probe = random_tensor({4, 6}, rng);

  auto weighted = [&](Graph& g, const Tensor& t) {
    // A fixed random projection so every output entry matters.
    Rng local(4);
    Tensor p = t.shape() == probe.shape() ? probe : random_tensor(t.shape(), local);
    return g.sum(g.mul(t, p));
  };
  struct Case {
    const char* name;
    std::vector<Tensor> leaves;
    std::function<Tensor(Graph&)> f;
  };
  std::vector<Case> cases{
      {"add", {a, b}, [&](Graph& g) { return weighted(g, g.add(a, b)); }},
      {"sub", {a, b}, [&](Graph& g) { return weighted(g, g.sub(a, b)); }},
      {"mul", {a, b}, [&](Graph& g) { return weighted(g, g.mul(a, b)); }},
      {"add_row", {a, bias}, [&](Graph& g) { return weighted(g, g.add_row(a, bias)); }},
      {"scale", {a}, [&](Graph& g) { return weighted(g, g.scale(a, -1.7f)); }},
      {"add_scalar", {a}, [&](Graph& g) { return weighted(g, g.add_scalar(a, 0.3f)); }},
      {"sigmoid", {a}, [&](Graph& g) { return weighted(g, g.sigmoid(a)); }},
      {"tanh", {a}, [&](Graph& g) { return weighted(g, g.tanh(a)); }},
      {"relu", {a}, [&](Graph& g) { return weighted(g, g.relu(a)); }},
      {"log", {pos}, [&](Graph& g) { return weighted(g, g.log(pos)); }},
      {"abs", {a}, [&](Graph& g) { return weighted(g, g.abs(a)); }},
      {"softmax", {a}, [&](Graph& g) { return weighted(g, g.softmax(a)); }},
      {"mean", {a}, [&](Graph& g) { return g.mean(g.mul(a, a)); }},
      {"layer_norm", {a, gamma, beta}, [&](Graph& g) { return weighted(g, g.layer_norm(a, gamma, beta)); }},
      {"concat/slice",
       {a, b},
       [&](Graph& g) {
         const Tensor parts[] = {g.slice_cols(a, 1, 4), g.slice_cols(b, 0, 3)};
         Tensor c = g.concat_cols(parts);
         const Tensor rows[] = {c, c};
         return g.sum(g.mul(g.concat_rows(rows), g.concat_rows(rows)));
       }},
      {"repeat/group",
       {a},
       [&](Graph& g) {
         Tensor r = g.repeat_rows(a, 3);
         return weighted(g, g.group_mean(g.mul(r, r), 3));
       }},
      {"group_weighted_sum",
       {wts, a},
       [&](Graph& g) { return g.sum(g.mul(g.group_weighted_sum(wts, a), g.group_weighted_sum(wts, a))); }},
      {"embedding",
       {table},
       [&](Graph& g) {
         const std::vector<int> ids{1, 3, 1, 0};
         return weighted(g, g.embedding(table, ids));
       }},
      {"attention",
       {a, b},
       [&](Graph& g) { return weighted(g, g.attention(a, b, b, 2, 2, false)); }},
      {"causal attention",
       {a, b},
       [&](Graph& g) { return weighted(g, g.attention(a, b, a, 2, 3, true)); }},
      {"add_n/reshape",
       {a, b},
       [&](Graph& g) {
         const Tensor t[] = {a, b, a};
         return g.sum(g.mul(g.reshape(g.add_n(t), {6, 4}), g.reshape(g.add_n(t), {6, 4})));
       }},
  };
  for (auto& c : cases) {
    const std::string name = c.name;
    CAPTURE(name);
    // A float32 forward pass makes central differences noisy at h = 1e-3
    // (rounding of the loss divided by 2h), so this sweep uses h = 1e-2.
    // relu and abs have kinks at 0; no entry of this seed lies within h of it.
    const auto res = finite_difference_check(c.leaves, c.f, 1e-2f);
    CAPTURE(res.max_abs_error);
    CAPTURE(res.max_rel_error);
    CHECK(res.failures == 0);
  }
}

TEST_CASE("dropout keeps the expectation and is reproducible") {
  Graph g;
  Tensor x = Tensor::full({100, 100}, 1.0f);
  Rng r1(4), r2(4);
  const Tensor d1 = g.dropout(x, 0.25f, r1);
  const Tensor d2 = g.dropout(x, 0.25f, r2);
  double sum = 0.0;
  for (std::size_t i = 0; i < d1.numel(); ++i) {
    CHECK(d1.values()[i] == d2.values()[i]);
    sum += d1.values()[i];
  }
  CHECK(sum / 1e4 == doctest::Approx(1.0).epsilon(0.03));
  CHECK_THROWS_AS(g.dropout(x, 1.0f, r1), DomainError);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor p({3}, {1, 2, 3}, true);
    p.grad();  // zeros
    Adam opt({1e-3f, 0.9f, 0.999f, 1e-8f});
    for (int i = 0; i < 5; ++i) opt.step(std::span<Tensor>(&p, 1));
    CHECK(std::vector<float>(p.values().begin(), p.values().end()) == std::vector<float>{1, 2, 3});
  }
  SUBCASE("first step with unit gradient moves by lr") {
    // Bias-corrected moments after one step are g and g^2, so the update is
    // lr * g / (|g| + eps) = lr for g = 1, eps = 0.
    Tensor p({1}, {0.5f}, true);
    p.accumulate_grad(std::vector<float>{1.0f});
    Adam opt({1e-3f, 0.9f, 0.999f, 0.0f});
    opt.step(std::span<Tensor>(&p, 1));
    CHECK(p.values()[0] - 0.5f == doctest::Approx(-1e-3).epsilon(1e-4));
  }
  SUBCASE("identical runs are bit-identical") {
    auto run = [] {
      Rng rng(8);
      Tensor p = random_tensor({16}, rng, 1.0f, true);
      Adam opt({1e-2f, 0.9f, 0.999f, 1e-8f});
      for (int s = 0; s < 20; ++s) {
        p.drop_grad();
        Graph g;
        g.backward(g.sum(g.mul(g.tanh(p), p)));
        opt.step(std::span<Tensor>(&p, 1));
      }
      return std::vector<float>(p.values().begin(), p.values().end());
    };
    CHECK(run() == run());
  }
}

TEST_CASE("cosine learning rate") {
  CHECK(cosine_lr(0.1f, 0, 100) == 0.1f);
  CHECK(cosine_lr(0.1f, 50, 100) == doctest::Approx(0.05));
  CHECK(cosine_lr(0.1f, 100, 100, 0.01f) == doctest::Approx(0.01));
}

TEST_CASE("rng") {
  Rng a(42), b(42), c(43);
  bool differ = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    CHECK(x == b.next_u64());
    if (i < 10 && x != c.next_u64()) differ = true;
  }
  CHECK(differ);
  Rng u(7);
  double mean = 0.0;
  for (int i = 0; i < 100000; ++i) mean += u.uniform();
  CHECK(mean / 1e5 == doctest::Approx(0.5).epsilon(0.02));
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 1000; ++i) {
    const auto v = u.below(7);
    CHECK(v < 7);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}
