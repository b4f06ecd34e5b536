// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "smp/errors.hpp"
#include "smp/gating.hpp"
#include "support.hpp"

using namespace smp;
using smp::testing::finite_difference_check;
using smp::testing::random_tensor;

TEST_CASE("bernoulli draws") {
  Rng rng(1);
  CHECK(sample_bern(Tensor::full({50}, 100.0f), rng).nnz() == 50);
  CHECK(sample_bern(Tensor::full({50}, -100.0f), rng).nnz() == 0);
  const PruneMask half = sample_bern(Tensor::zeros({100000}), rng);
  CHECK(static_cast<double>(half.nnz()) / 1e5 == doctest::Approx(0.5).epsilon(0.02));

  Rng a(77), b(77);
  const Tensor g = random_tensor({200}, a);
  Rng ra(5), rb(5);
  CHECK(sample_bern(g, ra) == sample_bern(g, rb));
  (void)b;
}

TEST_CASE("maximum-likelihood draw") {
  // sigmoid(-2) = 0.119 < 0.5, sigmoid(0) = 0.5 kept by the tie rule,
  // sigmoid(1.5) = 0.818.
  const Tensor g({3}, {-2.0f, 0.0f, 1.5f});
  const PruneMask m = sample_round(g);
  CHECK(m.bits()[0] == 0);
  CHECK(m.bits()[1] == 1);
  CHECK(m.bits()[2] == 1);
  CHECK(sample_round(Tensor::full({7}, -0.25f)).nnz() == 0);
  Rng rng(3);
  const Tensor r = random_tensor({64}, rng);
  CHECK(sample_round(r) == sample_round(r));
  // Tiny negative gates are pruned even though sigmoid rounds to 0.5 in float.
  const Tensor tiny({2}, {-1e-9f, -0.0f});
  CHECK(sigmoid(-1e-9f) == 0.5f);
  CHECK(sample_round(tiny).bits()[0] == 0);
  CHECK(sample_round(tiny).bits()[1] == 1);
}

TEST_CASE("masked forward") {
  Graph g;
  Tensor w({2}, {1.0f, 2.0f}, true);
  const PruneMask mask({2}, {0, 1});
  const Tensor out = masked_forward(g, w, mask);
  CHECK(out.values()[0] == 0.0f);
  CHECK(out.values()[1] == 2.0f);

  Rng rng(4);
  Tensor w2 = random_tensor({5, 3}, rng, 1.0f, true);
  Graph g2;
  const Tensor same = masked_forward(g2, w2, PruneMask::ones({5, 3}));
  for (std::size_t i = 0; i < 15; ++i) CHECK(same.values()[i] == w2.values()[i]);

  PruneMask m({5, 3}, std::vector<std::uint8_t>(15, 1));
  for (std::size_t i = 0; i < 15; i += 2) m.set(i, false);
  const auto res = finite_difference_check({w2}, [&](Graph& gg) { return gg.sum(masked_forward(gg, w2, m)); });
  CHECK(res.failures == 0);
  w2.drop_grad();
  Graph g3;
  g3.backward(g3.sum(masked_forward(g3, w2, m)));
  for (std::size_t i = 0; i < 15; ++i) CHECK(w2.grad_view()[i] == static_cast<float>(m.bits()[i]));
}

TEST_CASE("straight-through gradient into the gates") {
  CHECK(ste_gate_grad(std::vector<float>{0.0f}, std::vector<float>{1.3f})[0] == 0.0f);
  CHECK(ste_gate_grad(std::vector<float>{2.0f}, std::vector<float>{0.0f})[0] == 0.5f);

  // The gradient reaching sigmoid(G) equals the upstream gradient whether the
  // bits came from a Bernoulli or a thresholded draw.
  Rng rng(12);
  for (int kind = 0; kind < 2; ++kind) {
    Tensor w = random_tensor({4, 4}, rng);
    Tensor gate = random_tensor({4, 4}, rng, 2.0f);
    GatedParameter p(w, gate, kind == 0 ? GateMode::train_bern : GateMode::train_round);
    const PruneMask mask = p.sample(rng);
    Graph g;
    GatedForward fwd = gated_forward(g, p, mask);
    const Tensor probe = random_tensor({4, 4}, rng);
    g.backward(g.sum(g.mul(fwd.effective, probe)));
    // d loss / d sample = W * probe elementwise.
    for (std::size_t i = 0; i < 16; ++i) {
      const float upstream = w.values()[i] * probe.values()[i];
      CHECK(fwd.sample.grad_view()[i] == upstream);
      CHECK(fwd.probs.grad_view()[i] == upstream);
    }
    const auto expect = ste_gate_grad(fwd.probs.grad_view(), p.gate().values());
    for (std::size_t i = 0; i < 16; ++i) CHECK(p.gate().grad_view()[i] == doctest::Approx(expect[i]).epsilon(1e-6));
  }
}

TEST_CASE("frozen gates pass no gradient") {
  Rng rng(2);
  Tensor w = random_tensor({3, 3}, rng, 1.0f, true);
  GatedParameter p(w, 5.0f, GateMode::frozen_gate);
  Graph g;
  GatedForward fwd = gated_forward(g, p, p.sample(rng));
  g.backward(g.sum(fwd.effective));
  CHECK_FALSE(p.gate().has_grad());
  CHECK(w.has_grad());
}

TEST_CASE("finalization") {
  Rng rng(8);
  SUBCASE("nonnegative gates keep the weight") {
    Tensor w = random_tensor({6}, rng);
    const auto before = std::vector<float>(w.values().begin(), w.values().end());
    GatedParameter p(w, 0.0f);
    p.finalize();
    CHECK(std::vector<float>(p.weight().values().begin(), p.weight().values().end()) == before);
  }
  SUBCASE("negative gates zero the weight") {
    GatedParameter p(random_tensor({6}, rng), -0.1f);
    p.finalize();
    for (float v : p.weight().values()) CHECK(v == 0.0f);
  }
  SUBCASE("zero pattern equals the maximum-likelihood mask") {
    Tensor w = random_tensor({10, 10}, rng);
    for (auto& v : w.values())
      if (v == 0.0f) v = 1.0f;
    Tensor gate = random_tensor({10, 10}, rng);
    const PruneMask expect = sample_round(gate);
    GatedParameter p(w, gate, GateMode::train_bern);
    p.finalize();
    for (std::size_t i = 0; i < 100; ++i) CHECK((p.weight().values()[i] != 0.0f) == expect.kept(i));
    CHECK(p.mode() == GateMode::finalized);
    CHECK_THROWS_AS(p.gate(), LifecycleError);
    CHECK_THROWS_AS(p.finalize(), LifecycleError);
    CHECK_THROWS_AS(p.set_mode(GateMode::train_bern), LifecycleError);
  }
}

TEST_CASE("nnz count") {
  const Tensor init[] = {Tensor::full({3, 4}, 5.0f), Tensor::full({7}, 5.0f)};
  CHECK(count_nnz(init).nnz == 19);
  CHECK(count_nnz(init).total == 19);
  CHECK(count_nnz(init).sparsity() == 0.0);
  const Tensor off[] = {Tensor::full({3, 4}, -5.0f)};
  CHECK(count_nnz(off).nnz == 0);
  // sigmoid of [-2, 0, 1.5] is [0.12, 0.5, 0.82]; two round to 1.
  const Tensor mixed[] = {Tensor({3}, {-2.0f, 0.0f, 1.5f})};
  CHECK(count_nnz(mixed).nnz == 2);
}
