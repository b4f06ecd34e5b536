// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "smp/errors.hpp"
#include "smp/model.hpp"
#include "smp/train.hpp"
#include "support.hpp"

using namespace smp;
using smp::testing::tiny_dims;

namespace {

bool same_values(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.values().begin(), a.values().end(), b.values().begin());
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Reads the scene back out of the region features and captions it with a
// separate implementation of the grammar.
std::vector<int> caption_from_features(const std::vector<float>& f, std::size_t regions) {
  int counts[vocab::num_colors][vocab::num_shapes] = {};
  for (std::size_t r = 0; r < regions; ++r) {
    const float* x = f.data() + r * kRegionFeatures;
    if (x[vocab::num_colors + vocab::num_shapes] < 0.5f) continue;
    const int color = static_cast<int>(std::max_element(x, x + vocab::num_colors) - x);
    const float* s = x + vocab::num_colors;
    const int shape = static_cast<int>(std::max_element(s, s + vocab::num_shapes) - s);
    ++counts[color][shape];
  }
  std::vector<std::string> words;
  for (int c = 0; c < vocab::num_colors; ++c)
    for (int s = 0; s < vocab::num_shapes; ++s) {
      if (!counts[c][s]) continue;
      if (!words.empty()) words.push_back("and");
      static const char* numbers[] = {"one", "two", "three"};
      words.push_back(numbers[counts[c][s] - 1]);
      words.push_back(vocab::word(vocab::color_base + c));
      words.push_back(vocab::word((counts[c][s] == 1 ? vocab::shape_base : vocab::plural_base) + s));
    }
  std::vector<int> out;
  for (const auto& w : words)
    for (int t = 0; t < vocab::size; ++t)
      if (vocab::word(t) == w) out.push_back(t);
  out.push_back(vocab::eos);
  return out;
}

}  // namespace

TEST_CASE("registry names follow the attention decoder layout") {
  ModelDims d;
  d.hidden_dim = 64;
  const CaptionModel m = build_model(Arch::sa_lstm, d, 1);
  std::set<std::string> names;
  for (const auto& p : m.params()) names.insert(p.name);
  for (const char* n : {"decoder.embedding.weight", "decoder.lstm.kernel", "decoder.attention.key.weight",
                        "decoder.attention.query.weight", "decoder.attention.qk.weight", "decoder.output.weight"})
    CHECK(names.count(n) == 1);
  CHECK(m.params().find("decoder.lstm.kernel").value.cols() == 4 * 64);
  CHECK(d.vocab == vocab::size);
}

TEST_CASE("parameter counts") {
  // Hand count for tiny dims (feature 12, encoder 8, embed 6, hidden 10,
  // attention 6, vocab 22):
  //   fc1 12*8+8, fc2 8*8+8, init 8*20+20, embedding 22*6, key 8*6+6,
  //   query 10*6, qk 6, lstm (6+8+10)*40 + 40, output 10*22+22
  const std::size_t hand = 104 + 72 + 180 + 132 + 54 + 60 + 6 + 960 + 40 + 242;
  CHECK(hand == 1850);
  CHECK(expected_parameter_count(Arch::sa_lstm, tiny_dims()) == hand);
  CHECK(build_model(Arch::sa_lstm, tiny_dims(), 0).params().total_count() == hand);
  // Default toy dims, same breakdown.
  const std::size_t toy = 624 + 2352 + 9408 + 528 + 1568 + 3072 + 32 + 64512 + 384 + 2134;
  CHECK(build_model(Arch::sa_lstm, ModelDims{}, 0).params().total_count() == toy);

  for (Arch a : {Arch::sa_lstm, Arch::sa_gru, Arch::mini_transformer})
    for (ModelDims d : {tiny_dims(), ModelDims{}}) {
      CAPTURE(to_string(a));
      const CaptionModel m = build_model(a, d, 2);
      std::size_t numel = 0;
      for (const auto& p : m.params()) numel += p.value.numel();
      CHECK(numel == expected_parameter_count(a, d));
      CHECK(m.params().prunable_count() + m.params().excluded_count() == numel);
    }
}

TEST_CASE("excluded parameters are exactly the biases and normalisation terms") {
  for (Arch a : {Arch::sa_lstm, Arch::sa_gru, Arch::mini_transformer}) {
    const CaptionModel m = build_model(a, tiny_dims(), 1);
    for (const auto& p : m.params()) {
      CAPTURE(p.name);
      const bool bias_or_norm = ends_with(p.name, "bias") || ends_with(p.name, ".gamma") || ends_with(p.name, ".beta");
      CHECK(bias_or_norm == !p.prunable());
    }
  }
}

TEST_CASE("model construction") {
  const CaptionModel a = build_model(Arch::sa_gru, tiny_dims(), 9);
  const CaptionModel b = build_model(Arch::sa_gru, tiny_dims(), 9);
  const CaptionModel c = build_model(Arch::sa_gru, tiny_dims(), 10);
  bool differs = false;
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    CHECK(same_values(a.params()[i].value, b.params()[i].value));
    differs |= !same_values(a.params()[i].value, c.params()[i].value);
  }
  CHECK(differs);
  CHECK_THROWS_AS(parse_arch("two_layer_lstm"), ConfigError);
  ModelDims zero = tiny_dims();
  zero.hidden_dim = 0;
  CHECK_THROWS_AS(build_model(Arch::sa_lstm, zero, 1), ConfigError);
}

TEST_CASE("synthetic dataset") {
  const Dataset a = generate_dataset(5, 500);
  const Dataset b = generate_dataset(5, 500);
  CHECK(a.train.size() == 400);
  CHECK(a.val.size() == 50);
  CHECK(a.test.size() == 50);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].features == b.train[i].features);
    CHECK(a.train[i].caption == b.train[i].caption);
  }

  for (const auto* split : {&a.train, &a.val, &a.test})
    for (const auto& s : *split) {
      CHECK(s.caption.size() <= a.config.max_caption);
      CHECK(s.caption.back() == vocab::eos);
      CHECK(describe(s.spec) == s.caption);
      CHECK(caption_from_features(s.features, a.config.regions) == s.caption);
    }
  const SceneSpec two_red_circles{{-1, 0, 0, -1, -1, -1}};
  CHECK(vocab::render(describe(two_red_circles)) == "two red circles");

  const auto dir = std::filesystem::temp_directory_path() / "smp_test_dataset";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_dataset(dir / "a.smpd", a, 500);
  write_dataset(dir / "b.smpd", b, 500);
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  CHECK(bytes(dir / "a.smpd") == bytes(dir / "b.smpd"));
  const Dataset c = read_dataset(dir / "a.smpd");
  CHECK(c.test.back().features == a.test.back().features);
  const Dataset cached = load_or_generate(dir, 5, 500);
  const Dataset again = load_or_generate(dir, 5, 500);
  CHECK(again.val.front().caption == a.val.front().caption);
  (void)cached;
  std::filesystem::remove_all(dir);

  CHECK_THROWS_AS(generate_dataset(1, 0), ConfigError);
}

TEST_CASE("training loop") {
  const Dataset data = generate_dataset(2, 400);
  TrainOptions o;
  o.batch_size = 32;
  o.adam = {1e-2f, 0.9f, 0.999f, 1e-2f};
  o.seed = 1;

  SUBCASE("zero steps leave the model unchanged") {
    CaptionModel m = build_model(Arch::sa_lstm, tiny_dims(), 4);
    const CaptionModel before = m.clone();
    o.steps = 0;
    CHECK(train(m, data, o).steps == 0);
    for (std::size_t i = 0; i < m.params().size(); ++i) CHECK(same_values(m.params()[i].value, before.params()[i].value));
  }

  SUBCASE("dense loss decreases over epoch averages") {
    CaptionModel m = build_model(Arch::sa_lstm, tiny_dims(), 4);
    o.steps = 200;
    const TrainResult r = train(m, data, o);
    REQUIRE(r.xe_loss.size() == 200);
    // 320 training scenes at batch 32: an epoch is 10 steps. Averages over
    // four epochs smooth out batch-to-batch noise.
    std::vector<double> avg;
    for (std::size_t e = 0; e < 200; e += 40) {
      double s = 0;
      for (std::size_t i = e; i < e + 40; ++i) s += r.xe_loss[i];
      avg.push_back(s / 40.0);
    }
    for (std::size_t i = 1; i < avg.size(); ++i) CHECK(avg[i] <= avg[i - 1]);
  }

  SUBCASE("divergence aborts") {
    CaptionModel m = build_model(Arch::sa_lstm, tiny_dims(), 4);
    o.steps = 50;
    o.adam.lr = 50.0f;
    o.divergence_factor = 1.5f;
    CHECK_THROWS_AS(train(m, data, o), TrainingError);
  }
}

TEST_CASE("evaluation") {
  const Dataset data = generate_dataset(3, 1000);

  SUBCASE("untrained models sit near chance") {
    // A random-weights model has no information about the scene. Averaged
    // over initialisations its argmax hits a target token about 1/vocab of
    // the time.
    double mean = 0.0;
    const int inits = 10;
    for (int s = 0; s < inits; ++s) {
      const EvalResult r = evaluate(build_model(Arch::sa_lstm, tiny_dims(), 100 + s), data.val);
      CHECK(r.caption_stats.unique_fraction >= 0.0);
      CHECK(r.caption_stats.unique_fraction <= 1.0);
      mean += r.token_accuracy / inits;
    }
    CHECK(std::abs(mean - 1.0 / vocab::size) <= 0.05);
  }

  SUBCASE("exact match and caption stats follow their definitions") {
    CaptionModel m = build_model(Arch::sa_lstm, tiny_dims(), 7);
    TrainOptions o;
    o.steps = 150;
    o.adam = {2e-2f, 0.9f, 0.999f, 1e-2f};
    train(m, data, o);
    const EvalResult r = evaluate(m, data.val, 32);
    const std::vector<Tensor> ws = inference_weights(m.params());
    const Batch b = make_batch(data.val, m.dims().max_len);
    const auto caps = m.greedy(ws, b);
    std::size_t exact = 0, words = 0;
    std::set<std::vector<int>> unique;
    for (std::size_t i = 0; i < caps.size(); ++i) {
      exact += caps[i] == data.val[i].caption;
      unique.insert(caps[i]);
      for (int t : caps[i]) words += t != vocab::eos;
    }
    const double n = static_cast<double>(caps.size());
    CHECK(r.exact_match == doctest::Approx(exact / n));
    CHECK(r.caption_stats.unique_fraction == doctest::Approx(unique.size() / n));
    CHECK(r.caption_stats.avg_length == doctest::Approx(words / n));
    CHECK(r.token_accuracy > 0.3);
  }

  SUBCASE("references scored as captions give exact match 1") {
    const Batch b = make_batch(data.val, 8);
    std::size_t exact = 0;
    for (std::size_t i = 0; i < b.references.size(); ++i) exact += b.references[i] == data.val[i].caption;
    CHECK(exact == data.val.size());
  }
}

TEST_CASE("cost report") {
  CaptionModel m = build_model(Arch::sa_lstm, ModelDims{}, 1);
  const CostReport dense = cost_report(m);
  CHECK(dense.nnz == dense.p_total);
  CHECK(dense.p_total == m.params().total_count());
  CHECK(dense.flops_per_caption == dense.flops_dense);
  CHECK(dense.decoding == "greedy");

  // Prune 95% of every prunable tensor (every 20th weight survives).
  for (auto& p : m.params()) {
    if (!p.prunable()) continue;
    PruneMask mask = PruneMask::ones(p.value.shape());
    for (std::size_t i = 0; i < p.value.numel(); ++i)
      if (i % 20 != 0) mask.set(i, false);
    apply_mask(p, std::move(mask));
  }
  const CostReport sparse = cost_report(m);
  const double expect = 0.05 * static_cast<double>(m.params().prunable_count()) + m.params().excluded_count();
  CHECK(static_cast<double>(sparse.nnz) == doctest::Approx(expect).epsilon(0.01));
  CHECK(sparse.flops_per_caption < dense.flops_dense);
  CHECK(sparse.flops_dense == dense.flops_dense);

  // Dense FLOPs by hand for the toy model at 9 tokens, K = 6 regions:
  // encoder 6*(12*48 + 48*48), init 48*192, keys 6*48*32, query 9*96*32,
  // qk 6*9*32, context 6*48*9, lstm 9*168*384, output 9*96*22; two per MAC.
  const double macs = 6.0 * (12 * 48 + 48 * 48) + 48 * 192 + 6.0 * 48 * 32 + 9.0 * 96 * 32 + 6.0 * 9 * 32 +
                      6.0 * 48 * 9 + 9.0 * 168 * 384 + 9.0 * 96 * 22;
  CHECK(dense.flops_dense == doctest::Approx(2.0 * macs));
}
