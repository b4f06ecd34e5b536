// SPDX-License-Identifier: Apache-2.0
// Acceptance runner. Trains the toy runs the directional criteria need, then
// prints one PASS/FAIL line per criterion and exits nonzero on any failure.
//
//   smp_acceptance [--out DIR] [--jobs N] [--reuse]
//
// Runs execute in child processes (at most --jobs at once). With --reuse a
// seed directory whose stored config hash matches is not trained again; its
// recorded CPU time is reused too.

#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "oracles.hpp"
#include "smp/baselines.hpp"
#include "smp/checkpoint.hpp"
#include "smp/errors.hpp"
#include "smp/gating.hpp"
#include "smp/harness.hpp"
#include "smp/smp.hpp"
#include "support.hpp"

using namespace smp;
using namespace smp::testing;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3};
const Part kDecoder[] = {Part::decoder};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// Training runs

struct Job {
  ExperimentConfig config;
  std::uint64_t seed;
  fs::path dir;
};

struct JobResult {
  SeedMetrics metrics;
  double cpu_seconds = -1.0;
};

ExperimentConfig toy(const fs::path& out, const std::string& name, const std::string& method, double s) {
  ExperimentConfig c;
  c.name = name;
  c.method = method;
  c.s_target = s;
  c.seeds.assign(std::begin(kSeeds), std::end(kSeeds));
  c.out = out;
  return c;
}

class Runner {
 public:
  Runner(int jobs, bool reuse) : jobs_(std::max(1, jobs)), reuse_(reuse) {}

  void add(const ExperimentConfig& c) {
    for (std::uint64_t s : c.seeds) jobs_list_.push_back({c, s, c.out / c.name / ("seed-" + std::to_string(s))});
  }
  void add_single(const ExperimentConfig& c, std::uint64_t seed, const fs::path& dir) {
    jobs_list_.push_back({c, seed, dir});
  }

  // The first run of each seed builds that seed's pretrained encoder; the
  // rest start once every cache entry exists.
  void run_all() {
    std::vector<std::size_t> first, rest;
    std::map<std::string, bool> warmed;
    for (std::size_t i = 0; i < jobs_list_.size(); ++i) {
      const auto& j = jobs_list_[i];
      const std::string key = (j.config.out / "cache").string() + "#" + std::to_string(j.seed);
      (warmed.emplace(key, true).second ? first : rest).push_back(i);
    }
    run_batch(first);
    run_batch(rest);
  }

  const JobResult& result(const ExperimentConfig& c, std::uint64_t seed) const {
    const fs::path dir = c.out / c.name / ("seed-" + std::to_string(seed));
    return results_.at(dir.string());
  }
  const JobResult& result_at(const fs::path& dir) const { return results_.at(dir.string()); }

  std::vector<SeedMetrics> metrics(const ExperimentConfig& c) const {
    std::vector<SeedMetrics> out;
    for (std::uint64_t s : c.seeds) out.push_back(result(c, s).metrics);
    return out;
  }

 private:
  static fs::path hash_file(const Job& j) { return j.dir / "acceptance.hash"; }
  static fs::path cpu_file(const Job& j) { return j.dir / "acceptance.cpu"; }

  // A reused run reports the CPU time measured when it was trained.
  double reusable_cpu(const Job& j) const {
    if (!reuse_ || !fs::exists(j.dir / "metrics.json")) return -1.0;
    std::ifstream in(hash_file(j)), cpu_in(cpu_file(j));
    std::string h;
    double cpu = -1.0;
    if (!(in >> h) || h != config_hash(j.config) + "-" + std::to_string(j.seed) || !(cpu_in >> cpu)) return -1.0;
    return cpu;
  }

  static void child(const Job& j) {
    int code = 1;
    try {
      const SeedMetrics m = run_seed(j.config, j.seed, j.dir);
      std::ofstream(hash_file(j)) << config_hash(j.config) << "-" << j.seed << "\n";
      code = m.error ? 1 : 0;
    } catch (const std::exception& e) {
      std::cerr << j.config.name << " seed " << j.seed << ": " << e.what() << "\n";
    }
    std::cout.flush();
    std::_Exit(code);
  }

  void collect(const Job& j, double cpu) {
    JobResult r;
    r.cpu_seconds = cpu;
    std::ifstream in(j.dir / "metrics.json");
    if (!in) {
      r.metrics.seed = j.seed;
      r.metrics.error = "no metrics written";
    } else {
      r.metrics = seed_metrics_from_json(nlohmann::json::parse(in));
    }
    results_[j.dir.string()] = std::move(r);
  }

  void run_batch(const std::vector<std::size_t>& batch) {
    std::map<pid_t, std::size_t> running;
    std::size_t next = 0;
    while (next < batch.size() || !running.empty()) {
      while (running.size() < static_cast<std::size_t>(jobs_) && next < batch.size()) {
        const Job& j = jobs_list_[batch[next]];
        if (const double cpu = reusable_cpu(j); cpu >= 0.0) {
          collect(j, cpu);
          ++next;
          continue;
        }
        fs::remove_all(j.dir);
        std::cout.flush();
        const pid_t pid = fork();
        if (pid < 0) throw std::runtime_error("fork failed");
        if (pid == 0) child(j);
        running[pid] = batch[next++];
      }
      if (running.empty()) continue;
      int status = 0;
      rusage usage{};
      const pid_t done = wait4(-1, &status, 0, &usage);
      if (done < 0) throw std::runtime_error("wait4 failed");
      auto it = running.find(done);
      if (it == running.end()) continue;
      const Job& j = jobs_list_[it->second];
      const double cpu = static_cast<double>(usage.ru_utime.tv_sec + usage.ru_stime.tv_sec) +
                         1e-6 * static_cast<double>(usage.ru_utime.tv_usec + usage.ru_stime.tv_usec);
      std::ofstream(cpu_file(j)) << fmt("%.3f", cpu) << "\n";
      collect(j, cpu);
      std::cout << "  trained " << j.config.name << " seed " << j.seed << fmt(" (%.1f s cpu)", cpu)
                << (results_[j.dir.string()].metrics.error ? " FAILED" : "") << std::endl;
      running.erase(it);
    }
  }

  int jobs_;
  bool reuse_;
  std::vector<Job> jobs_list_;
  std::map<std::string, JobResult> results_;
};

double mean_of(const std::vector<SeedMetrics>& ms, double SeedMetrics::*field) {
  double s = 0.0;
  for (const auto& m : ms) s += m.*field;
  return s / static_cast<double>(ms.size());
}

bool any_error(const std::vector<SeedMetrics>& ms, std::string& detail) {
  for (const auto& m : ms)
    if (m.error) {
      detail = "seed " + std::to_string(m.seed) + " failed: " + *m.error;
      return true;
    }
  return false;
}

// ---------------------------------------------------------------------------
// Property criteria

Outcome ste_exactness() {
  Rng rng(601);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 1 + rng.below(6), cols = 1 + rng.below(6);
    Tensor w = random_tensor({rows, cols}, rng, 1.0f, true);
    Tensor gate = random_tensor({rows, cols}, rng, 3.0f);
    const GateMode mode = rng.below(2) ? GateMode::train_bern : GateMode::train_round;
    GatedParameter p(w, gate, mode);
    const PruneMask mask = p.sample(rng);
    Graph g;
    GatedForward fwd = gated_forward(g, p, mask);
    // A random downstream graph: matmul, optional nonlinearity, weighted sum.
    const std::size_t out = 1 + rng.below(4);
    Tensor y = g.matmul(fwd.effective, random_tensor({cols, out}, rng));
    switch (rng.below(3)) {
      case 0: y = g.tanh(y); break;
      case 1: y = g.sigmoid(y); break;
      default: y = g.mul(y, y); break;
    }
    g.backward(g.sum(g.mul(y, random_tensor({rows, out}, rng))));
    const auto a = fwd.probs.grad_view(), b = fwd.sample.grad_view();
    if (a.size() != b.size() || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) != 0) ++mismatches;
  }
  return {mismatches == 0, fmt("%zu of 1000 random graphs differ", mismatches)};
}

Outcome schedule_exactness() {
  bool ok = true;
  double worst_mid = 0.0;
  for (std::size_t n : {2u, 10u, 1000u, 1500u, 123456u}) {
    ok &= anneal_alpha(0, n) == 0.0 && anneal_alpha(n, n) == 1.0 && anneal_alpha(n / 2, n) == 0.5;
  }
  for (double sf : {0.5, 0.8, 0.9, 0.975}) {
    for (auto [t0, t1] : {std::pair<std::size_t, std::size_t>{0, 1000}, {50, 750}, {10, 30}}) {
      ok &= gradual_schedule(t0, t0, t1, sf) == 0.0 && gradual_schedule(t1, t0, t1, sf) == sf;
      worst_mid = std::max(worst_mid, std::abs(gradual_schedule((t0 + t1) / 2, t0, t1, sf) - 0.875 * sf));
    }
  }
  ok &= worst_mid <= 1e-6;
  return {ok, fmt("alpha endpoints/midpoint exact; gradual midpoint error %.2e", worst_mid)};
}

Outcome finalization_consistency() {
  Rng rng(808);
  std::size_t bad = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Shape shape{1 + rng.below(9), 1 + rng.below(9)};
    Tensor w = random_tensor(shape, rng);
    for (auto& v : w.values())
      if (v == 0.0f) v = 1.0f;
    Tensor gate = random_tensor(shape, rng, 2.0f);
    // A few exact zeros and tiny negatives exercise the tie rule.
    if (trial % 3 == 0) gate.values()[0] = 0.0f;
    if (trial % 5 == 0) gate.values()[gate.numel() - 1] = -1e-9f;
    const PruneMask expect = sample_round(gate);
    GatedParameter p(w, gate, GateMode::train_bern);
    p.finalize();
    for (std::size_t i = 0; i < w.numel(); ++i)
      if ((p.weight().values()[i] != 0.0f) != expect.kept(i)) {
        ++bad;
        break;
      }
  }
  return {bad == 0, fmt("%zu of 1000 gate tensors disagree", bad)};
}

Outcome bernoulli_calibration() {
  Rng rng(909);
  bool ok = true;
  std::ostringstream os;
  for (float g : {-2.0f, 0.0f, 2.0f}) {
    const double rate = static_cast<double>(sample_bern(Tensor::full({100000}, g), rng).nnz()) / 1e5;
    const double expect = 1.0 / (1.0 + std::exp(-static_cast<double>(g)));
    ok &= std::abs(rate - expect) <= 0.01;
    os << fmt("g=%+.0f rate %.4f vs %.4f; ", g, rate, expect);
  }
  return {ok, os.str()};
}

Outcome baseline_oracles() {
  Rng rng(1010);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const auto ws = random_layers(rng, 1000, trial % 2 == 0);
    const double s = rng.uniform();
    const auto blind = magnitude_prune_blind(ws, s);
    const auto uniform = magnitude_prune_uniform(ws, s);
    const auto eb = oracle_blind(ws, s), eu = oracle_uniform(ws, s);
    for (std::size_t t = 0; t < ws.size(); ++t) {
      mismatches += !std::equal(blind[t].bits().begin(), blind[t].bits().end(), eb[t].begin(), eb[t].end());
      mismatches += !std::equal(uniform[t].bits().begin(), uniform[t].bits().end(), eu[t].begin(), eu[t].end());
    }
  }

  const SnipOracle snip = snip_vs_finite_difference(11);

  const Dataset data = generate_dataset(1, 300);
  CaptionModel model = build_model(Arch::sa_lstm, tiny_dims(), 5);
  const InitSnapshot init = InitSnapshot::capture(model);
  TrainOptions o;
  o.steps = 40;
  o.batch_size = 16;
  o.adam = {1e-2f, 0.9f, 0.999f, 1e-2f};
  train(model, data, o);
  PrunerSpec inner;
  inner.kind = PrunerKind::hard_blind;
  inner.s_target = 0.8;
  const auto masks = lottery_oneshot(model, init, inner, kDecoder);
  const auto idx = prunable_indices(model, kDecoder);
  std::size_t survivors = 0, rewound = 0;
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const Parameter& p = model.params()[idx[j]];
    const auto& v0 = init.values().at(p.name);
    for (std::size_t i = 0; i < v0.size(); ++i)
      if (masks[j].kept(i)) {
        ++survivors;
        rewound += std::bit_cast<std::uint32_t>(p.value.values()[i]) == std::bit_cast<std::uint32_t>(v0[i]);
      }
  }
  const bool ok = mismatches == 0 && snip.parameters <= 50 && snip.kendall_tau == 1.0 && survivors > 0 &&
                  rewound == survivors;
  return {ok, fmt("blind/uniform mismatches %zu; snip tau %.4f on %zu params; lottery %zu/%zu survivors at init",
                  mismatches, snip.kendall_tau, snip.parameters, rewound, survivors)};
}

Outcome serialization(const fs::path& sparse_ckpt, const fs::path& scratch) {
  Rng rng(1212);
  std::size_t bad_roundtrips = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Checkpoint c;
    const std::size_t n = 1 + rng.below(4);
    for (std::size_t k = 0; k < n; ++k) c.records.push_back(random_record(rng, k));
    const Checkpoint back = decode_checkpoint(encode_checkpoint(c));
    bool same = back.records.size() == n;
    for (std::size_t k = 0; same && k < n; ++k) same = bit_equal(back.records[k].value, c.records[k].value);
    bad_roundtrips += !same;
  }

  fs::create_directories(scratch);
  const CaptionModel model = load_model(sparse_ckpt);
  // Only the decoder is pruned in this run; the frozen encoder stays dense.
  const Part decoder[] = {Part::decoder};
  std::size_t kept = 0, total = 0;
  for (const Tensor& w : prunable_weights(model, decoder))
    for (float x : w.values()) {
      kept += x != 0.0f;
      ++total;
    }
  const double sparsity = 1.0 - static_cast<double>(kept) / static_cast<double>(total);
  save_model(scratch / "dense.smpc", model, StoragePolicy::dense);
  const auto sparse_size = fs::file_size(sparse_ckpt), dense_size = fs::file_size(scratch / "dense.smpc");

  // Every truncation of the real checkpoint plus random byte corruption.
  const auto bytes = file_bytes(sparse_ckpt);
  std::size_t escaped = 0, accepted_truncations = 0;
  auto probe = [&](std::span<const std::uint8_t> b, bool must_reject) {
    try {
      decode_checkpoint(b);
      accepted_truncations += must_reject;
    } catch (const FormatError&) {
    } catch (...) {
      ++escaped;
    }
  };
  for (std::size_t len = 0; len < bytes.size(); len += 1 + len / 64) probe(std::span(bytes).first(len), true);
  for (int trial = 0; trial < 2000; ++trial) {
    auto b = bytes;
    for (std::size_t f = 0; f < 1 + rng.below(3); ++f) b[rng.below(b.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    probe(b, false);
  }
  const bool ok = bad_roundtrips == 0 && sparsity >= 0.94 && sparse_size < dense_size && escaped == 0 &&
                  accepted_truncations == 0;
  return {ok, fmt("round-trip failures %zu/1000; %.1f%%-sparse decoder file %ju B vs dense %ju B; "
                  "accepted truncations %zu, non-format exceptions %zu",
                  bad_roundtrips, 100.0 * sparsity, static_cast<std::uintmax_t>(sparse_size),
                  static_cast<std::uintmax_t>(dense_size), accepted_truncations, escaped)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the supermask pruning toolkit"};
  fs::path out = "acceptance-runs";
  int jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  bool reuse = false;
  app.add_option("--out", out, "Directory for runs");
  app.add_option("--jobs,-j", jobs, "Concurrent training processes");
  app.add_flag("--reuse", reuse, "Reuse finished runs whose config hash matches");
  CLI11_PARSE(app, argc, argv);

  const auto start = std::chrono::steady_clock::now();
  std::cout << "acceptance: runs under " << out.string() << ", " << jobs << " job(s)" << std::endl;

  Runner runner(jobs, reuse);
  std::vector<ExperimentConfig> smp_levels;
  for (double s : {0.8, 0.9, 0.95}) smp_levels.push_back(toy(out, fmt("smp-%.3f", s), "smp", s));
  ExperimentConfig undershoot = toy(out, "smp-0.900-lambda1", "smp", 0.9);
  undershoot.lambda = 1.0;
  ExperimentConfig negative_init = toy(out, "smp-0.800-m-5", "smp", 0.8);
  negative_init.m = -5.0f;
  const ExperimentConfig dense = toy(out, "dense", "dense", 0.0);
  const ExperimentConfig smp975 = toy(out, "smp-0.975", "smp", 0.975);
  const ExperimentConfig gradual975 = toy(out, "gradual-0.975", "gradual_uniform", 0.975);
  const ExperimentConfig hard975 = toy(out, "hard-uniform-0.975", "hard_uniform", 0.975);
  ExperimentConfig scheme_b = toy(out, "scheme-B-gradual-0.900", "gradual_uniform", 0.9);
  scheme_b.scheme = Scheme::B;
  ExperimentConfig scheme_c = toy(out, "scheme-C-gradual-0.900", "gradual_uniform", 0.9);
  scheme_c.scheme = Scheme::C;

  for (const auto& c : smp_levels) runner.add(c);
  for (const ExperimentConfig* c : std::initializer_list<const ExperimentConfig*>{
           &undershoot, &negative_init, &dense, &smp975, &gradual975, &hard975, &scheme_b, &scheme_c})
    runner.add(*c);
  // Determinism: the first SMP run again, from scratch, in its own tree
  // (including its own encoder cache).
  ExperimentConfig repeat = smp_levels[0];
  repeat.out = out / "repeat";
  const fs::path repeat_dir = repeat.out / repeat.name / "seed-1";
  runner.add_single(repeat, 1, repeat_dir);
  runner.run_all();

  std::vector<std::pair<std::string, Outcome>> results;

  {  // 1
    bool ok = true;
    std::ostringstream os;
    double worst = 0.0, slowest = 0.0;
    for (const auto& c : smp_levels)
      for (std::uint64_t s : kSeeds) {
        const JobResult& r = runner.result(c, s);
        if (r.metrics.error) {
          ok = false;
          os << c.name << " seed " << s << " failed; ";
          continue;
        }
        const double err = std::abs(r.metrics.decoder_sparsity - c.s_target);
        worst = std::max(worst, err);
        slowest = std::max(slowest, r.cpu_seconds);
        ok &= err <= 0.01 && r.cpu_seconds <= 300.0;
        os << fmt("%.3f:%.4f ", c.s_target, r.metrics.decoder_sparsity);
      }
    results.push_back({"sparsity attainment", {ok, os.str() + fmt("| max |err| %.4f, slowest run %.0f s cpu", worst, slowest)}});
  }
  {  // 2
    const auto ms = runner.metrics(undershoot);
    std::string detail;
    bool ok = !any_error(ms, detail);
    std::ostringstream os;
    for (const auto& m : ms) {
      ok &= m.decoder_sparsity < 0.85;
      os << fmt("%.4f ", m.decoder_sparsity);
    }
    results.push_back({"undershoot at lambda 1", {ok, detail.empty() ? "final sparsity " + os.str() + "(< 0.85)" : detail}});
  }
  {  // 3
    const auto pos = runner.metrics(smp_levels[0]), neg = runner.metrics(negative_init);
    std::string detail;
    const bool failed = any_error(pos, detail) || any_error(neg, detail);
    const double a = mean_of(pos, &SeedMetrics::token_accuracy), b = mean_of(neg, &SeedMetrics::token_accuracy);
    bool at_target = true;
    for (const auto* set : {&pos, &neg})
      for (const auto& m : *set) at_target &= std::abs(m.decoder_sparsity - 0.8) <= 0.01;
    const bool ok = !failed && (a > b || (a == b && at_target));
    results.push_back({"init ordering m=5 vs m=-5",
                       {ok, failed ? detail
                                   : fmt("token accuracy %.4f (m=5) vs %.4f (m=-5); both at target: %s", a, b,
                                         at_target ? "yes" : "no")}});
  }
  {  // 4
    const auto d = runner.metrics(dense), s80 = runner.metrics(smp_levels[0]), s95 = runner.metrics(smp_levels[2]);
    std::string detail;
    const bool failed = any_error(d, detail) || any_error(s80, detail) || any_error(s95, detail);
    const double ad = mean_of(d, &SeedMetrics::token_accuracy), a80 = mean_of(s80, &SeedMetrics::token_accuracy),
                 a95 = mean_of(s95, &SeedMetrics::token_accuracy);
    const bool ok = !failed && ad - a80 <= 0.02 && ad - a95 <= 0.05;
    results.push_back({"dense match at 80% and 95%",
                       {ok, failed ? detail : fmt("dense %.4f, 80%% %.4f, 95%% %.4f", ad, a80, a95)}});
  }
  {  // 5
    const auto a = runner.metrics(smp975), b = runner.metrics(gradual975), c = runner.metrics(hard975);
    std::string detail;
    const bool failed = any_error(a, detail) || any_error(b, detail) || any_error(c, detail);
    const double sa = mean_of(a, &SeedMetrics::token_accuracy), sb = mean_of(b, &SeedMetrics::token_accuracy),
                 sc = mean_of(c, &SeedMetrics::token_accuracy);
    const bool ok = !failed && sa > sb && sb >= sc - 0.01;
    results.push_back({"method ordering at 97.5%",
                       {ok, failed ? detail : fmt("smp %.4f > gradual %.4f >= hard-uniform %.4f (-0.01)", sa, sb, sc)}});
  }
  results.push_back({"STE exactness", ste_exactness()});
  results.push_back({"schedule exactness", schedule_exactness()});
  results.push_back({"mask/finalization consistency", finalization_consistency()});
  results.push_back({"Bernoulli calibration", bernoulli_calibration()});
  results.push_back({"baseline oracles", baseline_oracles()});
  {  // 11
    const auto b = runner.metrics(scheme_b), c = runner.metrics(scheme_c);
    std::string detail;
    const bool failed = any_error(b, detail) || any_error(c, detail);
    const double mb = mean_of(b, &SeedMetrics::token_accuracy), mc = mean_of(c, &SeedMetrics::token_accuracy);
    results.push_back({"scheme C over scheme B (gradual, 90%)",
                       {!failed && mc >= mb, failed ? detail : fmt("token accuracy C %.4f vs B %.4f", mc, mb)}});
  }
  {  // 12
    const JobResult& r = runner.result(smp_levels[2], 1);
    Outcome o;
    if (r.metrics.error)
      o = {false, "95% run failed"};
    else
      o = serialization(out / smp_levels[2].name / "seed-1" / r.metrics.checkpoint, out / "serialization");
    results.push_back({"serialization", o});
  }
  {  // 13
    const fs::path first = out / smp_levels[0].name / "seed-1";
    const JobResult& a = runner.result(smp_levels[0], 1);
    const JobResult& b = runner.result_at(repeat_dir);
    bool ok = !a.metrics.error && !b.metrics.error;
    std::size_t compared = 0;
    if (ok) {
      ok &= file_bytes(first / "metrics.json") == file_bytes(repeat_dir / "metrics.json");
      ok &= file_bytes(first / "model.smpc") == file_bytes(repeat_dir / "model.smpc");
      for (const auto& t : a.metrics.telemetry) ok &= file_bytes(first / t) == file_bytes(repeat_dir / t);
      compared = 2 + a.metrics.telemetry.size();
    }
    results.push_back({"determinism", {ok, fmt("%zu files byte-identical across a repeated run: %s", compared,
                                               ok ? "yes" : "no")}});
  }

  int failures = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& [title, o] = results[i];
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << fmt(" %2zu ", i + 1) << title << ": " << o.detail << "\n";
  }
  const double minutes =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() / 60.0;
  std::cout << fmt("%d of %zu criteria passed in %.1f min", static_cast<int>(results.size()) - failures,
                   results.size(), minutes)
            << std::endl;
  return failures == 0 ? 0 : 1;
}
