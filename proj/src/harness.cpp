// SPDX-License-Identifier: Apache-2.0
#include "smp/harness.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "smp/checkpoint.hpp"
#include "smp/errors.hpp"

namespace smp {

using nlohmann::json;
namespace fs = std::filesystem;

Scheme parse_scheme(const std::string& name) {
  if (name == "decoder_only") return Scheme::decoder_only;
  if (name == "A") return Scheme::A;
  if (name == "B") return Scheme::B;
  if (name == "C") return Scheme::C;
  throw ConfigError("unknown scheme '" + name + "' (expected decoder_only, A, B or C)");
}

const char* to_string(Scheme scheme) noexcept {
  switch (scheme) {
    case Scheme::decoder_only: return "decoder_only";
    case Scheme::A: return "A";
    case Scheme::B: return "B";
    case Scheme::C: return "C";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

bool is_pruner_method(const std::string& m) {
  try {
    parse_pruner_kind(m);
    return true;
  } catch (const ConfigError&) {
    return false;
  }
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
json optional_number(const std::optional<float>& v) { return v ? json(*v) : json(nullptr); }

// Recursively overlays `patch` on `base`, rejecting keys absent from base.
void merge_strict(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config" + (prefix.empty() ? "" : " key '" + prefix + "'") + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (base[key].is_object() && key != "dims") {
      merge_strict(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

template <typename T>
T get(const json& j, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (method != "dense" && method != "smp" && !is_pruner_method(method))
    throw ConfigError("unknown method '" + method + "'");
  if (method == "lottery" && !is_pruner_method(lottery_inner)) throw ConfigError("unknown lottery inner pruner");
  if (!(s_target >= 0.0 && s_target < 1.0)) throw ConfigError("s_target must be in [0, 1)");
  if (lambda && *lambda < 0.0) throw ConfigError("lambda must be nonnegative");
  if (steps == 0) throw ConfigError("steps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("seeds must be distinct");
  if (n_samples < 10) throw ConfigError("dataset.n_samples must be at least 10");
  if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("dropout must be in [0, 1)");
  if (pruning_dropout() < 0.0f || pruning_dropout() >= 1.0f) throw ConfigError("sparse_dropout must be in [0, 1)");
  if (eval_split != "train" && eval_split != "val" && eval_split != "test")
    throw ConfigError("eval_split must be train, val or test");
  if (gradual_frequency == 0) throw ConfigError("gradual.frequency must be positive");
  if (scheme != Scheme::decoder_only) {
    if (method != "smp" && method != "gradual_uniform" && method != "hard_blind" && method != "hard_uniform" &&
        method != "hard_distribution")
      throw ConfigError(std::string("scheme ") + to_string(scheme) + " supports smp, gradual_uniform and hard_* methods");
    if (scheme == Scheme::A && method == "hard_blind")
      throw ConfigError("scheme A is not defined for hard_blind pruning");
  }
}

json config_to_json(const ExperimentConfig& c) {
  json seeds = json::array();
  for (auto s : c.seeds) seeds.push_back(s);
  return {
      {"name", c.name},
      {"arch", to_string(c.arch)},
      {"dims", dims_to_json(c.dims)},
      {"dataset", {{"seed", c.dataset_seed}, {"n_samples", c.n_samples}}},
      {"method", c.method},
      {"s_target", c.s_target},
      {"lambda", c.lambda ? json(*c.lambda) : json("auto")},
      {"m", c.m},
      {"gate_lr", c.gate_lr},
      {"gate_optimizer", to_string(c.gate_optimizer)},
      {"frozen_sampling", c.frozen_sampling == SampleKind::bernoulli ? "bernoulli" : "round"},
      {"optimizer",
       {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}, {"min_lr", c.min_lr}}},
      {"steps", c.steps},
      {"batch_size", c.batch_size},
      {"dropout", c.dropout},
      {"sparse_dropout", optional_number(c.sparse_dropout)},
      {"scheme", to_string(c.scheme)},
      {"seeds", seeds},
      {"encoder_pretrain_steps", c.encoder_pretrain_steps},
      {"finetune", {{"steps", c.finetune_steps}, {"lr", optional_number(c.finetune_lr)}}},
      {"gradual", {{"start", c.gradual_start}, {"end", c.gradual_end}, {"frequency", c.gradual_frequency}}},
      {"distribution_factor", optional_number(c.distribution_factor)},
      {"lottery_inner", c.lottery_inner},
      {"snip_batches", c.snip_batches},
      {"retrain_fraction", c.retrain_fraction},
      {"eval_split", c.eval_split},
      {"caption_len", c.caption_len},
      {"out", c.out.string()},
  };
}

json default_config_json() { return config_to_json(ExperimentConfig{}); }

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

ExperimentConfig config_from_json(const json& tree) {
  json t = default_config_json();
  merge_strict(t, tree, "");
  ExperimentConfig c;
  c.name = get<std::string>(t, "name");
  c.arch = parse_arch(get<std::string>(t, "arch"));
  c.dims = dims_from_json(t["dims"]);
  c.dataset_seed = get<std::uint64_t>(t["dataset"], "seed");
  c.n_samples = get<std::size_t>(t["dataset"], "n_samples");
  c.method = get<std::string>(t, "method");
  c.s_target = get<double>(t, "s_target");
  if (t["lambda"].is_string()) {
    if (t["lambda"] != "auto") throw ConfigError("lambda must be a number or \"auto\"");
  } else {
    c.lambda = get<double>(t, "lambda");
  }
  c.m = get<float>(t, "m");
  c.gate_lr = get<float>(t, "gate_lr");
  c.gate_optimizer = parse_gate_optimizer(get<std::string>(t, "gate_optimizer"));
  const auto fs_kind = get<std::string>(t, "frozen_sampling");
  if (fs_kind != "bernoulli" && fs_kind != "round") throw ConfigError("frozen_sampling must be bernoulli or round");
  c.frozen_sampling = fs_kind == "round" ? SampleKind::round : SampleKind::bernoulli;
  const json& o = t["optimizer"];
  c.adam = AdamConfig{get<float>(o, "lr"), get<float>(o, "beta1"), get<float>(o, "beta2"), get<float>(o, "eps")};
  c.min_lr = get<float>(o, "min_lr");
  c.steps = get<std::size_t>(t, "steps");
  c.batch_size = get<std::size_t>(t, "batch_size");
  c.dropout = get<float>(t, "dropout");
  if (!t["sparse_dropout"].is_null()) c.sparse_dropout = get<float>(t, "sparse_dropout");
  c.scheme = parse_scheme(get<std::string>(t, "scheme"));
  c.seeds = get<std::vector<std::uint64_t>>(t, "seeds");
  c.encoder_pretrain_steps = get<std::size_t>(t, "encoder_pretrain_steps");
  c.finetune_steps = get<std::size_t>(t["finetune"], "steps");
  if (!t["finetune"]["lr"].is_null()) c.finetune_lr = get<float>(t["finetune"], "lr");
  c.gradual_start = get<std::size_t>(t["gradual"], "start");
  c.gradual_end = get<std::size_t>(t["gradual"], "end");
  c.gradual_frequency = get<std::size_t>(t["gradual"], "frequency");
  if (!t["distribution_factor"].is_null()) c.distribution_factor = get<double>(t, "distribution_factor");
  c.lottery_inner = get<std::string>(t, "lottery_inner");
  c.snip_batches = get<std::size_t>(t, "snip_batches");
  c.retrain_fraction = get<double>(t, "retrain_fraction");
  c.eval_split = get<std::string>(t, "eval_split");
  c.caption_len = get<std::size_t>(t, "caption_len");
  c.out = get<std::string>(t, "out");
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  json tree = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config " + path.string());
    try {
      tree = json::parse(in, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(tree, o);
  return config_from_json(tree);
}

std::string config_hash(const ExperimentConfig& config) {
  json j = config_to_json(config);
  j.erase("out");
  return hex64(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// Reports

json to_json(const SeedMetrics& m) {
  json j = {{"seed", m.seed},
            {"token_accuracy", m.token_accuracy},
            {"exact_match", m.exact_match},
            {"xe_loss", m.xe_loss},
            {"unique_fraction", m.unique_fraction},
            {"avg_length", m.avg_length},
            {"sparsity", m.sparsity},
            {"encoder_sparsity", m.encoder_sparsity},
            {"decoder_sparsity", m.decoder_sparsity},
            {"nnz", m.nnz},
            {"prunable_nnz", m.prunable_nnz},
            {"flops_per_caption", m.flops},
            {"flops_dense", m.flops_dense},
            {"checkpoint_bytes", m.checkpoint_bytes},
            {"telemetry", m.telemetry},
            {"checkpoint", m.checkpoint},
            {"decoding", "greedy"}};
  if (m.error) j["error"] = *m.error;
  return j;
}

SeedMetrics seed_metrics_from_json(const json& j) {
  SeedMetrics m;
  m.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("error")) {
    m.error = j["error"].get<std::string>();
    return m;
  }
  m.token_accuracy = j.at("token_accuracy").get<double>();
  m.exact_match = j.at("exact_match").get<double>();
  m.xe_loss = j.at("xe_loss").get<double>();
  m.unique_fraction = j.at("unique_fraction").get<double>();
  m.avg_length = j.at("avg_length").get<double>();
  m.sparsity = j.at("sparsity").get<double>();
  m.encoder_sparsity = j.at("encoder_sparsity").get<double>();
  m.decoder_sparsity = j.at("decoder_sparsity").get<double>();
  m.nnz = j.at("nnz").get<std::size_t>();
  m.prunable_nnz = j.at("prunable_nnz").get<std::size_t>();
  m.flops = j.at("flops_per_caption").get<double>();
  m.flops_dense = j.at("flops_dense").get<double>();
  m.checkpoint_bytes = j.at("checkpoint_bytes").get<std::size_t>();
  m.telemetry = j.at("telemetry").get<std::vector<std::string>>();
  m.checkpoint = j.at("checkpoint").get<std::string>();
  return m;
}

std::map<std::string, std::pair<double, double>> summarize(const std::vector<SeedMetrics>& seeds) {
  std::map<std::string, std::vector<double>> cols;
  for (const auto& s : seeds) {
    if (s.error) continue;
    cols["token_accuracy"].push_back(s.token_accuracy);
    cols["exact_match"].push_back(s.exact_match);
    cols["xe_loss"].push_back(s.xe_loss);
    cols["unique_fraction"].push_back(s.unique_fraction);
    cols["avg_length"].push_back(s.avg_length);
    cols["sparsity"].push_back(s.sparsity);
    cols["nnz"].push_back(static_cast<double>(s.nnz));
    cols["flops_per_caption"].push_back(s.flops);
  }
  std::map<std::string, std::pair<double, double>> out;
  for (const auto& [k, v] : cols) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    out[k] = {mean, std::sqrt(var / static_cast<double>(v.size()))};
  }
  return out;
}

json to_json(const RunReport& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) seeds.push_back(to_json(s));
  json summary = json::object();
  for (const auto& [k, v] : r.summary) summary[k] = {{"mean", v.first}, {"std", v.second}};
  return {{"name", r.name}, {"config_hash", r.config_hash}, {"config", config_to_json(r.config)},
          {"seeds", seeds}, {"summary", summary}, {"decoding", "greedy"}};
}

// ---------------------------------------------------------------------------
// Runs

namespace {

const Part kBoth[] = {Part::encoder, Part::decoder};
const Part kEncoder[] = {Part::encoder};
const Part kDecoder[] = {Part::decoder};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

Dataset dataset_for(const ExperimentConfig& c) {
  return load_or_generate(c.out / "cache", c.dataset_seed, c.n_samples);
}

// Records xe loss and current hard-mask sparsity for phases without gates.
class ProgressHook : public TrainHook {
 public:
  explicit ProgressHook(std::vector<Part> parts) : parts_(std::move(parts)) {}

  void on_begin(CaptionModel&, const TrainOptions& o) override {
    records_.clear();
    records_.reserve(o.steps);
  }
  void after_update(CaptionModel& model, const StepContext& ctx) override {
    TelemetryRecord r;
    r.step = ctx.step;
    r.xe_loss = ctx.xe_loss;
    r.gate_mean = std::nan("");
    std::size_t nnz = 0, total = 0;
    for (std::size_t i : prunable_indices(model, parts_)) {
      const Parameter& p = model.params()[i];
      const std::size_t n = p.mask ? p.mask->nnz() : p.value.numel();
      nnz += n;
      total += p.value.numel();
      if (ctx.step % 100 == 0) r.layer_sparsity.push_back(1.0 - static_cast<double>(n) / static_cast<double>(p.value.numel()));
    }
    r.sparsity = total ? 1.0 - static_cast<double>(nnz) / static_cast<double>(total) : 0.0;
    records_.push_back(std::move(r));
  }
  const std::vector<TelemetryRecord>& records() const noexcept { return records_; }

 private:
  std::vector<Part> parts_;
  std::vector<TelemetryRecord> records_;
};

struct RunContext {
  const ExperimentConfig& cfg;
  const Dataset& data;
  std::uint64_t seed;
  fs::path dir;
  std::vector<std::string> telemetry;
  std::size_t phase = 0;

  TrainOptions options(std::size_t steps, std::optional<float> lr = std::nullopt) const {
    TrainOptions o;
    o.steps = steps;
    o.batch_size = cfg.batch_size;
    o.adam = cfg.adam;
    if (lr) o.adam.lr = *lr;
    o.min_lr = cfg.min_lr;
    o.seed = seed * 1000003ULL + phase;
    o.frozen_kind = cfg.frozen_sampling;
    o.divergence_floor = std::log(static_cast<float>(cfg.dims.vocab));
    return o;
  }

  SmpConfig smp_config() const {
    SmpConfig s;
    s.s_target = cfg.s_target;
    s.lambda = cfg.lambda;
    s.gate_lr = cfg.gate_lr;
    s.m = cfg.m;
    s.gate_optimizer = cfg.gate_optimizer;
    return s;
  }

  // Trains one phase with the given hooks and writes its telemetry file.
  void run(const std::string& name, CaptionModel& model, const TrainOptions& o, std::vector<TrainHook*> hooks,
           const SmpHook* smp, std::vector<Part> progress_parts) {
    ProgressHook progress(std::move(progress_parts));
    if (!smp) hooks.push_back(&progress);
    train(model, data, o, hooks);
    const auto& recs = smp ? smp->telemetry() : progress.records();
    const fs::path file = dir / ("telemetry-" + std::to_string(phase) + "-" + name + ".ndjson");
    std::ofstream out(file, std::ios::trunc);
    for (const auto& r : recs) write_ndjson(out, r);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    telemetry.push_back(file.filename().string());
    ++phase;
  }

  PrunerSpec spec(PrunerKind kind, std::size_t steps) const {
    PrunerSpec s;
    s.kind = kind;
    s.s_target = cfg.s_target;
    s.lambda_c = cfg.distribution_factor;
    s.retrain_fraction = cfg.retrain_fraction;
    s.snip_batches = cfg.snip_batches;
    if (kind == PrunerKind::gradual_uniform) {
      const bool automatic = cfg.gradual_start == 0 && cfg.gradual_end == 0;
      GradualWindow w;
      w.start = automatic ? steps / 30 : cfg.gradual_start;
      w.end = automatic ? steps / 2 : cfg.gradual_end;
      w.frequency = cfg.gradual_frequency;
      s.window = w;
    }
    if (kind == PrunerKind::lottery) {
      auto inner = std::make_shared<PrunerSpec>();
      inner->kind = parse_pruner_kind(cfg.lottery_inner);
      inner->s_target = cfg.s_target;
      inner->lambda_c = cfg.distribution_factor;
      s.inner = inner;
    }
    s.validate();
    return s;
  }
};

std::map<std::string, std::map<std::string, std::vector<float>>>& encoder_memo() {
  static std::map<std::string, std::map<std::string, std::vector<float>>> memo;
  return memo;
}

// Dense joint training of a separately seeded model; its encoder stands in
// for a pretrained feature extractor.
std::map<std::string, std::vector<float>> pretrained_encoder(const ExperimentConfig& cfg, const Dataset& data,
                                                             std::uint64_t seed) {
  const json key = {{"arch", to_string(cfg.arch)},
                    {"dims", dims_to_json(cfg.dims)},
                    {"data", {cfg.dataset_seed, cfg.n_samples}},
                    {"steps", cfg.encoder_pretrain_steps},
                    {"batch", cfg.batch_size},
                    {"adam", {cfg.adam.lr, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps, cfg.min_lr}},
                    {"dropout", cfg.dropout},
                    {"seed", seed}};
  auto& memo = encoder_memo();
  const std::string k = key.dump();
  if (auto it = memo.find(k); it != memo.end()) return it->second;

  auto extract = [](const CaptionModel& m) {
    std::map<std::string, std::vector<float>> enc;
    for (const auto& p : m.params())
      if (p.part == Part::encoder) enc[p.name] = std::vector<float>(p.value.values().begin(), p.value.values().end());
    return enc;
  };
  // Shared across processes; written to a unique temporary and renamed so
  // concurrent sweep children never observe a partial file.
  const fs::path cached = cfg.out / "cache" / ("encoder-" + hex64(fnv1a(k)) + ".smpc");
  if (fs::exists(cached)) {
    try {
      auto enc = extract(load_model(cached));
      memo.emplace(k, enc);
      return enc;
    } catch (const std::exception&) {
      // Unreadable cache entries are rebuilt below.
    }
  }

  const std::uint64_t pre_seed = seed ^ 0x5DEECE66DULL;
  CaptionModel model = build_model(cfg.arch, cfg.dims, pre_seed);
  model.set_dropout(cfg.dropout);
  TrainOptions o;
  o.steps = cfg.encoder_pretrain_steps;
  o.batch_size = cfg.batch_size;
  o.adam = cfg.adam;
  o.min_lr = cfg.min_lr;
  o.seed = pre_seed;
  train(model, data, o);
  fs::create_directories(cached.parent_path());
  const fs::path tmp = cached.string() + ".tmp" + std::to_string(::getpid());
  save_model(tmp, model, StoragePolicy::dense, {{"pretrain_key", key}});
  fs::rename(tmp, cached);
  auto enc = extract(model);
  memo.emplace(k, enc);
  return enc;
}

CaptionModel fresh_model(const ExperimentConfig& cfg, const Dataset& data, std::uint64_t seed) {
  CaptionModel model = build_model(cfg.arch, cfg.dims, seed);
  const auto enc = pretrained_encoder(cfg, data, seed);
  for (auto& p : model.params()) {
    if (p.part != Part::encoder) continue;
    const auto& v = enc.at(p.name);
    std::copy(v.begin(), v.end(), p.value.values().begin());
  }
  return model;
}

bool is_hard_method(const std::string& m) {
  return m == "hard_blind" || m == "hard_uniform" || m == "hard_distribution";
}

// Trains from the current state for cfg.steps while pruning `parts` with the
// configured method. Weights outside `trainable` stay frozen.
void prune_while_training(RunContext& ctx, CaptionModel& model, std::span<const Part> parts,
                          std::span<const Part> trainable, std::size_t steps) {
  const ExperimentConfig& cfg = ctx.cfg;
  const std::vector<Part> pv(parts.begin(), parts.end());
  for (Part p : kBoth)
    set_trainable(model, p, std::find(trainable.begin(), trainable.end(), p) != trainable.end());
  const std::string& m = cfg.method;
  if (m != "dense") model.set_dropout(cfg.pruning_dropout());

  if (m == "dense") {
    ctx.run("train", model, ctx.options(steps), {}, nullptr, pv);
  } else if (m == "smp") {
    SmpConfig sc = ctx.smp_config();
    attach_smp_gates(model, sc, parts);
    SmpHook hook(sc);
    ctx.run("smp", model, ctx.options(steps), {&hook}, &hook, pv);
  } else if (m == "gradual_uniform") {
    GradualHook hook(ctx.spec(PrunerKind::gradual_uniform, steps), pv);
    ctx.run("gradual", model, ctx.options(steps), {&hook}, nullptr, pv);
  } else if (is_hard_method(m)) {
    const PrunerSpec spec = ctx.spec(parse_pruner_kind(m), steps);
    model.set_dropout(cfg.dropout);
    ctx.run("train", model, ctx.options(steps), {}, nullptr, pv);
    apply_masks(model, parts, hard_masks(model, spec, parts));
    model.set_dropout(cfg.pruning_dropout());
    const auto retrain = static_cast<std::size_t>(std::llround(spec.retrain_fraction * static_cast<double>(steps)));
    ctx.run("retrain", model, ctx.options(retrain), {}, nullptr, pv);
  } else if (m == "snip") {
    const PrunerSpec spec = ctx.spec(PrunerKind::snip, steps);
    Rng rng(ctx.seed * 7919ULL + 17);
    std::vector<Batch> batches;
    for (std::size_t b = 0; b < spec.snip_batches; ++b) {
      std::vector<std::size_t> idx(cfg.batch_size);
      for (auto& i : idx) i = rng.below(ctx.data.train.size());
      batches.push_back(make_batch(ctx.data.train, idx, model.dims().max_len));
    }
    apply_masks(model, parts, snip_prune(model, batches, spec.s_target, parts));
    ctx.run("train", model, ctx.options(steps), {}, nullptr, pv);
  } else if (m == "lottery") {
    const PrunerSpec spec = ctx.spec(PrunerKind::lottery, steps);
    const InitSnapshot init = InitSnapshot::capture(model);
    model.set_dropout(cfg.dropout);
    ctx.run("train", model, ctx.options(steps), {}, nullptr, pv);
    lottery_oneshot(model, init, *spec.inner, parts);
    model.set_dropout(cfg.pruning_dropout());
    ctx.run("retrain", model, ctx.options(steps), {}, nullptr, pv);
  } else if (m == "supermask_maskonly") {
    for (Part p : kBoth) set_trainable(model, p, false);
    SmpConfig sc = ctx.smp_config();
    sc.sparsity_loss = false;
    attach_smp_gates(model, sc, parts);
    SmpHook hook(sc);
    ctx.run("maskonly", model, ctx.options(steps), {&hook}, &hook, pv);
  } else {
    throw ConfigError("unsupported method " + m);
  }
}

// Fine-tunes encoder and decoder; with `prune` set, `prune_parts` are pruned
// during the phase and everything else keeps its gates frozen / masks fixed.
void finetune(RunContext& ctx, CaptionModel& model, std::span<const Part> prune_parts, bool prune) {
  const ExperimentConfig& cfg = ctx.cfg;
  const std::size_t steps = cfg.resolved_finetune_steps();
  const auto opts = ctx.options(steps, cfg.finetune_lr);
  const std::vector<Part> both(std::begin(kBoth), std::end(kBoth));
  for (Part p : kBoth) set_trainable(model, p, true);
  for (auto& p : model.params())
    if (p.gated && p.gated->mode() != GateMode::finalized) p.gated->set_mode(GateMode::frozen_gate);
  model.set_dropout(cfg.pruning_dropout());

  if (!prune) {
    ctx.run("finetune", model, opts, {}, nullptr, both);
    return;
  }
  const std::string& m = cfg.method;
  if (m == "smp") {
    SmpConfig sc = ctx.smp_config();
    attach_smp_gates(model, sc, prune_parts);
    SmpHook hook(sc);
    ctx.run("finetune", model, opts, {&hook}, &hook, both);
  } else if (m == "gradual_uniform") {
    GradualHook hook(ctx.spec(PrunerKind::gradual_uniform, steps),
                     std::vector<Part>(prune_parts.begin(), prune_parts.end()));
    ctx.run("finetune", model, opts, {&hook}, nullptr, both);
  } else if (is_hard_method(m)) {
    apply_masks(model, prune_parts, hard_masks(model, ctx.spec(parse_pruner_kind(m), steps), prune_parts));
    ctx.run("finetune", model, opts, {}, nullptr, both);
  } else {
    throw ConfigError("method " + m + " cannot be used in a fine-tuning phase");
  }
}

// Copy-on-use: phases continue from a reloaded copy of the checkpoint.
CaptionModel checkpoint_and_reload(const CaptionModel& model, const fs::path& path) {
  save_model(path, model, StoragePolicy::sparse);
  return load_model(path);
}

double part_sparsity(const CaptionModel& model, Part part) {
  const Part parts[] = {part};
  std::size_t nnz = 0, total = 0;
  for (const Tensor& w : prunable_weights(model, parts)) {
    auto v = w.values();
    nnz += static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
    total += v.size();
  }
  return total ? 1.0 - static_cast<double>(nnz) / static_cast<double>(total) : 0.0;
}

}  // namespace

SeedMetrics run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& dir) {
  cfg.validate();
  fs::create_directories(dir);
  const Dataset data = dataset_for(cfg);
  RunContext ctx{cfg, data, seed, dir, {}, 0};
  CaptionModel model = fresh_model(cfg, data, seed);
  model.set_dropout(cfg.dropout);

  switch (cfg.scheme) {
    case Scheme::decoder_only:
      prune_while_training(ctx, model, kDecoder, kDecoder, cfg.steps);
      break;
    case Scheme::A:
      // Decoder trains while both parts are pruned; then both fine-tune with
      // gates frozen.
      prune_while_training(ctx, model, kBoth, kDecoder, cfg.steps);
      finetune(ctx, model, kBoth, false);
      break;
    case Scheme::B: {
      const std::string method = cfg.method;
      ExperimentConfig dense_cfg = cfg;
      dense_cfg.method = "dense";
      RunContext dctx{dense_cfg, data, seed, dir, {}, 0};
      prune_while_training(dctx, model, kDecoder, kDecoder, cfg.steps);
      ctx.telemetry = dctx.telemetry;
      ctx.phase = dctx.phase;
      model = checkpoint_and_reload(model, dir / "decoder-dense.smpc");
      finetune(ctx, model, kBoth, true);
      break;
    }
    case Scheme::C:
      prune_while_training(ctx, model, kDecoder, kDecoder, cfg.steps);
      model = checkpoint_and_reload(model, dir / "decoder-pruned.smpc");
      finetune(ctx, model, kEncoder, true);
      break;
  }

  bool gated = false;
  for (const auto& p : model.params()) gated = gated || (p.gated && p.gated->mode() != GateMode::finalized);
  if (gated) smp_finalize(model);

  SeedMetrics m;
  m.seed = seed;
  const EvalResult e = evaluate(model, data.split(cfg.eval_split));
  m.token_accuracy = e.token_accuracy;
  m.exact_match = e.exact_match;
  m.xe_loss = e.xe_loss;
  m.unique_fraction = e.caption_stats.unique_fraction;
  m.avg_length = e.caption_stats.avg_length;
  const CostReport cost = cost_report(model, cfg.caption_len);
  m.nnz = cost.nnz;
  m.prunable_nnz = cost.prunable_nnz;
  m.flops = cost.flops_per_caption;
  m.flops_dense = cost.flops_dense;
  m.sparsity = sparsity_report(model).global;
  m.encoder_sparsity = part_sparsity(model, Part::encoder);
  m.decoder_sparsity = part_sparsity(model, Part::decoder);
  m.telemetry = ctx.telemetry;
  const json meta = {{"config_hash", config_hash(cfg)}, {"seed", seed}, {"method", cfg.method},
                     {"scheme", to_string(cfg.scheme)}};
  const fs::path ckpt = dir / "model.smpc";
  save_model(ckpt, model, StoragePolicy::sparse, meta);
  m.checkpoint = ckpt.filename().string();
  m.checkpoint_bytes = fs::file_size(ckpt);
  write_text(dir / "metrics.json", to_json(m).dump(2) + "\n");
  return m;
}

namespace {

RunReport finish_report(const ExperimentConfig& cfg, std::vector<SeedMetrics> seeds) {
  RunReport r;
  r.name = cfg.name;
  r.config_hash = config_hash(cfg);
  r.config = cfg;
  r.seeds = std::move(seeds);
  r.summary = summarize(r.seeds);
  const fs::path dir = cfg.out / cfg.name;
  fs::create_directories(dir);
  write_text(dir / "report.json", to_json(r).dump(2) + "\n");
  return r;
}

fs::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.out / cfg.name / ("seed-" + std::to_string(seed));
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  std::vector<SeedMetrics> seeds;
  for (std::uint64_t s : cfg.seeds) seeds.push_back(run_seed(cfg, s, seed_dir(cfg, s)));
  return finish_report(cfg, std::move(seeds));
}

RunReport run_scheme_A(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.scheme = Scheme::A;
  return run_experiment(c);
}

RunReport run_scheme_B(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.scheme = Scheme::B;
  return run_experiment(c);
}

RunReport run_scheme_C(const ExperimentConfig& config) {
  ExperimentConfig c = config;
  c.scheme = Scheme::C;
  return run_experiment(c);
}

// ---------------------------------------------------------------------------
// Sweeps

namespace {

SeedMetrics run_guarded(const ExperimentConfig& cfg, std::uint64_t seed) {
  try {
    return run_seed(cfg, seed, seed_dir(cfg, seed));
  } catch (const std::exception& e) {
    SeedMetrics m;
    m.seed = seed;
    m.error = e.what();
    fs::create_directories(seed_dir(cfg, seed));
    write_text(seed_dir(cfg, seed) / "metrics.json", to_json(m).dump(2) + "\n");
    return m;
  }
}

void write_sweep_csvs(const std::vector<RunReport>& runs, const fs::path& csv, const fs::path& summary_csv) {
  std::ofstream rows(csv, std::ios::trunc);
  rows << std::setprecision(9);
  rows << "name,config_hash,method,scheme,s_target,seed,status,sparsity,nnz,prunable_nnz,token_accuracy,exact_match,"
          "xe_loss,flops_per_caption\n";
  std::ofstream sum(summary_csv, std::ios::trunc);
  sum << std::setprecision(9);
  sum << "name,config_hash,method,scheme,s_target,seeds_ok,seeds_failed,sparsity_mean,sparsity_std,nnz_mean,nnz_std,"
         "token_accuracy_mean,token_accuracy_std,exact_match_mean,exact_match_std\n";
  for (const auto& r : runs) {
    const auto& c = r.config;
    const std::string head = c.name + "," + r.config_hash + "," + c.method + "," + to_string(c.scheme) + ",";
    std::size_t ok = 0;
    for (const auto& s : r.seeds) {
      rows << head << c.s_target << "," << s.seed << "," << (s.error ? "failed" : "ok") << ",";
      if (s.error) {
        rows << ",,,,,,\n";
        continue;
      }
      ++ok;
      rows << s.sparsity << "," << s.nnz << "," << s.prunable_nnz << "," << s.token_accuracy << "," << s.exact_match
           << "," << s.xe_loss << "," << s.flops << "\n";
    }
    sum << head << c.s_target << "," << ok << "," << r.seeds.size() - ok;
    for (const char* k : {"sparsity", "nnz", "token_accuracy", "exact_match"}) {
      auto it = r.summary.find(k);
      if (it == r.summary.end())
        sum << ",,";
      else
        sum << "," << it->second.first << "," << it->second.second;
    }
    sum << "\n";
  }
  if (!rows || !sum) throw std::runtime_error("cannot write sweep aggregates under " + csv.parent_path().string());
}

}  // namespace

SweepResult run_sweep(const std::vector<ExperimentConfig>& configs, const fs::path& out, int jobs) {
  fs::create_directories(out);
  std::vector<std::pair<std::size_t, std::uint64_t>> work;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    configs[i].validate();
    for (std::uint64_t s : configs[i].seeds) work.emplace_back(i, s);
  }
  std::vector<std::vector<SeedMetrics>> results(configs.size());

  if (jobs <= 1) {
    for (const auto& [i, s] : work) results[i].push_back(run_guarded(configs[i], s));
  } else {
    std::cout.flush();
    std::cerr.flush();
    std::size_t next = 0, running = 0;
    std::map<pid_t, std::size_t> children;
    while (next < work.size() || running > 0) {
      while (running < static_cast<std::size_t>(jobs) && next < work.size()) {
        const pid_t pid = fork();
        if (pid < 0) throw std::runtime_error("fork failed");
        if (pid == 0) {
          const auto& [i, s] = work[next];
          const SeedMetrics m = run_guarded(configs[i], s);
          std::_Exit(m.error ? 1 : 0);
        }
        children[pid] = next++;
        ++running;
      }
      int status = 0;
      const pid_t done = wait(&status);
      if (done < 0) break;
      children.erase(done);
      --running;
    }
    // Single writer: the parent folds the per-run files in work order.
    for (const auto& [i, s] : work) {
      const fs::path f = seed_dir(configs[i], s) / "metrics.json";
      std::ifstream in(f);
      SeedMetrics m;
      m.seed = s;
      if (!in) {
        m.error = "child process produced no metrics";
      } else {
        try {
          m = seed_metrics_from_json(json::parse(in));
        } catch (const std::exception& e) {
          m.error = std::string("unreadable metrics: ") + e.what();
        }
      }
      results[i].push_back(std::move(m));
    }
  }

  SweepResult r;
  for (std::size_t i = 0; i < configs.size(); ++i) r.runs.push_back(finish_report(configs[i], std::move(results[i])));
  r.csv = out / "sweep.csv";
  r.summary_csv = out / "sweep_summary.csv";
  write_sweep_csvs(r.runs, r.csv, r.summary_csv);
  return r;
}

// ---------------------------------------------------------------------------
// Figure data

std::vector<fs::path> emit_figures_data(const fs::path& dir) {
  std::ifstream min(dir / "metrics.json");
  if (!min) throw std::runtime_error("no metrics.json in " + dir.string());
  const SeedMetrics m = seed_metrics_from_json(json::parse(min));
  if (m.error) throw std::runtime_error("run in " + dir.string() + " failed: " + *m.error);
  if (m.telemetry.empty()) throw std::runtime_error("run in " + dir.string() + " has no telemetry");

  std::vector<fs::path> written;
  {
    const fs::path f = dir / "progression.csv";
    std::ofstream out(f, std::ios::trunc);
    out << std::setprecision(9) << "phase,step,global_step,xe_loss,weighted_sparsity_loss,gate_mean,sparsity\n";
    std::size_t global = 0;
    for (std::size_t ph = 0; ph < m.telemetry.size(); ++ph) {
      std::ifstream in(dir / m.telemetry[ph]);
      if (!in) throw std::runtime_error("missing telemetry file " + (dir / m.telemetry[ph]).string());
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const json r = json::parse(line);
        auto num = [&r](const char* k) -> std::string {
          if (r.at(k).is_null()) return "";
          std::ostringstream os;
          os << std::setprecision(9) << r.at(k).get<double>();
          return os.str();
        };
        out << ph << "," << r.at("step").get<std::size_t>() << "," << global++ << "," << num("xe_loss") << ","
            << num("weighted_sparsity_loss") << "," << num("gate_mean") << "," << num("sparsity") << "\n";
      }
    }
    written.push_back(f);
  }

  const CaptionModel model = load_model(dir / m.checkpoint);
  std::vector<float> nonzero;
  {
    const fs::path f = dir / "layer_sparsity.csv";
    std::ofstream out(f, std::ios::trunc);
    out << std::setprecision(9) << "name,part,total,nnz,sparsity\n";
    for (const auto& p : model.params()) {
      if (!p.prunable()) continue;
      std::size_t nnz = 0;
      for (float v : p.value.values())
        if (v != 0.0f) {
          ++nnz;
          nonzero.push_back(v);
        }
      out << p.name << "," << to_string(p.part) << "," << p.value.numel() << "," << nnz << ","
          << 1.0 - static_cast<double>(nnz) / static_cast<double>(p.value.numel()) << "\n";
    }
    written.push_back(f);
  }
  {
    constexpr int kBins = 101;
    float max_abs = 0.0f;
    for (float v : nonzero) max_abs = std::max(max_abs, std::abs(v));
    std::vector<std::size_t> counts(kBins, 0);
    if (max_abs > 0.0f) {
      const double width = 2.0 * static_cast<double>(max_abs) / kBins;
      for (float v : nonzero) {
        auto b = static_cast<long>(std::floor((static_cast<double>(v) + max_abs) / width));
        counts[static_cast<std::size_t>(std::clamp(b, 0L, static_cast<long>(kBins - 1)))]++;
      }
    }
    const fs::path f = dir / "weight_histogram.csv";
    std::ofstream out(f, std::ios::trunc);
    out << std::setprecision(9) << "bin,lo,hi,count\n";
    for (int b = 0; b < kBins; ++b) {
      const double lo = -static_cast<double>(max_abs) + 2.0 * max_abs * b / kBins;
      const double hi = -static_cast<double>(max_abs) + 2.0 * max_abs * (b + 1) / kBins;
      out << b << "," << lo << "," << hi << "," << counts[static_cast<std::size_t>(b)] << "\n";
    }
    written.push_back(f);
  }
  return written;
}

}  // namespace smp
