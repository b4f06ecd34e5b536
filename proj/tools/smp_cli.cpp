// SPDX-License-Identifier: Apache-2.0
// smp: command-line front end for training, pruning, evaluation, sweeps and
// checkpoint inspection.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "smp/baselines.hpp"
#include "smp/checkpoint.hpp"
#include "smp/dataset.hpp"
#include "smp/errors.hpp"
#include "smp/harness.hpp"
#include "smp/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON experiment config");
  cmd->add_option("--set", c.sets, "override, key=value (dotted keys, repeatable)");
  cmd->add_option("--seed", c.seed, "run only this seed");
  cmd->add_option("--out", c.out, "output directory");
}

smp::ExperimentConfig resolve(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> sets = c.sets;
  if (c.seed) sets.push_back("seeds=[" + std::to_string(*c.seed) + "]");
  if (!c.out.empty()) sets.push_back("out=" + json(c.out).dump());
  sets.insert(sets.end(), extra.begin(), extra.end());
  return smp::load_config(c.config, sets);
}

void print_report(const smp::RunReport& r) {
  std::cout << r.name << " [" << r.config_hash << "] method=" << r.config.method
            << " scheme=" << smp::to_string(r.config.scheme) << " decoding=greedy\n";
  for (const auto& s : r.seeds) {
    if (s.error) {
      std::cout << "  seed " << s.seed << ": FAILED " << *s.error << "\n";
      continue;
    }
    std::printf("  seed %llu: token_acc %.4f  exact %.4f  sparsity %.4f  nnz %zu\n",
                static_cast<unsigned long long>(s.seed), s.token_accuracy, s.exact_match, s.sparsity, s.nnz);
  }
  if (auto it = r.summary.find("token_accuracy"); it != r.summary.end())
    std::printf("  mean token_acc %.4f +- %.4f\n", it->second.first, it->second.second);
}

int run(const smp::ExperimentConfig& cfg) {
  const smp::RunReport r = smp::run_experiment(cfg);
  print_report(r);
  std::cout << "report: " << (cfg.out / cfg.name / "report.json").string() << "\n";
  for (const auto& s : r.seeds)
    if (s.error) return 1;
  return 0;
}

// One-shot hard pruning of a stored model; the input file is left untouched.
int prune_checkpoint(const smp::ExperimentConfig& cfg, const fs::path& in, const std::string& parts_name) {
  smp::CaptionModel model = smp::load_model(in);
  std::vector<smp::Part> parts;
  if (parts_name == "decoder" || parts_name == "both") parts.push_back(smp::Part::decoder);
  if (parts_name == "encoder" || parts_name == "both") parts.push_back(smp::Part::encoder);
  if (parts.empty()) throw smp::ConfigError("--parts must be encoder, decoder or both");
  smp::PrunerSpec spec;
  spec.kind = smp::parse_pruner_kind(cfg.method);
  if (spec.kind != smp::PrunerKind::hard_blind && spec.kind != smp::PrunerKind::hard_uniform &&
      spec.kind != smp::PrunerKind::hard_distribution)
    throw smp::ConfigError("pruning a checkpoint needs a hard_* method, got " + cfg.method);
  spec.s_target = cfg.s_target;
  spec.lambda_c = cfg.distribution_factor;
  spec.validate();
  smp::apply_masks(model, parts, smp::hard_masks(model, spec, parts));
  fs::create_directories(cfg.out);
  const fs::path dst = cfg.out / (in.stem().string() + "-" + cfg.method + ".smpc");
  smp::save_model(dst, model);
  std::printf("%s: sparsity %.4f -> %s\n", in.string().c_str(), smp::sparsity_report(model).global,
              dst.string().c_str());
  return 0;
}

int eval_checkpoint(const smp::ExperimentConfig& cfg, const fs::path& path) {
  const smp::CaptionModel model = smp::load_model(path);
  const smp::Dataset data = smp::load_or_generate(cfg.out / "cache", cfg.dataset_seed, cfg.n_samples);
  const smp::EvalResult e = smp::evaluate(model, data.split(cfg.eval_split));
  const smp::CostReport c = smp::cost_report(model, cfg.caption_len);
  const smp::CompressionReport z = smp::compression_report(model);
  const json out = {{"checkpoint", path.string()},
                    {"split", cfg.eval_split},
                    {"token_accuracy", e.token_accuracy},
                    {"exact_match", e.exact_match},
                    {"xe_loss", e.xe_loss},
                    {"unique_fraction", e.caption_stats.unique_fraction},
                    {"avg_length", e.caption_stats.avg_length},
                    {"nnz", c.nnz},
                    {"p_total", c.p_total},
                    {"flops_per_caption", c.flops_per_caption},
                    {"flops_dense", c.flops_dense},
                    {"caption_len", c.caption_len},
                    {"decoding", c.decoding},
                    {"sparsity", z.sparsity},
                    {"compression_ratio", z.ratio}};
  std::cout << out.dump(2) << "\n";
  return 0;
}

// Expands {"base": {...}, "grid": {key: [values]}, "runs": [{overrides}]}
// into one config per grid point and listed run.
std::vector<smp::ExperimentConfig> expand_sweep(const Common& c) {
  json sweep = json::object();
  if (!c.config.empty()) {
    std::ifstream in(c.config);
    if (!in) throw smp::ConfigError("cannot open sweep file " + c.config);
    sweep = json::parse(in, nullptr, true, true);
  }
  for (const auto& [k, v] : sweep.items())
    if (k != "base" && k != "grid" && k != "runs") throw smp::ConfigError("unknown sweep key '" + k + "'");
  json base = sweep.value("base", json::object());
  for (const auto& s : c.sets) smp::apply_override(base, s);
  if (c.seed) base["seeds"] = {*c.seed};
  if (!c.out.empty()) base["out"] = c.out;

  std::vector<json> points{json::object()};
  const json grid = sweep.value("grid", json::object());
  for (const auto& [key, values] : grid.items()) {
    if (!values.is_array() || values.empty()) throw smp::ConfigError("grid key '" + key + "' needs a nonempty list");
    std::vector<json> next;
    for (const auto& p : points)
      for (const auto& v : values) {
        json q = p;
        q[key] = v;
        next.push_back(q);
      }
    points = std::move(next);
  }
  std::vector<json> runs;
  const json listed = sweep.value("runs", json::array());
  if (listed.empty()) {
    runs = points;
  } else {
    for (const auto& p : points)
      for (const auto& r : listed) {
        json q = p;
        q.update(r);
        runs.push_back(q);
      }
  }
  if (!sweep.contains("grid") && !sweep.contains("runs")) runs.clear();

  std::vector<smp::ExperimentConfig> configs;
  for (const auto& point : runs) {
    json tree = base;
    std::string label;
    for (const auto& [key, v] : point.items()) {
      smp::apply_override(tree, key + "=" + v.dump());
      if (key == "name") continue;
      label += (label.empty() ? "" : "_") + key + "-" + (v.is_string() ? v.get<std::string>() : v.dump());
    }
    if (!point.contains("name")) tree["name"] = tree.value("name", std::string("run")) + "_" + label;
    configs.push_back(smp::config_from_json(tree));
  }
  return configs;
}

int inspect(const fs::path& path, bool values) {
  const smp::Checkpoint ck = smp::read_checkpoint(path);
  std::cout << path.string() << ": " << ck.records.size() << " records, " << fs::file_size(path) << " bytes\n";
  for (const auto& r : ck.records) {
    std::size_t nnz = 0;
    for (float v : r.value.values()) nnz += v != 0.0f;
    std::printf("  %-36s %-12s %-5s nnz %zu/%zu\n", r.name.c_str(), smp::to_string(r.value.shape()).c_str(),
                r.storage == smp::Storage::coo ? "coo" : "dense", nnz, r.value.numel());
    if (values) {
      std::cout << "   ";
      const auto v = r.value.values();
      for (std::size_t i = 0; i < std::min<std::size_t>(v.size(), 8); ++i) std::cout << " " << v[i];
      std::cout << (v.size() > 8 ? " ...\n" : "\n");
    }
  }
  std::cout << "metadata " << ck.metadata.dump(2) << "\n";
  return 0;
}

int report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw smp::ConfigError("not a directory: " + dir.string());
  std::vector<fs::path> reports, seed_dirs;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.path().filename() == "report.json") reports.push_back(e.path());
    if (e.path().filename() == "metrics.json") seed_dirs.push_back(e.path().parent_path());
  }
  std::sort(reports.begin(), reports.end());
  std::sort(seed_dirs.begin(), seed_dirs.end());

  const fs::path csv = dir / "report.csv";
  std::ofstream out(csv, std::ios::trunc);
  out << "name,config_hash,method,scheme,s_target,seeds,token_accuracy_mean,token_accuracy_std,sparsity_mean,"
         "nnz_mean,flops_per_caption_mean\n";
  for (const auto& p : reports) {
    std::ifstream in(p);
    const json r = json::parse(in);
    const json& s = r.at("summary");
    auto mean = [&s](const char* k) { return s.contains(k) ? s[k]["mean"].dump() : std::string(); };
    auto stdev = [&s](const char* k) { return s.contains(k) ? s[k]["std"].dump() : std::string(); };
    out << r["name"].get<std::string>() << "," << r["config_hash"].get<std::string>() << ","
        << r["config"]["method"].get<std::string>() << "," << r["config"]["scheme"].get<std::string>() << ","
        << r["config"]["s_target"].dump() << "," << r["seeds"].size() << "," << mean("token_accuracy") << ","
        << stdev("token_accuracy") << "," << mean("sparsity") << "," << mean("nnz") << ","
        << mean("flops_per_caption") << "\n";
  }
  std::cout << "wrote " << csv.string() << " (" << reports.size() << " runs)\n";
  int failures = 0;
  for (const auto& d : seed_dirs) {
    try {
      for (const auto& f : smp::emit_figures_data(d)) std::cout << "wrote " << f.string() << "\n";
    } catch (const std::exception& e) {
      std::cerr << "skipped " << d.string() << ": " << e.what() << "\n";
      ++failures;
    }
  }
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Supermask pruning experiments on a synthetic captioning task"};
  app.require_subcommand(1);

  Common train_opts, prune_opts, eval_opts, sweep_opts, report_opts;
  auto* train = app.add_subcommand("train", "train a dense model (method forced to dense)");
  add_common(train, train_opts);

  auto* prune = app.add_subcommand("prune", "run the configured pruning method, or prune a stored checkpoint");
  add_common(prune, prune_opts);
  std::string prune_input, prune_parts = "decoder";
  prune->add_option("--checkpoint", prune_input, "one-shot hard pruning of this checkpoint instead of a run");
  prune->add_option("--parts", prune_parts, "encoder, decoder or both (with --checkpoint)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the configured dataset split");
  add_common(eval, eval_opts);
  std::string eval_input;
  eval->add_option("checkpoint", eval_input, "SMPC file")->required();

  auto* sweep = app.add_subcommand("sweep", "run a grid of configs and write CSV aggregates");
  add_common(sweep, sweep_opts);
  int jobs = 1;
  sweep->add_option("--jobs,-j", jobs, "parallel processes, one seed each")->check(CLI::PositiveNumber);

  auto* rep = app.add_subcommand("report", "aggregate report.json files and emit figure data");
  std::string report_dir;
  rep->add_option("dir", report_dir, "runs directory")->required();

  auto* insp = app.add_subcommand("inspect", "print the records and metadata of a checkpoint");
  std::string inspect_path;
  bool inspect_values = false;
  insp->add_option("checkpoint", inspect_path, "SMPC file")->required();
  insp->add_flag("--values", inspect_values, "print leading values of each record");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return run(resolve(train_opts, {"method=\"dense\""}));
    if (*prune) {
      const auto cfg = resolve(prune_opts);
      if (!prune_input.empty()) return prune_checkpoint(cfg, prune_input, prune_parts);
      if (cfg.method == "dense") throw smp::ConfigError("prune needs a pruning method (--set method=...)");
      return run(cfg);
    }
    if (*eval) return eval_checkpoint(resolve(eval_opts), eval_input);
    if (*sweep) {
      const auto configs = expand_sweep(sweep_opts);
      const fs::path out = sweep_opts.out.empty() ? (configs.empty() ? fs::path("runs") : configs.front().out)
                                                  : fs::path(sweep_opts.out);
      const smp::SweepResult r = smp::run_sweep(configs, out, jobs);
      int failed = 0;
      for (const auto& run : r.runs) {
        print_report(run);
        for (const auto& s : run.seeds) failed += s.error.has_value();
      }
      std::cout << "aggregate: " << r.csv.string() << ", " << r.summary_csv.string() << "\n";
      if (failed) std::cerr << failed << " run(s) failed; see per-run metrics.json\n";
      return failed ? 1 : 0;
    }
    if (*rep) return report(report_dir);
    if (*insp) return inspect(inspect_path, inspect_values);
  } catch (const smp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const smp::FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
