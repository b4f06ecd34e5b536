// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic scene captioning task. A scene is a handful of region slots,
// each empty or holding one coloured shape. Its caption counts the objects of
// every (colour, shape) group, groups ordered by (colour, shape) index:
//
//   "two red circles and one blue star <eos>"

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "smp/tensor.hpp"

namespace smp {

namespace vocab {
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int eos = 2;
inline constexpr int and_ = 3;
inline constexpr int count_base = 4;     // "one", "two", "three"
inline constexpr int color_base = 7;     // 5 colours
inline constexpr int shape_base = 12;    // 5 singular shapes
inline constexpr int plural_base = 17;   // 5 plural shapes
inline constexpr int size = 22;
inline constexpr int num_colors = 5;
inline constexpr int num_shapes = 5;
inline constexpr int max_count = 3;

const std::string& word(int token);
std::string render(std::span<const int> tokens);
}  // namespace vocab

struct SceneConfig {
  std::size_t regions = 6;
  std::size_t max_groups = 2;
  float noise = 0.05f;
  /// Tokens per caption including the end token.
  std::size_t max_caption = 8;
};

/// Feature width per region: colour one-hot, shape one-hot, presence, jitter.
inline constexpr std::size_t kRegionFeatures = vocab::num_colors + vocab::num_shapes + 2;

struct SceneSpec {
  /// Per region: object id (colour * num_shapes + shape) or -1 when empty.
  std::vector<int> slots;
};

struct SceneSample {
  SceneSpec spec;
  std::vector<float> features;  // regions x kRegionFeatures
  std::vector<int> caption;     // words then eos, no bos
};

/// Caption grammar applied to a scene.
std::vector<int> describe(const SceneSpec& spec);

struct Dataset {
  std::uint64_t seed = 0;
  SceneConfig config;
  std::vector<SceneSample> train;
  std::vector<SceneSample> val;
  std::vector<SceneSample> test;

  std::span<const SceneSample> split(const std::string& name) const;
};

/// Deterministic in (seed, n_samples); 80/10/10 split in generation order.
Dataset generate_dataset(std::uint64_t seed, std::size_t n_samples, const SceneConfig& config = {});

/// Versioned binary cache ("SMPD"). Returns the cached dataset for
/// (seed, n_samples) under `dir`, generating and writing it when absent or
/// unreadable.
Dataset load_or_generate(const std::filesystem::path& dir, std::uint64_t seed, std::size_t n_samples,
                         const SceneConfig& config = {});
void write_dataset(const std::filesystem::path& path, const Dataset& ds, std::size_t n_samples);
Dataset read_dataset(const std::filesystem::path& path);

/// Teacher-forcing batch. Token arrays are time-major: index t * size + b.
struct Batch {
  std::size_t size = 0;
  std::size_t regions = 0;
  std::size_t steps = 0;
  Tensor features;            // [size*regions x kRegionFeatures]
  std::vector<int> inputs;    // bos, y1 .. y_{T-1}
  std::vector<int> targets;   // y1 .. yT, pad after eos
  std::vector<std::vector<int>> references;  // caption per sample
};

Batch make_batch(std::span<const SceneSample> samples, std::span<const std::size_t> indices, std::size_t steps);
Batch make_batch(std::span<const SceneSample> samples, std::size_t steps);

}  // namespace smp
