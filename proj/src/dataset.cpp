// SPDX-License-Identifier: Apache-2.0
#include "smp/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "smp/errors.hpp"
#include "smp/rng.hpp"

namespace smp {
namespace vocab {

const std::string& word(int token) {
  static const std::array<std::string, size> words = {
      "<pad>", "<bos>",  "<eos>",    "and",    "one",     "two",     "three",     "red",
      "green", "blue",   "yellow",   "purple", "circle",  "square",  "triangle",  "star",
      "heart", "circles", "squares", "triangles", "stars", "hearts"};
  static const std::string unknown = "<unk>";
  return token >= 0 && token < size ? words[static_cast<std::size_t>(token)] : unknown;
}

std::string render(std::span<const int> tokens) {
  std::string out;
  for (int t : tokens) {
    if (t == eos || t == pad) break;
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

}  // namespace vocab

std::vector<int> describe(const SceneSpec& spec) {
  std::array<int, vocab::num_colors * vocab::num_shapes> counts{};
  for (int obj : spec.slots)
    if (obj >= 0) ++counts.at(static_cast<std::size_t>(obj));
  std::vector<int> caption;
  for (int obj = 0; obj < static_cast<int>(counts.size()); ++obj) {
    const int n = counts[static_cast<std::size_t>(obj)];
    if (n == 0) continue;
    if (n > vocab::max_count) throw ContractError("scene group larger than the counting vocabulary");
    if (!caption.empty()) caption.push_back(vocab::and_);
    caption.push_back(vocab::count_base + n - 1);
    caption.push_back(vocab::color_base + obj / vocab::num_shapes);
    caption.push_back((n == 1 ? vocab::shape_base : vocab::plural_base) + obj % vocab::num_shapes);
  }
  caption.push_back(vocab::eos);
  return caption;
}

namespace {

SceneSample make_scene(Rng& rng, const SceneConfig& cfg) {
  const std::size_t objects = static_cast<std::size_t>(vocab::num_colors * vocab::num_shapes);
  const std::size_t groups = 1 + static_cast<std::size_t>(rng.below(cfg.max_groups));
  std::vector<int> ids;
  while (ids.size() < groups) {
    const int id = static_cast<int>(rng.below(objects));
    if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
  }
  std::vector<int> pool;
  std::size_t budget = cfg.regions;
  for (std::size_t g = 0; g < ids.size(); ++g) {
    const std::size_t remaining_groups = ids.size() - g - 1;
    const std::size_t cap = std::min<std::size_t>(vocab::max_count, budget - remaining_groups);
    const std::size_t n = 1 + static_cast<std::size_t>(rng.below(cap));
    pool.insert(pool.end(), n, ids[g]);
    budget -= n;
  }
  pool.resize(cfg.regions, -1);
  for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);

  SceneSample s;
  s.spec.slots = pool;
  s.features.assign(cfg.regions * kRegionFeatures, 0.0f);
  for (std::size_t r = 0; r < cfg.regions; ++r) {
    float* f = s.features.data() + r * kRegionFeatures;
    if (pool[r] >= 0) {
      f[pool[r] / vocab::num_shapes] = 1.0f;
      f[vocab::num_colors + pool[r] % vocab::num_shapes] = 1.0f;
      f[vocab::num_colors + vocab::num_shapes] = 1.0f;
    }
    f[kRegionFeatures - 1] = static_cast<float>(rng.uniform());
    for (std::size_t j = 0; j + 1 < kRegionFeatures; ++j) f[j] += cfg.noise * static_cast<float>(rng.normal());
  }
  s.caption = describe(s.spec);
  if (s.caption.size() > cfg.max_caption) throw ConfigError("caption exceeds configured maximum length");
  return s;
}

}  // namespace

std::span<const SceneSample> Dataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "'");
}

Dataset generate_dataset(std::uint64_t seed, std::size_t n_samples, const SceneConfig& config) {
  if (n_samples == 0) throw ConfigError("dataset needs at least one sample");
  if (config.regions < config.max_groups || config.max_groups == 0) throw ConfigError("scene config: bad group count");
  Dataset ds;
  ds.seed = seed;
  ds.config = config;
  Rng rng(seed);
  const std::size_t n_train = n_samples * 8 / 10;
  const std::size_t n_val = n_samples / 10;
  for (std::size_t i = 0; i < n_samples; ++i) {
    SceneSample s = make_scene(rng, config);
    if (i < n_train)
      ds.train.push_back(std::move(s));
    else if (i < n_train + n_val)
      ds.val.push_back(std::move(s));
    else
      ds.test.push_back(std::move(s));
  }
  return ds;
}

// Cache container, little-endian:
//   "SMPD" u16 version u64 seed u64 n_samples u32 regions u32 max_groups f32 noise u32 max_caption
//   per sample: i32 slots[regions], f32 features[regions*F], u32 len, i32 caption[len]
namespace {

constexpr std::uint16_t kDatasetVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw FormatError("dataset cache truncated");
  return v;
}

}  // namespace

void write_dataset(const std::filesystem::path& path, const Dataset& ds, std::size_t n_samples) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write dataset cache " + path.string());
  os.write("SMPD", 4);
  put<std::uint16_t>(os, kDatasetVersion);
  put<std::uint64_t>(os, ds.seed);
  put<std::uint64_t>(os, n_samples);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.config.regions));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.config.max_groups));
  put<float>(os, ds.config.noise);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ds.config.max_caption));
  for (const auto* part : {&ds.train, &ds.val, &ds.test})
    for (const auto& s : *part) {
      for (int v : s.spec.slots) put<std::int32_t>(os, v);
      os.write(reinterpret_cast<const char*>(s.features.data()),
               static_cast<std::streamsize>(s.features.size() * sizeof(float)));
      put<std::uint32_t>(os, static_cast<std::uint32_t>(s.caption.size()));
      for (int t : s.caption) put<std::int32_t>(os, t);
    }
  if (!os) throw std::runtime_error("failed writing dataset cache " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open dataset cache " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SMPD", 4) != 0) throw FormatError("bad dataset cache magic");
  if (get<std::uint16_t>(is) != kDatasetVersion) throw FormatError("unsupported dataset cache version");
  Dataset ds;
  ds.seed = get<std::uint64_t>(is);
  const auto n = get<std::uint64_t>(is);
  ds.config.regions = get<std::uint32_t>(is);
  ds.config.max_groups = get<std::uint32_t>(is);
  ds.config.noise = get<float>(is);
  ds.config.max_caption = get<std::uint32_t>(is);
  if (ds.config.regions == 0 || ds.config.regions > 1024 || ds.config.max_caption > 1024)
    throw FormatError("dataset cache header out of range");
  const std::size_t n_train = n * 8 / 10, n_val = n / 10;
  for (std::uint64_t i = 0; i < n; ++i) {
    SceneSample s;
    s.spec.slots.resize(ds.config.regions);
    for (auto& v : s.spec.slots) v = get<std::int32_t>(is);
    s.features.resize(ds.config.regions * kRegionFeatures);
    if (!is.read(reinterpret_cast<char*>(s.features.data()),
                 static_cast<std::streamsize>(s.features.size() * sizeof(float))))
      throw FormatError("dataset cache truncated");
    const auto len = get<std::uint32_t>(is);
    if (len > ds.config.max_caption) throw FormatError("dataset cache caption too long");
    s.caption.resize(len);
    for (auto& t : s.caption) t = get<std::int32_t>(is);
    if (i < n_train)
      ds.train.push_back(std::move(s));
    else if (i < n_train + n_val)
      ds.val.push_back(std::move(s));
    else
      ds.test.push_back(std::move(s));
  }
  return ds;
}

Dataset load_or_generate(const std::filesystem::path& dir, std::uint64_t seed, std::size_t n_samples,
                         const SceneConfig& config) {
  std::ostringstream name;
  name << "scenes-" << seed << "-" << n_samples << ".smpd";
  const auto path = dir / name.str();
  if (std::filesystem::exists(path)) {
    try {
      Dataset ds = read_dataset(path);
      if (ds.seed == seed && ds.config.regions == config.regions && ds.config.max_groups == config.max_groups &&
          ds.config.noise == config.noise && ds.config.max_caption == config.max_caption)
        return ds;
    } catch (const FormatError&) {
      // fall through and regenerate
    }
  }
  Dataset ds = generate_dataset(seed, n_samples, config);
  std::filesystem::create_directories(dir);
  write_dataset(path, ds, n_samples);
  return ds;
}

Batch make_batch(std::span<const SceneSample> samples, std::span<const std::size_t> indices, std::size_t steps) {
  if (indices.empty()) throw ContractError("empty batch");
  Batch b;
  b.size = indices.size();
  b.regions = samples[indices[0]].spec.slots.size();
  b.steps = steps;
  std::vector<float> feats;
  feats.reserve(b.size * b.regions * kRegionFeatures);
  b.inputs.assign(steps * b.size, vocab::pad);
  b.targets.assign(steps * b.size, vocab::pad);
  for (std::size_t j = 0; j < b.size; ++j) {
    const SceneSample& s = samples[indices[j]];
    if (s.spec.slots.size() != b.regions) throw DimensionError("batch mixes region counts");
    if (s.caption.size() > steps) throw DimensionError("caption longer than batch steps");
    feats.insert(feats.end(), s.features.begin(), s.features.end());
    for (std::size_t t = 0; t < s.caption.size(); ++t) {
      b.targets[t * b.size + j] = s.caption[t];
      b.inputs[t * b.size + j] = t == 0 ? vocab::bos : s.caption[t - 1];
    }
    b.references.push_back(s.caption);
  }
  b.features = Tensor({b.size * b.regions, kRegionFeatures}, std::move(feats));
  return b;
}

Batch make_batch(std::span<const SceneSample> samples, std::size_t steps) {
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return make_batch(samples, idx, steps);
}

}  // namespace smp
