// SPDX-License-Identifier: Apache-2.0
#include "smp/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>

#include "smp/errors.hpp"

namespace smp {

namespace {

static_assert(std::numeric_limits<float>::is_iec559, "SMPC stores IEEE-754 binary32 values");

constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::size_t kMaxRank = 8;
// Decoded COO tensors are dense in memory; cap them at 1 GiB.
constexpr std::size_t kMaxCooElements = std::size_t{1} << 28;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void context(std::string c) { context_ = std::move(c); }
  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("SMPC " + context_ + ": " + what + " (offset " + std::to_string(pos_) + ")");
  }
  std::size_t remaining() const noexcept { return in_.size() - pos_; }
  void need(std::size_t n, const char* what) const {
    if (n > remaining()) fail(std::string("truncated ") + what);
  }
  std::uint64_t le(int n, const char* what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::uint8_t u8(const char* what) { return static_cast<std::uint8_t>(le(1, what)); }
  std::uint16_t u16(const char* what) { return static_cast<std::uint16_t>(le(2, what)); }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(le(4, what)); }
  std::uint64_t u64(const char* what) { return le(8, what); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
  std::string context_ = "header";
};

std::size_t count_nonzero(std::span<const float> v) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
}

// COO keeps every entry whose bit pattern is nonzero, so -0.0 survives the
// round trip. Pruned weights are written as +0.0 and are dropped.
bool stored(float x) { return std::bit_cast<std::uint32_t>(x) != 0; }

std::size_t count_stored(std::span<const float> v) {
  return static_cast<std::size_t>(std::count_if(v.begin(), v.end(), stored));
}

PruneMask nonzero_mask(const Tensor& t) {
  PruneMask m = PruneMask::ones(t.shape());
  auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] == 0.0f) m.set(i, false);
  return m;
}

constexpr struct {
  GateMode mode;
  const char* name;
} kModes[] = {{GateMode::train_bern, "train_bern"},
              {GateMode::train_round, "train_round"},
              {GateMode::frozen_gate, "frozen_gate"},
              {GateMode::finalized, "finalized"}};

GateMode parse_mode(const std::string& s) {
  for (const auto& m : kModes)
    if (s == m.name) return m.mode;
  throw FormatError("SMPC metadata: unknown gate mode '" + s + "'");
}

}  // namespace

std::size_t record_bytes(const std::string& name, std::size_t ndim, std::size_t numel, std::size_t nnz,
                         Storage storage) {
  const std::size_t head = 4 + name.size() + 1 + 1 + 8 * ndim + 1;
  return head + (storage == Storage::coo ? 8 + 12 * nnz : 4 * numel);
}

std::size_t checkpoint_bytes(const Checkpoint& ckpt) {
  std::size_t n = 4 + 2 + 4;
  for (const auto& r : ckpt.records)
    n += record_bytes(r.name, r.value.rank(), r.value.numel(), count_stored(r.value.values()), r.storage);
  return n + 8 + ckpt.metadata.dump().size();
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.records.size() > std::numeric_limits<std::uint32_t>::max()) throw FormatError("SMPC: too many records");
  Writer w;
  w.bytes(kSmpcMagic, 4);
  w.u16(kSmpcVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    if (r.value.rank() > kMaxRank) throw FormatError("SMPC record '" + r.name + "': rank above 8");
    w.u32(static_cast<std::uint32_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.u8(kDtypeF32);
    w.u8(static_cast<std::uint8_t>(r.value.rank()));
    for (std::size_t d : r.value.shape()) w.u64(d);
    w.u8(static_cast<std::uint8_t>(r.storage));
    auto v = r.value.values();
    if (r.storage == Storage::coo) {
      w.u64(count_stored(v));
      for (std::size_t i = 0; i < v.size(); ++i)
        if (stored(v[i])) w.u64(i);
      for (float x : v)
        if (stored(x)) w.f32(x);
    } else {
      for (float x : v) w.f32(x);
    }
  }
  const std::string meta = ckpt.metadata.dump();
  w.u64(meta.size());
  w.bytes(meta.data(), meta.size());
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (std::memcmp(magic.data(), kSmpcMagic, 4) != 0) r.fail("bad magic");
  const std::uint16_t version = r.u16("version");
  if (version != kSmpcVersion) r.fail("unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32("record count");
  // Smallest possible record: empty name, rank 1, empty COO payload.
  if (count > r.remaining() / (4 + 1 + 1 + 8 + 1 + 8)) r.fail("record count exceeds file size");

  Checkpoint ckpt;
  ckpt.records.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    r.context("record " + std::to_string(k));
    const std::uint32_t name_len = r.u32("name length");
    TensorRecord rec;
    rec.name = r.str(name_len, "name");
    r.context("record " + std::to_string(k) + " '" + rec.name + "'");
    if (r.u8("dtype") != kDtypeF32) r.fail("unsupported dtype");
    const std::uint8_t ndim = r.u8("rank");
    if (ndim == 0 || ndim > kMaxRank) r.fail("rank " + std::to_string(ndim) + " out of range");
    Shape shape(ndim);
    std::size_t numel = 1;
    for (auto& d : shape) {
      const std::uint64_t v = r.u64("shape");
      if (v == 0) r.fail("zero extent");
      if (v > std::numeric_limits<std::size_t>::max() / numel) r.fail("shape overflows");
      d = static_cast<std::size_t>(v);
      numel *= d;
    }
    const std::uint8_t storage = r.u8("storage tag");
    std::vector<float> values;
    if (storage == static_cast<std::uint8_t>(Storage::dense)) {
      if (numel > r.remaining() / 4) r.fail("truncated dense payload");
      values.resize(numel);
      for (auto& x : values) x = r.f32("dense values");
      rec.storage = Storage::dense;
    } else if (storage == static_cast<std::uint8_t>(Storage::coo)) {
      const std::uint64_t nnz = r.u64("nnz");
      if (nnz > numel) r.fail("nnz exceeds element count");
      if (nnz > r.remaining() / 12) r.fail("truncated coo payload");
      std::vector<std::uint64_t> idx(nnz);
      for (std::uint64_t i = 0; i < nnz; ++i) {
        idx[i] = r.u64("indices");
        if (idx[i] >= numel) r.fail("index " + std::to_string(idx[i]) + " out of range");
        if (i > 0 && idx[i] <= idx[i - 1]) r.fail("indices not strictly increasing");
      }
      if (numel > kMaxCooElements) r.fail("coo tensor above " + std::to_string(kMaxCooElements) + " elements");
      values.assign(numel, 0.0f);
      for (std::uint64_t i = 0; i < nnz; ++i) values[idx[i]] = r.f32("coo values");
      rec.storage = Storage::coo;
    } else {
      r.fail("unknown storage tag " + std::to_string(storage));
    }
    rec.value = Tensor(std::move(shape), std::move(values));
    ckpt.records.push_back(std::move(rec));
  }
  r.context("metadata");
  const std::uint64_t meta_len = r.u64("metadata length");
  if (meta_len != r.remaining()) r.fail("metadata length does not match the remaining bytes");
  const std::string meta = r.str(static_cast<std::size_t>(meta_len), "metadata");
  try {
    ckpt.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    r.fail(std::string("invalid JSON: ") + e.what());
  }
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

nlohmann::json dims_to_json(const ModelDims& d) {
  return {{"feature_dim", d.feature_dim}, {"regions", d.regions},         {"encoder_dim", d.encoder_dim},
          {"embed_dim", d.embed_dim},     {"hidden_dim", d.hidden_dim},   {"attention_dim", d.attention_dim},
          {"vocab", d.vocab},             {"max_len", d.max_len},         {"heads", d.heads},
          {"ffn_dim", d.ffn_dim},         {"dropout", d.dropout}};
}

ModelDims dims_from_json(const nlohmann::json& j) {
  ModelDims d;
  if (!j.is_object()) throw ConfigError("dims must be an object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "feature_dim") d.feature_dim = value.get<std::size_t>();
      else if (key == "regions") d.regions = value.get<std::size_t>();
      else if (key == "encoder_dim") d.encoder_dim = value.get<std::size_t>();
      else if (key == "embed_dim") d.embed_dim = value.get<std::size_t>();
      else if (key == "hidden_dim") d.hidden_dim = value.get<std::size_t>();
      else if (key == "attention_dim") d.attention_dim = value.get<std::size_t>();
      else if (key == "vocab") d.vocab = value.get<std::size_t>();
      else if (key == "max_len") d.max_len = value.get<std::size_t>();
      else if (key == "heads") d.heads = value.get<std::size_t>();
      else if (key == "ffn_dim") d.ffn_dim = value.get<std::size_t>();
      else if (key == "dropout") d.dropout = value.get<float>();
      else throw ConfigError("unknown dims key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dims." + key + ": " + e.what());
    }
  }
  return d;
}

Checkpoint checkpoint_from_model(const CaptionModel& model, StoragePolicy policy, const nlohmann::json& extra) {
  Checkpoint c;
  nlohmann::json params = nlohmann::json::array();
  std::size_t nnz = 0, total = 0;
  for (const auto& p : model.params()) {
    const bool coo = policy == StoragePolicy::sparse && p.prunable();
    c.records.push_back({p.name, p.value, coo ? Storage::coo : Storage::dense});
    nlohmann::json pj = {{"name", p.name}, {"part", to_string(p.part)}, {"prunable", p.prunable()},
                         {"masked", p.mask.has_value()}};
    if (p.gated) {
      pj["gate_mode"] = to_string(p.gated->mode());
      if (p.gated->mode() != GateMode::finalized)
        c.records.push_back({p.name + ".gate", p.gated->gate(), Storage::dense});
    }
    params.push_back(std::move(pj));
    if (p.prunable()) {
      nnz += count_nonzero(p.value.values());
      total += p.value.numel();
    }
  }
  c.metadata = extra.is_object() ? extra : nlohmann::json::object();
  c.metadata["format"] = "smpc";
  c.metadata["arch"] = to_string(model.arch());
  c.metadata["dims"] = dims_to_json(model.dims());
  c.metadata["params"] = std::move(params);
  c.metadata["prunable_nnz"] = nnz;
  c.metadata["prunable_total"] = total;
  c.metadata["sparsity"] = total ? 1.0 - static_cast<double>(nnz) / static_cast<double>(total) : 0.0;
  // dtype tag 0 is f32; other tags (f16 export) are reserved.
  c.metadata["dtype_tags"] = {{"0", "f32"}};
  return c;
}

void save_model(const std::filesystem::path& path, const CaptionModel& model, StoragePolicy policy,
                const nlohmann::json& extra) {
  write_checkpoint(path, checkpoint_from_model(model, policy, extra));
}

CaptionModel model_from_checkpoint(const Checkpoint& ckpt) {
  const auto& meta = ckpt.metadata;
  if (!meta.contains("arch") || !meta.contains("dims") || !meta.contains("params"))
    throw FormatError("SMPC metadata: missing arch, dims or params");
  CaptionModel model = build_model(parse_arch(meta["arch"].get<std::string>()), dims_from_json(meta["dims"]), 0);
  std::map<std::string, const TensorRecord*> by_name;
  for (const auto& r : ckpt.records)
    if (!by_name.emplace(r.name, &r).second) throw FormatError("SMPC: duplicate record '" + r.name + "'");

  auto& reg = model.params();
  if (meta["params"].size() != reg.size()) throw FormatError("SMPC metadata: parameter list does not match arch");
  std::size_t used = 0;
  for (const auto& pj : meta["params"]) {
    const std::string name = pj.at("name").get<std::string>();
    Parameter& p = reg.find(name);
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("SMPC: no record for parameter '" + name + "'");
    const Tensor& stored = it->second->value;
    if (stored.shape() != p.value.shape())
      throw FormatError("SMPC record '" + name + "': shape " + to_string(stored.shape()) + " does not match model " +
                        to_string(p.value.shape()));
    auto src = stored.values();
    std::copy(src.begin(), src.end(), p.value.values().begin());
    ++used;
    if (pj.contains("gate_mode")) {
      const GateMode mode = parse_mode(pj["gate_mode"].get<std::string>());
      if (mode == GateMode::finalized) {
        PruneMask mask = nonzero_mask(p.value);
        Tensor gate = Tensor::full(p.value.shape(), -1.0f);
        auto gv = gate.values();
        for (std::size_t i = 0; i < gv.size(); ++i)
          if (mask.kept(i)) gv[i] = 1.0f;
        p.gated.emplace(p.value, gate, GateMode::frozen_gate);
        p.gated->finalize();
        p.mask = std::move(mask);
      } else {
        auto g = by_name.find(name + ".gate");
        if (g == by_name.end()) throw FormatError("SMPC: no gate record for '" + name + "'");
        if (g->second->value.shape() != p.value.shape()) throw FormatError("SMPC record '" + name + ".gate': shape mismatch");
        p.gated.emplace(p.value, g->second->value.clone(), mode);
        ++used;
      }
    } else if (pj.value("masked", false)) {
      p.mask = nonzero_mask(p.value);
    }
  }
  if (used != ckpt.records.size()) throw FormatError("SMPC: records not described by the metadata");
  return model;
}

CaptionModel load_model(const std::filesystem::path& path) { return model_from_checkpoint(read_checkpoint(path)); }

CompressionReport compression_report(const CaptionModel& model, StoragePolicy policy, const nlohmann::json& extra) {
  CompressionReport r;
  for (const auto& p : model.params()) {
    if (!p.prunable()) continue;
    const std::size_t nnz = count_nonzero(p.value.values());
    r.nnz += nnz;
    r.p_total += p.value.numel();
    r.dense_bytes += record_bytes(p.name, p.value.rank(), p.value.numel(), nnz, Storage::dense);
    r.coo_bytes +=
        record_bytes(p.name, p.value.rank(), p.value.numel(), count_stored(p.value.values()), Storage::coo);
  }
  r.sparsity = r.p_total ? 1.0 - static_cast<double>(r.nnz) / static_cast<double>(r.p_total) : 0.0;
  r.stored_bytes = policy == StoragePolicy::sparse ? r.coo_bytes : r.dense_bytes;
  r.ratio = r.stored_bytes ? static_cast<double>(r.dense_bytes) / static_cast<double>(r.stored_bytes) : 1.0;
  r.file_bytes = checkpoint_bytes(checkpoint_from_model(model, policy, extra));
  return r;
}

}  // namespace smp
