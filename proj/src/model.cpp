// SPDX-License-Identifier: Apache-2.0
#include "smp/model.hpp"

#include <algorithm>
#include <cmath>

#include "smp/errors.hpp"

namespace smp {

Arch parse_arch(const std::string& name) {
  if (name == "sa_lstm") return Arch::sa_lstm;
  if (name == "sa_gru") return Arch::sa_gru;
  if (name == "mini_transformer") return Arch::mini_transformer;
  throw ConfigError("unknown architecture '" + name + "' (expected sa_lstm, sa_gru or mini_transformer)");
}

const char* to_string(Arch arch) noexcept {
  switch (arch) {
    case Arch::sa_lstm: return "sa_lstm";
    case Arch::sa_gru: return "sa_gru";
    case Arch::mini_transformer: return "mini_transformer";
  }
  return "?";
}

const char* to_string(Part part) noexcept { return part == Part::encoder ? "encoder" : "decoder"; }

// ---------------------------------------------------------------------------
// Registry

std::size_t ParameterRegistry::add(std::string name, Part part, ParamRole role, Tensor value) {
  if (by_name_.count(name)) throw ContractError("duplicate parameter name " + name);
  value.set_requires_grad(true);
  by_name_[name] = params_.size();
  params_.push_back(Parameter{std::move(name), part, role, std::move(value), std::nullopt, std::nullopt});
  return params_.size() - 1;
}

std::size_t ParameterRegistry::index(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ContractError("no parameter named " + name);
  return it->second;
}

ParameterRegistry ParameterRegistry::clone() const {
  ParameterRegistry out;
  out.by_name_ = by_name_;
  out.params_.reserve(params_.size());
  for (const auto& p : params_) {
    Parameter c{p.name, p.part, p.role, p.value.clone(), std::nullopt, p.mask};
    if (p.gated) c.gated = p.gated->rebind(c.value);
    out.params_.push_back(std::move(c));
  }
  return out;
}

std::size_t ParameterRegistry::total_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

std::size_t ParameterRegistry::prunable_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.prunable()) n += p.value.numel();
  return n;
}

std::size_t ParameterRegistry::excluded_count() const noexcept { return total_count() - prunable_count(); }

StepWeights materialize(Graph& graph, ParameterRegistry& registry, Rng& rng, SampleKind frozen_kind) {
  StepWeights sw;
  sw.effective.reserve(registry.size());
  sw.gated.resize(registry.size());
  for (std::size_t i = 0; i < registry.size(); ++i) {
    Parameter& p = registry[i];
    if (p.gated && p.gated->mode() != GateMode::finalized) {
      PruneMask mask = p.gated->sample(rng, frozen_kind);
      sw.gated[i] = gated_forward(graph, *p.gated, mask);
      sw.effective.push_back(sw.gated[i]->effective);
    } else if (p.mask) {
      sw.effective.push_back(masked_forward(graph, p.value, *p.mask));
    } else {
      sw.effective.push_back(p.value);
    }
  }
  return sw;
}

std::vector<Tensor> inference_weights(const ParameterRegistry& registry) {
  std::vector<Tensor> out;
  out.reserve(registry.size());
  for (const auto& p : registry) {
    Tensor w = p.value.clone();
    w.set_requires_grad(false);
    if (p.gated && p.gated->mode() != GateMode::finalized)
      sample_round(p.gated->gate()).apply(w.values());
    else if (p.mask)
      p.mask->apply(w.values());
    out.push_back(std::move(w));
  }
  return out;
}

void attach_gates(CaptionModel& model, float init, std::span<const Part> parts, GateMode mode) {
  for (auto& p : model.params()) {
    if (!p.prunable() || p.gated) continue;
    if (std::find(parts.begin(), parts.end(), p.part) == parts.end()) continue;
    p.gated.emplace(p.value, init, mode);
  }
}

void apply_mask(Parameter& param, PruneMask mask) {
  if (mask.shape() != param.value.shape()) throw DimensionError("apply_mask: shape mismatch for " + param.name);
  if (!param.prunable()) throw ContractError("apply_mask: " + param.name + " is excluded from pruning");
  mask.apply(param.value.values());
  param.mask = std::move(mask);
}

void set_trainable(CaptionModel& model, Part part, bool trainable) {
  for (auto& p : model.params())
    if (p.part == part) p.value.set_requires_grad(trainable);
}

// ---------------------------------------------------------------------------
// Construction

namespace {

std::size_t encoder_out(Arch arch, const ModelDims& d) {
  return arch == Arch::mini_transformer ? d.hidden_dim : d.encoder_dim;
}

std::size_t rnn_input(const ModelDims& d) { return d.embed_dim + d.encoder_dim + d.hidden_dim; }

struct Builder {
  ParameterRegistry reg;
  Rng rng;

  explicit Builder(std::uint64_t seed) : rng(seed) {}

  void weight(const std::string& name, Part part, std::size_t rows, std::size_t cols) {
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::vector<float> v(rows * cols);
    for (auto& x : v) x = static_cast<float>((2.0 * rng.uniform() - 1.0) * a);
    reg.add(name, part, ParamRole::prunable, Tensor({rows, cols}, std::move(v)));
  }
  void embedding(const std::string& name, std::size_t rows, std::size_t cols) {
    std::vector<float> v(rows * cols);
    for (auto& x : v) x = static_cast<float>(0.3 * rng.normal());
    reg.add(name, Part::decoder, ParamRole::prunable, Tensor({rows, cols}, std::move(v)));
  }
  void bias(const std::string& name, Part part, std::size_t n, float value = 0.0f) {
    reg.add(name, part, ParamRole::excluded, Tensor::full({n}, value));
  }
  void linear(const std::string& name, Part part, std::size_t in, std::size_t out) {
    weight(name + ".weight", part, in, out);
    bias(name + ".bias", part, out);
  }
  void norm(const std::string& name, std::size_t n) {
    reg.add(name + ".gamma", Part::decoder, ParamRole::excluded, Tensor::full({n}, 1.0f));
    reg.add(name + ".beta", Part::decoder, ParamRole::excluded, Tensor::full({n}, 0.0f));
  }
};

void check_dims(Arch arch, const ModelDims& d) {
  const std::size_t fields[] = {d.feature_dim, d.regions, d.encoder_dim, d.embed_dim, d.hidden_dim,
                                d.attention_dim, d.vocab, d.max_len, d.heads, d.ffn_dim};
  if (std::any_of(std::begin(fields), std::end(fields), [](std::size_t v) { return v == 0; }))
    throw ConfigError("model dimensions must be positive");
  if (arch == Arch::mini_transformer && d.hidden_dim % d.heads != 0)
    throw ConfigError("hidden_dim must be divisible by heads");
  if (d.dropout < 0.0f || d.dropout >= 1.0f) throw ConfigError("dropout must be in [0, 1)");
}

}  // namespace

CaptionModel build_model(Arch arch, const ModelDims& d, std::uint64_t seed) {
  check_dims(arch, d);
  Builder b(seed);
  const std::size_t eo = encoder_out(arch, d);
  b.linear("encoder.fc1", Part::encoder, d.feature_dim, d.encoder_dim);
  b.linear("encoder.fc2", Part::encoder, d.encoder_dim, eo);

  const std::size_t h = d.hidden_dim;
  if (arch == Arch::sa_lstm || arch == Arch::sa_gru) {
    const bool lstm = arch == Arch::sa_lstm;
    b.linear("decoder.init", Part::decoder, d.encoder_dim, lstm ? 2 * h : h);
    b.embedding("decoder.embedding.weight", d.vocab, d.embed_dim);
    b.linear("decoder.attention.key", Part::decoder, d.encoder_dim, d.attention_dim);
    b.weight("decoder.attention.query.weight", Part::decoder, h, d.attention_dim);
    b.weight("decoder.attention.qk.weight", Part::decoder, d.attention_dim, 1);
    if (lstm) {
      b.weight("decoder.lstm.kernel", Part::decoder, rnn_input(d), 4 * h);
      // forget-gate bias starts at 1
      std::vector<float> bias(4 * h, 0.0f);
      std::fill(bias.begin() + static_cast<std::ptrdiff_t>(h), bias.begin() + static_cast<std::ptrdiff_t>(2 * h), 1.0f);
      b.reg.add("decoder.lstm.bias", Part::decoder, ParamRole::excluded, Tensor({4 * h}, std::move(bias)));
    } else {
      b.weight("decoder.gru.gate_kernel", Part::decoder, rnn_input(d), 2 * h);
      b.bias("decoder.gru.gate_bias", Part::decoder, 2 * h);
      b.weight("decoder.gru.candidate_kernel", Part::decoder, rnn_input(d), h);
      b.bias("decoder.gru.candidate_bias", Part::decoder, h);
    }
    b.linear("decoder.output", Part::decoder, h, d.vocab);
  } else {
    for (const char* block : {"decoder.relation", "decoder.self_attn", "decoder.cross_attn"}) {
      if (std::string(block) == "decoder.self_attn") {
        b.embedding("decoder.embedding.weight", d.vocab, h);
        b.embedding("decoder.position.weight", d.max_len, h);
      }
      for (const char* proj : {"query", "key", "value", "out"})
        b.linear(std::string(block) + "." + proj, Part::decoder, h, h);
      b.norm(std::string(block) + ".norm", h);
      if (std::string(block) == "decoder.relation") {
        b.linear("decoder.relation.ffn1", Part::decoder, h, d.ffn_dim);
        b.linear("decoder.relation.ffn2", Part::decoder, d.ffn_dim, h);
        b.norm("decoder.relation.ffn_norm", h);
      }
    }
    b.linear("decoder.ffn1", Part::decoder, h, d.ffn_dim);
    b.linear("decoder.ffn2", Part::decoder, d.ffn_dim, h);
    b.norm("decoder.ffn_norm", h);
    b.linear("decoder.output", Part::decoder, h, d.vocab);
  }
  return CaptionModel(arch, d, std::move(b.reg));
}

std::size_t expected_parameter_count(Arch arch, const ModelDims& d) {
  const std::size_t f = d.feature_dim, c = d.encoder_dim, e = d.embed_dim, h = d.hidden_dim, a = d.attention_dim,
                    v = d.vocab, t = d.max_len, ff = d.ffn_dim;
  switch (arch) {
    case Arch::sa_lstm:
      return (f * c + c) + (c * c + c) + (c * 2 * h + 2 * h) + v * e + (c * a + a) + h * a + a +
             (e + c + h) * 4 * h + 4 * h + (h * v + v);
    case Arch::sa_gru:
      return (f * c + c) + (c * c + c) + (c * h + h) + v * e + (c * a + a) + h * a + a +
             (e + c + h) * 2 * h + 2 * h + (e + c + h) * h + h + (h * v + v);
    case Arch::mini_transformer: {
      const std::size_t attn = 4 * (h * h + h) + 2 * h;
      const std::size_t ffn = (h * ff + ff) + (ff * h + h) + 2 * h;
      return (f * c + c) + (c * h + h) + 3 * attn + 2 * ffn + v * h + t * h + (h * v + v);
    }
  }
  return 0;
}

CaptionModel::CaptionModel(Arch arch, ModelDims dims, ParameterRegistry registry)
    : arch_(arch), dims_(dims), registry_(std::move(registry)) {}

void CaptionModel::set_dropout(float p) {
  if (p < 0.0f || p >= 1.0f) throw ConfigError("dropout must be in [0, 1)");
  dims_.dropout = p;
}

CaptionModel CaptionModel::clone() const { return CaptionModel(arch_, dims_, registry_.clone()); }

const Tensor& CaptionModel::w(std::span<const Tensor> weights, const std::string& name) const {
  return weights[registry_.index(name)];
}

// ---------------------------------------------------------------------------
// Forward passes

namespace {

Tensor linear(Graph& g, const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return g.add_row(g.matmul(x, weight), bias);
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t n = logits.rows(), v = logits.cols();
  auto lv = logits.values();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = lv.data() + i * v;
    out[i] = static_cast<int>(std::max_element(row, row + v) - row);
  }
  return out;
}

}  // namespace

Tensor CaptionModel::encode(Graph& g, std::span<const Tensor> ws, const Batch& b) const {
  if (b.regions != dims_.regions || b.features.cols() != dims_.feature_dim)
    throw DimensionError("batch geometry does not match model dims");
  Tensor x = g.relu(linear(g, b.features, w(ws, "encoder.fc1.weight"), w(ws, "encoder.fc1.bias")));
  return g.relu(linear(g, x, w(ws, "encoder.fc2.weight"), w(ws, "encoder.fc2.bias")));
}

Tensor CaptionModel::forward(Graph& graph, std::span<const Tensor> weights, const Batch& batch,
                             Rng* dropout_rng) const {
  if (weights.size() != registry_.size()) throw DimensionError("weight list does not match the registry");
  if (batch.steps > dims_.max_len) throw DimensionError("batch longer than model max_len");
  return arch_ == Arch::mini_transformer ? forward_transformer(graph, weights, batch, dropout_rng)
                                         : forward_recurrent(graph, weights, batch, dropout_rng);
}

std::vector<std::vector<int>> CaptionModel::greedy(std::span<const Tensor> weights, const Batch& batch) const {
  if (weights.size() != registry_.size()) throw DimensionError("weight list does not match the registry");
  return arch_ == Arch::mini_transformer ? greedy_transformer(weights, batch) : greedy_recurrent(weights, batch);
}

namespace {

// State and per-step attention shared by teacher forcing and greedy decoding.
struct RecurrentDecoder {
  Graph& g;
  const ModelDims& d;
  bool lstm;
  Tensor enc, keys, wq, wqk, kernel, bias, gate_kernel, gate_bias, cand_kernel, cand_bias, out_w, out_b, embed;
  Tensor h, c;
  std::size_t batch;

  Tensor step(std::span<const int> tokens) {
    const std::size_t hd = d.hidden_dim;
    Tensor q = g.matmul(h, wq);
    Tensor e = g.tanh(g.add(keys, g.repeat_rows(q, d.regions)));
    Tensor scores = g.reshape(g.matmul(e, wqk), {batch, d.regions});
    Tensor ctx = g.group_weighted_sum(g.softmax(scores), enc);
    Tensor emb = g.embedding(embed, tokens);
    if (lstm) {
      const Tensor parts[] = {emb, ctx, h};
      Tensor z = linear(g, g.concat_cols(parts), kernel, bias);
      Tensor i = g.sigmoid(g.slice_cols(z, 0, hd));
      Tensor f = g.sigmoid(g.slice_cols(z, hd, 2 * hd));
      Tensor u = g.tanh(g.slice_cols(z, 2 * hd, 3 * hd));
      Tensor o = g.sigmoid(g.slice_cols(z, 3 * hd, 4 * hd));
      c = g.add(g.mul(f, c), g.mul(i, u));
      h = g.mul(o, g.tanh(c));
    } else {
      const Tensor parts[] = {emb, ctx, h};
      Tensor rz = g.sigmoid(linear(g, g.concat_cols(parts), gate_kernel, gate_bias));
      Tensor r = g.slice_cols(rz, 0, hd);
      Tensor zg = g.slice_cols(rz, hd, 2 * hd);
      const Tensor cand_in[] = {emb, ctx, g.mul(r, h)};
      Tensor n = g.tanh(linear(g, g.concat_cols(cand_in), cand_kernel, cand_bias));
      h = g.add(n, g.mul(zg, g.sub(h, n)));
    }
    return h;
  }
};

}  // namespace

Tensor CaptionModel::forward_recurrent(Graph& g, std::span<const Tensor> ws, const Batch& b, Rng* rng) const {
  const bool lstm = arch_ == Arch::sa_lstm;
  const std::size_t hd = dims_.hidden_dim;
  RecurrentDecoder dec{g, dims_, lstm, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, b.size};
  dec.enc = encode(g, ws, b);
  Tensor init = g.tanh(linear(g, g.group_mean(dec.enc, dims_.regions), w(ws, "decoder.init.weight"),
                              w(ws, "decoder.init.bias")));
  if (lstm) {
    dec.h = g.slice_cols(init, 0, hd);
    dec.c = g.slice_cols(init, hd, 2 * hd);
    dec.kernel = w(ws, "decoder.lstm.kernel");
    dec.bias = w(ws, "decoder.lstm.bias");
  } else {
    dec.h = init;
    dec.gate_kernel = w(ws, "decoder.gru.gate_kernel");
    dec.gate_bias = w(ws, "decoder.gru.gate_bias");
    dec.cand_kernel = w(ws, "decoder.gru.candidate_kernel");
    dec.cand_bias = w(ws, "decoder.gru.candidate_bias");
  }
  dec.keys = linear(g, dec.enc, w(ws, "decoder.attention.key.weight"), w(ws, "decoder.attention.key.bias"));
  dec.wq = w(ws, "decoder.attention.query.weight");
  dec.wqk = w(ws, "decoder.attention.qk.weight");
  dec.embed = w(ws, "decoder.embedding.weight");
  const Tensor& out_w = w(ws, "decoder.output.weight");
  const Tensor& out_b = w(ws, "decoder.output.bias");

  std::vector<Tensor> logits;
  logits.reserve(b.steps);
  for (std::size_t t = 0; t < b.steps; ++t) {
    Tensor hs = dec.step(std::span<const int>(b.inputs).subspan(t * b.size, b.size));
    if (rng && dims_.dropout > 0.0f) hs = g.dropout(hs, dims_.dropout, *rng);
    logits.push_back(linear(g, hs, out_w, out_b));
  }
  return g.concat_rows(logits);
}

std::vector<std::vector<int>> CaptionModel::greedy_recurrent(std::span<const Tensor> ws, const Batch& b) const {
  Graph g;
  const bool lstm = arch_ == Arch::sa_lstm;
  const std::size_t hd = dims_.hidden_dim;
  RecurrentDecoder dec{g, dims_, lstm, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, {}, b.size};
  dec.enc = encode(g, ws, b);
  Tensor init = g.tanh(linear(g, g.group_mean(dec.enc, dims_.regions), w(ws, "decoder.init.weight"),
                              w(ws, "decoder.init.bias")));
  if (lstm) {
    dec.h = g.slice_cols(init, 0, hd);
    dec.c = g.slice_cols(init, hd, 2 * hd);
    dec.kernel = w(ws, "decoder.lstm.kernel");
    dec.bias = w(ws, "decoder.lstm.bias");
  } else {
    dec.h = init;
    dec.gate_kernel = w(ws, "decoder.gru.gate_kernel");
    dec.gate_bias = w(ws, "decoder.gru.gate_bias");
    dec.cand_kernel = w(ws, "decoder.gru.candidate_kernel");
    dec.cand_bias = w(ws, "decoder.gru.candidate_bias");
  }
  dec.keys = linear(g, dec.enc, w(ws, "decoder.attention.key.weight"), w(ws, "decoder.attention.key.bias"));
  dec.wq = w(ws, "decoder.attention.query.weight");
  dec.wqk = w(ws, "decoder.attention.qk.weight");
  dec.embed = w(ws, "decoder.embedding.weight");

  std::vector<std::vector<int>> out(b.size);
  std::vector<bool> done(b.size, false);
  std::vector<int> tokens(b.size, vocab::bos);
  for (std::size_t t = 0; t < dims_.max_len; ++t) {
    Tensor hs = dec.step(tokens);
    tokens = argmax_rows(linear(g, hs, w(ws, "decoder.output.weight"), w(ws, "decoder.output.bias")));
    for (std::size_t i = 0; i < b.size; ++i) {
      if (done[i]) continue;
      out[i].push_back(tokens[i]);
      if (tokens[i] == vocab::eos) done[i] = true;
    }
    if (std::all_of(done.begin(), done.end(), [](bool x) { return x; })) break;
  }
  return out;
}

namespace {

struct TransformerWeights {
  std::span<const Tensor> ws;
  const ParameterRegistry& reg;
  const Tensor& operator()(const std::string& name) const { return ws[reg.index(name)]; }
};

Tensor attention_block(Graph& g, const TransformerWeights& w, const std::string& name, const Tensor& x,
                       const Tensor& memory, std::size_t groups, std::size_t heads, bool causal) {
  Tensor q = linear(g, x, w(name + ".query.weight"), w(name + ".query.bias"));
  Tensor k = linear(g, memory, w(name + ".key.weight"), w(name + ".key.bias"));
  Tensor v = linear(g, memory, w(name + ".value.weight"), w(name + ".value.bias"));
  Tensor a = linear(g, g.attention(q, k, v, groups, heads, causal), w(name + ".out.weight"), w(name + ".out.bias"));
  return g.layer_norm(g.add(x, a), w(name + ".norm.gamma"), w(name + ".norm.beta"));
}

Tensor ffn_block(Graph& g, const TransformerWeights& w, const std::string& prefix, const std::string& norm,
                 const Tensor& x) {
  Tensor hdn = g.relu(linear(g, x, w(prefix + "ffn1.weight"), w(prefix + "ffn1.bias")));
  Tensor y = linear(g, hdn, w(prefix + "ffn2.weight"), w(prefix + "ffn2.bias"));
  return g.layer_norm(g.add(x, y), w(norm + ".gamma"), w(norm + ".beta"));
}

// Decoder stack over b-major token rows (groups x len); returns hidden rows.
Tensor transformer_decode(Graph& g, const TransformerWeights& w, const ModelDims& d, const Tensor& memory,
                          std::span<const int> ids, std::size_t groups, std::size_t len) {
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) pos[i] = static_cast<int>(i % len);
  Tensor x = g.add(g.embedding(w("decoder.embedding.weight"), ids), g.embedding(w("decoder.position.weight"), pos));
  x = attention_block(g, w, "decoder.self_attn", x, x, groups, d.heads, true);
  x = attention_block(g, w, "decoder.cross_attn", x, memory, groups, d.heads, false);
  return ffn_block(g, w, "decoder.", "decoder.ffn_norm", x);
}

}  // namespace

Tensor CaptionModel::forward_transformer(Graph& g, std::span<const Tensor> ws, const Batch& b, Rng* rng) const {
  TransformerWeights w{ws, registry_};
  Tensor enc = encode(g, ws, b);
  Tensor mem = attention_block(g, w, "decoder.relation", enc, enc, b.size, dims_.heads, false);
  mem = ffn_block(g, w, "decoder.relation.", "decoder.relation.ffn_norm", mem);

  const std::size_t T = b.steps, B = b.size;
  std::vector<int> ids(T * B);
  std::vector<int> to_time_major(T * B);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < B; ++i) {
      ids[i * T + t] = b.inputs[t * B + i];
      to_time_major[t * B + i] = static_cast<int>(i * T + t);
    }
  Tensor hs = transformer_decode(g, w, dims_, mem, ids, B, T);
  if (rng && dims_.dropout > 0.0f) hs = g.dropout(hs, dims_.dropout, *rng);
  Tensor logits = linear(g, hs, w("decoder.output.weight"), w("decoder.output.bias"));
  return g.embedding(logits, to_time_major);
}

std::vector<std::vector<int>> CaptionModel::greedy_transformer(std::span<const Tensor> ws, const Batch& b) const {
  Graph g;
  TransformerWeights w{ws, registry_};
  Tensor enc = encode(g, ws, b);
  Tensor mem = attention_block(g, w, "decoder.relation", enc, enc, b.size, dims_.heads, false);
  mem = ffn_block(g, w, "decoder.relation.", "decoder.relation.ffn_norm", mem);

  const std::size_t B = b.size;
  std::vector<std::vector<int>> prefix(B, std::vector<int>{vocab::bos});
  std::vector<std::vector<int>> out(B);
  std::vector<bool> done(B, false);
  for (std::size_t len = 1; len <= dims_.max_len; ++len) {
    std::vector<int> ids;
    ids.reserve(B * len);
    for (const auto& p : prefix) ids.insert(ids.end(), p.begin(), p.end());
    Tensor hs = transformer_decode(g, w, dims_, mem, ids, B, len);
    std::vector<int> last(B);
    for (std::size_t i = 0; i < B; ++i) last[i] = static_cast<int>(i * len + len - 1);
    Tensor logits = linear(g, g.embedding(hs, last), w("decoder.output.weight"), w("decoder.output.bias"));
    const std::vector<int> next = argmax_rows(logits);
    for (std::size_t i = 0; i < B; ++i) {
      prefix[i].push_back(next[i]);
      if (done[i]) continue;
      out[i].push_back(next[i]);
      if (next[i] == vocab::eos) done[i] = true;
    }
    if (std::all_of(done.begin(), done.end(), [](bool x) { return x; })) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cost model

FlopCount CaptionModel::flops(std::span<const Tensor> weights, std::size_t caption_len) const {
  FlopCount fc;
  auto use = [&](const std::string& name, double rows) {
    const Tensor& t = w(weights, name);
    const auto v = t.values();
    const double nnz = static_cast<double>(std::count_if(v.begin(), v.end(), [](float x) { return x != 0.0f; }));
    fc.dense += 2.0 * rows * static_cast<double>(t.numel());
    fc.sparse += 2.0 * rows * nnz;
  };
  auto dense_ops = [&](double macs) {
    fc.dense += 2.0 * macs;
    fc.sparse += 2.0 * macs;
  };
  const double K = static_cast<double>(dims_.regions);
  const double L = static_cast<double>(caption_len);
  use("encoder.fc1.weight", K);
  use("encoder.fc2.weight", K);
  if (arch_ != Arch::mini_transformer) {
    const double C = static_cast<double>(dims_.encoder_dim);
    use("decoder.init.weight", 1);
    use("decoder.attention.key.weight", K);
    use("decoder.attention.query.weight", L);
    use("decoder.attention.qk.weight", K * L);
    dense_ops(K * C * L);  // context weighted sum
    if (arch_ == Arch::sa_lstm) {
      use("decoder.lstm.kernel", L);
    } else {
      use("decoder.gru.gate_kernel", L);
      use("decoder.gru.candidate_kernel", L);
    }
    use("decoder.output.weight", L);
  } else {
    const double H = static_cast<double>(dims_.hidden_dim);
    for (const char* p : {"query", "key", "value", "out"}) use(std::string("decoder.relation.") + p + ".weight", K);
    use("decoder.relation.ffn1.weight", K);
    use("decoder.relation.ffn2.weight", K);
    dense_ops(2.0 * K * K * H);
    for (const char* p : {"query", "key", "value", "out"}) use(std::string("decoder.self_attn.") + p + ".weight", L);
    use("decoder.cross_attn.query.weight", L);
    use("decoder.cross_attn.out.weight", L);
    use("decoder.cross_attn.key.weight", K);
    use("decoder.cross_attn.value.weight", K);
    use("decoder.ffn1.weight", L);
    use("decoder.ffn2.weight", L);
    use("decoder.output.weight", L);
    dense_ops(2.0 * H * (L * (L + 1) / 2.0) + 2.0 * H * K * L);
  }
  return fc;
}

}  // namespace smp
