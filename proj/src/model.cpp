// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/model.hpp"

#include <cmath>
#include <utility>

#include <fmt/format.h>

#include "tokenmark/errors.hpp"

namespace tokenmark {

void ModelConfig::validate() const {
  if (n_layers == 0) throw ConfigError("model.n_layers must be >= 1");
  if (d < 2) throw ConfigError("model.d must be >= 2");
  if (n_heads == 0 || d % n_heads != 0) {
    throw ConfigError(fmt::format("model.d ({}) must be divisible by model.n_heads ({})", d, n_heads));
  }
  if (d_mlp < d) throw ConfigError(fmt::format("model.d_mlp ({}) must be >= model.d ({})", d_mlp, d));
  if (vocab_size == 0) throw ConfigError("model.vocab_size must be >= 1");
  if (max_seq_len == 0) throw ConfigError("model.max_seq_len must be >= 1");
  if (activation != Activation::kRelu && activation != Activation::kGelu) {
    throw ConfigError("model.activation must be relu or gelu");
  }
}

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, float stddev) {
  Tensor t(std::move(shape));
  for (float& v : t.data()) v = rng.normal(0.0f, stddev);
  return t;
}

template <class Self, class F>
void visit_weights(Self& w, F&& f) {
  const bool ab = w.config.attn_bias;
  f("embed.token", w.token_embedding, TransportRule::kFixed, true);
  f("embed.position", w.position_embedding, TransportRule::kFixed, true);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = fmt::format("block{}.", l);
    f(p + "ln1.gamma", b.ln1_gamma, TransportRule::kColumns, false);
    f(p + "ln1.beta", b.ln1_beta, TransportRule::kColumns, false);
    f(p + "attn.w_q", b.w_q, TransportRule::kConjugate, false);
    if (ab) f(p + "attn.b_q", b.b_q, TransportRule::kColumns, false);
    f(p + "attn.w_k", b.w_k, TransportRule::kConjugate, false);
    if (ab) f(p + "attn.b_k", b.b_k, TransportRule::kColumns, false);
    f(p + "attn.w_v", b.w_v, TransportRule::kConjugate, false);
    if (ab) f(p + "attn.b_v", b.b_v, TransportRule::kColumns, false);
    f(p + "attn.w_a", b.w_a, TransportRule::kConjugate, false);
    if (ab) f(p + "attn.b_a", b.b_a, TransportRule::kColumns, false);
    f(p + "ln2.gamma", b.ln2_gamma, TransportRule::kColumns, false);
    f(p + "ln2.beta", b.ln2_beta, TransportRule::kColumns, false);
    f(p + "mlp.w_1", b.w_1, TransportRule::kColumns, false);
    f(p + "mlp.b_1", b.b_1, TransportRule::kFixed, false);
    f(p + "mlp.w_2", b.w_2, TransportRule::kRows, false);
    f(p + "mlp.b_2", b.b_2, TransportRule::kColumns, false);
  }
  f("final.gamma", w.final_gamma, TransportRule::kColumns, false);
  f("final.beta", w.final_beta, TransportRule::kColumns, false);
}

Shape expected_shape(const ModelConfig& c, const std::string& name) {
  const std::size_t d = c.d, h = c.d_mlp;
  if (name == "embed.token") return {c.vocab_size, d};
  if (name == "embed.position") return {c.max_seq_len, d};
  if (name.ends_with("w_q") || name.ends_with("w_k") || name.ends_with("w_v") || name.ends_with("w_a")) return {d, d};
  if (name.ends_with("w_1")) return {h, d};
  if (name.ends_with("b_1")) return {h};
  if (name.ends_with("w_2")) return {d, h};
  return {d};
}

}  // namespace

TransformerWeights TransformerWeights::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  TransformerWeights w;
  w.config = config;
  const std::size_t d = config.d, h = config.d_mlp;
  w.token_embedding = normal_tensor({config.vocab_size, d}, rng, 1.0f);
  w.position_embedding = normal_tensor({config.max_seq_len, d}, rng, 0.3f);
  const float sd = 1.0f / std::sqrt(static_cast<float>(d));
  const float sh = 1.0f / std::sqrt(static_cast<float>(h));
  for (std::uint32_t l = 0; l < config.n_layers; ++l) {
    BlockWeights b;
    b.ln1_gamma = Tensor({d}, 1.0f);
    b.ln1_beta = Tensor({d});
    b.w_q = normal_tensor({d, d}, rng, sd);
    b.w_k = normal_tensor({d, d}, rng, sd);
    b.w_v = normal_tensor({d, d}, rng, sd);
    b.w_a = normal_tensor({d, d}, rng, sd);
    b.b_q = Tensor({d});
    b.b_k = Tensor({d});
    b.b_v = Tensor({d});
    b.b_a = Tensor({d});
    b.ln2_gamma = Tensor({d}, 1.0f);
    b.ln2_beta = Tensor({d});
    b.w_1 = normal_tensor({h, d}, rng, sd);
    b.b_1 = Tensor({h});
    b.w_2 = normal_tensor({d, h}, rng, sh);
    b.b_2 = Tensor({d});
    w.blocks.push_back(std::move(b));
  }
  w.final_gamma = Tensor({d}, 1.0f);
  w.final_beta = Tensor({d});
  return w;
}

std::vector<TransformerWeights::Entry> TransformerWeights::entries() {
  std::vector<Entry> out;
  visit_weights(*this, [&](std::string name, Tensor& t, TransportRule r, bool e) {
    out.push_back({std::move(name), &t, r, e});
  });
  return out;
}

std::vector<TransformerWeights::ConstEntry> TransformerWeights::entries() const {
  std::vector<ConstEntry> out;
  visit_weights(*this, [&](std::string name, const Tensor& t, TransportRule r, bool e) {
    out.push_back({std::move(name), &t, r, e});
  });
  return out;
}

std::vector<Tensor*> TransformerWeights::backbone_params() {
  std::vector<Tensor*> out;
  for (auto& e : entries())
    if (!e.is_embedding) out.push_back(e.tensor);
  return out;
}

std::vector<Tensor*> TransformerWeights::all_params() {
  std::vector<Tensor*> out;
  for (auto& e : entries()) out.push_back(e.tensor);
  return out;
}

void TransformerWeights::set_requires_grad(bool on) {
  for (Tensor* t : all_params()) t->set_requires_grad(on);
}

void TransformerWeights::validate() const {
  config.validate();
  if (blocks.size() != config.n_layers) {
    throw DimensionError(fmt::format("weights hold {} blocks, config says {}", blocks.size(), config.n_layers));
  }
  for (const auto& e : entries()) require_shape(*e.tensor, expected_shape(config, e.name), e.name.c_str());
}

bool TransformerWeights::same_values(const TransformerWeights& other) const {
  if (!(config == other.config)) return false;
  auto a = entries();
  auto b = other.entries();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i].tensor->same_values(*b[i].tensor)) return false;
  return true;
}

namespace {

template <class W>
Var embed_impl(Tape& tape, W& w, const TokenBatch& batch) {
  const std::size_t n = batch.seq_len;
  if (n == 0 || batch.tokens.size() % n != 0) throw InputError("token batch is not a whole number of sequences");
  if (n > w.config.max_seq_len) {
    throw InputError(fmt::format("sequence length {} exceeds max_seq_len {}", n, w.config.max_seq_len));
  }
  for (std::size_t id : batch.tokens) {
    if (id >= w.config.vocab_size) {
      throw InputError(fmt::format("token id {} is out of vocabulary (size {})", id, w.config.vocab_size));
    }
  }
  std::vector<std::size_t> positions(batch.tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % n;
  Var tok = gather_rows(tape.parameter(w.token_embedding), batch.tokens);
  Var pos = gather_rows(tape.parameter(w.position_embedding), positions);
  return add(tok, pos);
}

void check_finite(const Tensor& t, std::size_t block) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericFault(fmt::format("non-finite activation {} at element {} (row {}, col {}) after block {}", t[i], i,
                                     i / t.cols(), i % t.cols(), block));
    }
  }
}

template <class W>
Var linear(Tape& tape, Var x, W& weight, W& bias, bool with_bias) {
  Var y = matmul_nt(x, tape.parameter(weight));
  return with_bias ? add_bias(y, tape.parameter(bias)) : y;
}

template <class W>
Var backbone_impl(Tape& tape, Var z, W& w, std::size_t seq_len, const ForwardOptions& opts) {
  const auto& c = w.config;
  if (z.value().rank() != 2 || z.value().cols() != c.d) {
    throw DimensionError(fmt::format("backbone input {} does not have d = {} columns", shape_string(z.shape()), c.d));
  }
  if (opts.dropout > 0.0f && opts.rng == nullptr) throw ContractViolation("dropout needs an rng");
  Var x = z;
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    Var h = layernorm(x, tape.parameter(b.ln1_gamma), tape.parameter(b.ln1_beta));
    Var q = linear(tape, h, b.w_q, b.b_q, c.attn_bias);
    Var k = linear(tape, h, b.w_k, b.b_k, c.attn_bias);
    Var v = linear(tape, h, b.w_v, b.b_v, c.attn_bias);
    Var a = attention(q, k, v, c.n_heads, seq_len);
    x = add(x, linear(tape, a, b.w_a, b.b_a, c.attn_bias));
    Var h2 = layernorm(x, tape.parameter(b.ln2_gamma), tape.parameter(b.ln2_beta));
    Var m = linear(tape, h2, b.w_1, b.b_1, true);
    m = c.activation == Activation::kRelu ? relu(m) : gelu(m);
    x = add(x, linear(tape, m, b.w_2, b.b_2, true));
    if (opts.dropout > 0.0f) x = dropout(x, opts.dropout, *opts.rng);
    check_finite(x.value(), l);
  }
  return layernorm(x, tape.parameter(w.final_gamma), tape.parameter(w.final_beta));
}

}  // namespace

Var embed(Tape& tape, TransformerWeights& w, const TokenBatch& batch) { return embed_impl(tape, w, batch); }
Var embed(Tape& tape, const TransformerWeights& w, const TokenBatch& batch) { return embed_impl(tape, w, batch); }

Var forward_backbone(Tape& tape, Var z, TransformerWeights& w, std::size_t seq_len, const ForwardOptions& opts) {
  return backbone_impl(tape, z, w, seq_len, opts);
}
Var forward_backbone(Tape& tape, Var z, const TransformerWeights& w, std::size_t seq_len,
                     const ForwardOptions& opts) {
  return backbone_impl(tape, z, w, seq_len, opts);
}

Tensor embed_tokens(const TransformerWeights& w, const TokenBatch& batch) {
  Tape tape;
  return embed(tape, w, batch).value().detached();
}

Tensor backbone_features(const TransformerWeights& w, const Tensor& z, std::size_t seq_len) {
  Tape tape;
  return forward_backbone(tape, tape.constant(z), w, seq_len).value().detached();
}

TaskHead TaskHead::identity(Reduction reduction) {
  TaskHead h;
  h.kind = HeadKind::kIdentity;
  h.reduction = reduction;
  return h;
}

TaskHead TaskHead::linear(HeadKind kind, Reduction reduction, std::size_t in, std::size_t out, Rng& rng,
                          float stddev) {
  TaskHead h;
  h.kind = kind;
  h.reduction = reduction;
  h.layers.push_back({normal_tensor({out, in}, rng, stddev), Tensor({out})});
  return h;
}

TaskHead TaskHead::mlp(HeadKind kind, Reduction reduction, std::size_t in, std::size_t hidden, std::size_t out,
                       Rng& rng) {
  TaskHead h;
  h.kind = kind;
  h.reduction = reduction;
  h.layers.push_back(
      {normal_tensor({hidden, in}, rng, 1.0f / std::sqrt(static_cast<float>(in))), Tensor({hidden})});
  h.layers.push_back(
      {normal_tensor({out, hidden}, rng, 1.0f / std::sqrt(static_cast<float>(hidden))), Tensor({out})});
  return h;
}

std::size_t TaskHead::in_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
std::size_t TaskHead::out_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }

std::vector<Tensor*> TaskHead::params() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
  return out;
}

void TaskHead::set_requires_grad(bool on) {
  for (Tensor* t : params()) t->set_requires_grad(on);
}

Var reduce_tokens(Var features, Reduction reduction, std::size_t seq_len) {
  const Tensor& f = features.value();
  if (seq_len == 0 || f.rank() != 2 || f.rows() % seq_len != 0) {
    throw DimensionError(fmt::format("features {} are not whole sequences of length {}", shape_string(f.shape()), seq_len));
  }
  if (reduction == Reduction::kMeanPool) return mean_pool(features, seq_len);
  std::vector<std::size_t> first(f.rows() / seq_len);
  for (std::size_t i = 0; i < first.size(); ++i) first[i] = i * seq_len;
  return gather_rows(features, first);
}

namespace {

template <class H>
Var head_impl(Tape& tape, Var features, H& head, std::size_t seq_len) {
  Var x = reduce_tokens(features, head.reduction, seq_len);
  if (!head.layers.empty() && x.value().cols() != head.in_dim()) {
    throw DimensionError(fmt::format("head expects {} input features, got {}", head.in_dim(), x.value().cols()));
  }
  for (std::size_t i = 0; i < head.layers.size(); ++i) {
    auto& layer = head.layers[i];
    x = add_bias(matmul_nt(x, tape.parameter(layer.weight)), tape.parameter(layer.bias));
    if (i + 1 < head.layers.size()) x = relu(x);
  }
  return x;
}

}  // namespace

Var forward_head(Tape& tape, Var features, TaskHead& head, std::size_t seq_len) {
  return head_impl(tape, features, head, seq_len);
}
Var forward_head(Tape& tape, Var features, const TaskHead& head, std::size_t seq_len) {
  return head_impl(tape, features, head, seq_len);
}

Var loss(LossKind kind, Var pred, Var target_rows) {
  if (kind != LossKind::kCosineSimilarity) throw ContractViolation("row targets are only meaningful for cosine loss");
  return mean(row_cosine(pred, target_rows));
}

Var loss(LossKind kind, Var pred, std::span<const std::size_t> targets) {
  if (kind != LossKind::kCrossEntropy) throw ContractViolation("class-id targets are only meaningful for cross entropy");
  return cross_entropy(pred, targets);
}

}  // namespace tokenmark
