// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tokenmark/autodiff.hpp"
#include "tokenmark/rng.hpp"
#include "tokenmark/tensor.hpp"

namespace tokenmark {

enum class Activation : std::uint32_t { kRelu = 0, kGelu = 1 };

struct ModelConfig {
  std::uint32_t n_layers = 2;
  std::uint32_t d = 16;
  std::uint32_t n_heads = 2;
  std::uint32_t d_mlp = 32;
  std::uint32_t vocab_size = 64;
  std::uint32_t max_seq_len = 16;
  Activation activation = Activation::kGelu;
  // Biases on the Q/K/V/output projections of attention.
  bool attn_bias = true;

  std::uint32_t head_dim() const { return d / n_heads; }
  // Throws ConfigError when an invariant does not hold.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// How a tensor changes when the feature dimension is permuted by P.
enum class TransportRule {
  kFixed,      // untouched (embeddings, hidden-side MLP bias)
  kConjugate,  // P W P^-1   (W_Q, W_K, W_V, W_a)
  kColumns,    // W P^-1     (W_1, and the d-sized vectors b, gamma, beta)
  kRows,       // P W        (W_2)
};

struct BlockWeights {
  Tensor ln1_gamma, ln1_beta;
  Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_a, b_a;
  Tensor ln2_gamma, ln2_beta;
  Tensor w_1, b_1, w_2, b_2;
};

// Embedding layer T plus the backbone F.
struct TransformerWeights {
  ModelConfig config;
  Tensor token_embedding;     // [vocab, d]
  Tensor position_embedding;  // [max_seq_len, d]
  std::vector<BlockWeights> blocks;
  Tensor final_gamma, final_beta;

  static TransformerWeights init(const ModelConfig& config, Rng& rng);

  struct Entry {
    std::string name;
    Tensor* tensor;
    TransportRule rule;
    bool is_embedding;
  };
  struct ConstEntry {
    std::string name;
    const Tensor* tensor;
    TransportRule rule;
    bool is_embedding;
  };
  // Stable, serialization-order listing of every tensor. Attention biases are
  // omitted when config.attn_bias is off.
  std::vector<Entry> entries();
  std::vector<ConstEntry> entries() const;

  std::vector<Tensor*> backbone_params();
  std::vector<Tensor*> all_params();
  void set_requires_grad(bool on);

  // Checks that every tensor has the shape config dictates.
  void validate() const;
  bool same_values(const TransformerWeights& other) const;
};

struct ForwardOptions {
  float dropout = 0.0f;  // applied to each block output when > 0
  Rng* rng = nullptr;
};

// Token sequences of identical length stacked back to back.
struct TokenBatch {
  std::vector<std::size_t> tokens;
  std::size_t seq_len = 0;

  std::size_t size() const { return seq_len == 0 ? 0 : tokens.size() / seq_len; }
};

// Z = token_embedding[tokens] + position_embedding[position]; [B*n, d].
Var embed(Tape& tape, TransformerWeights& w, const TokenBatch& batch);
Var embed(Tape& tape, const TransformerWeights& w, const TokenBatch& batch);

// Pre-LN encoder stack followed by a final layer norm; [B*n, d] -> [B*n, d].
// Throws NumericFault naming the first block whose output is not finite.
Var forward_backbone(Tape& tape, Var z, TransformerWeights& w, std::size_t seq_len, const ForwardOptions& opts = {});
Var forward_backbone(Tape& tape, Var z, const TransformerWeights& w, std::size_t seq_len,
                     const ForwardOptions& opts = {});

// Inference helpers returning plain tensors.
Tensor embed_tokens(const TransformerWeights& w, const TokenBatch& batch);
Tensor backbone_features(const TransformerWeights& w, const Tensor& z, std::size_t seq_len);

enum class HeadKind : std::uint32_t { kDownstream = 0, kWatermarkDecoder = 1, kIdentity = 2 };
enum class Reduction : std::uint32_t { kFirstToken = 0, kMeanPool = 1 };

struct LinearLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

// Downstream classifier DS, watermark decoder G, or a pass-through.
// Multi-layer heads apply ReLU between layers.
struct TaskHead {
  HeadKind kind = HeadKind::kIdentity;
  Reduction reduction = Reduction::kFirstToken;
  std::vector<LinearLayer> layers;

  static TaskHead identity(Reduction reduction);
  static TaskHead linear(HeadKind kind, Reduction reduction, std::size_t in, std::size_t out, Rng& rng,
                         float stddev);
  static TaskHead mlp(HeadKind kind, Reduction reduction, std::size_t in, std::size_t hidden, std::size_t out,
                      Rng& rng);

  std::size_t in_dim() const;
  std::size_t out_dim() const;
  std::vector<Tensor*> params();
  void set_requires_grad(bool on);
};

// Reduces [B*n, d] features per sequence and applies the head; -> [B, out].
Var forward_head(Tape& tape, Var features, TaskHead& head, std::size_t seq_len);
Var forward_head(Tape& tape, Var features, const TaskHead& head, std::size_t seq_len);
Var reduce_tokens(Var features, Reduction reduction, std::size_t seq_len);

enum class LossKind { kCrossEntropy, kCosineSimilarity };

// Cross entropy: mean of -log softmax(pred)[target] with targets as class ids.
// Cosine: mean per-row similarity between pred and target rows.
Var loss(LossKind kind, Var pred, Var target_rows);
Var loss(LossKind kind, Var pred, std::span<const std::size_t> targets);

}  // namespace tokenmark
