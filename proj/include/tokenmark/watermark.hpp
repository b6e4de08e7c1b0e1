// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenmark/dataset.hpp"
#include "tokenmark/model.hpp"
#include "tokenmark/permutation.hpp"
#include "tokenmark/train.hpp"

namespace tokenmark {

enum class Scheme { kB, kS, kTriggerBaseline };

std::string scheme_name(Scheme s);
Scheme parse_scheme(const std::string& name);

struct WRReport {
  Scheme scheme = Scheme::kB;
  double wr = 0.0;
  std::size_t total = 0;
  std::size_t count = 0;
  double threshold = 0.0;      // scheme S only
  std::size_t target = 0;      // scheme B / trigger baseline only
  std::vector<double> scores;  // S: similarity to sk; B: logit of the target class
  std::vector<std::size_t> decoded;             // B: argmax class per sample
  std::vector<std::vector<float>> logits;       // B: full decoder output per sample
  std::string model_label;
  std::string extraction_label;
  std::optional<double> false_positive_rate;  // WR on an unwatermarked reference
};

void to_json(nlohmann::json& j, const WRReport& r);

// G(F(T(x)·P, θ)·P^-1) for every sample; rows follow the dataset order.
Tensor decode(const TransformerWeights& w, const TaskHead& g, const PermutationSpec& spec, const Dataset& data);
// Same pipeline starting from given backbone inputs Z.
Tensor decode_features(const Tensor& features, const TaskHead& g, std::size_t seq_len);

// WR = |{i : argmax row i == target}| / n.
WRReport classification_wr(const Tensor& logits, std::size_t target);
// WR = |{i : sim(row i, sk) > threshold}| / n.
WRReport similarity_wr(const Tensor& decoded, const Tensor& sk, double threshold);

// ---- TokenMark-B ------------------------------------------------------------

struct EmbedConfigB {
  std::size_t steps = 1;
  std::size_t samples = 256;  // embedding set size drawn from the data
  std::size_t batch_size = 32;
  float learning_rate = 1e-4f;
  // Weight of the clean downstream CE term trained alongside L_wm; 0 disables it.
  float clean_weight = 0.0f;

  bool operator==(const EmbedConfigB&) const = default;
};

void to_json(nlohmann::json& j, const EmbedConfigB& c);
void from_json(const nlohmann::json& j, EmbedConfigB& c);

struct BundleB {
  PermutationSpec spec;
  PermutationFamily family = PermutationFamily::kHeadsAndWithin;
  std::size_t target = 0;  // y_t
  TaskHead decoder;        // frozen random linear map d -> n_classes
  std::uint64_t decoder_seed = 0;
  std::uint64_t spec_seed = 0;
  float epsilon_wm = 0.5f;  // unused by the argmax decision
  EmbedConfigB embed;
};

// Fresh secret material: spec drawn with sample_secret, G Gaussian with each
// row centred to zero sum.
BundleB make_bundle_b(const ModelConfig& config, std::size_t n_classes, std::size_t target, std::uint64_t seed,
                      PermutationFamily family, const EmbedConfigB& embed);

TaskHead random_decoder(std::size_t d, std::size_t n_classes, Rng& rng);

// Trains the backbone weights in place on L_wm = CE(G(F(ZP, θ*)P^-1), y_t).
// When embed.clean_weight > 0 a downstream CE term is trained alongside through
// a copy of `clean_head`, or a fresh head when none is given. Returns the L_wm
// value seen at each step (before its update).
std::vector<double> embed_b(TransformerWeights& w, const BundleB& bundle, const Dataset& data,
                            const TaskHead* clean_head = nullptr);

WRReport extract_b(const TransformerWeights& w, const BundleB& bundle, const Dataset& data);
WRReport extract_b(const TransformerWeights& w, const BundleB& bundle, const PermutationSpec& spec,
                   const Dataset& data);

// ---- trigger baseline -------------------------------------------------------

struct TriggerConfig {
  std::vector<std::size_t> tokens{0, 1, 2};
  float poison_rate = 0.5f;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  float learning_rate = 1e-3f;
  std::size_t target = 0;
  std::uint64_t seed = 0;

  bool operator==(const TriggerConfig&) const = default;
};

void to_json(nlohmann::json& j, const TriggerConfig& c);
void from_json(const nlohmann::json& j, TriggerConfig& c);

struct TriggerBundle {
  TriggerConfig config;
  TaskHead decoder;
  std::uint64_t decoder_seed = 0;
};

// Trigger tokens are written at the front of the sequence; the original tokens
// shift right and the tail is dropped so the length stays fixed.
Dataset apply_trigger(const Dataset& data, const std::vector<std::size_t>& trigger);

// Joint training: clean CE through the downstream head on every sample plus
// CE(G(F(trigger ⊕ x)), y_t) on a poison_rate share of each batch.
TriggerBundle embed_trigger_baseline(TransformerWeights& w, TaskHead& downstream, const Dataset& data,
                                     std::size_t n_classes, const TriggerConfig& config);

WRReport extract_trigger(const TransformerWeights& w, const TriggerBundle& bundle, const Dataset& data);

// ---- TokenMark-S ------------------------------------------------------------

struct EmbedConfigS {
  std::size_t steps = 500;
  std::size_t samples = 2048;
  std::size_t batch_size = 128;
  float lr_backbone = 3e-3f;
  float lr_decoder = 3e-3f;
  float lr_shadow = 1e-4f;
  float dropout = 0.1f;
  std::size_t sk_dim = 16;
  std::size_t decoder_hidden = 64;

  bool operator==(const EmbedConfigS&) const = default;
};

void to_json(nlohmann::json& j, const EmbedConfigS& c);
void from_json(const nlohmann::json& j, EmbedConfigS& c);

struct BundleS {
  PermutationSpec spec;
  PermutationFamily family = PermutationFamily::kHeadsAndWithin;
  Tensor sk;  // [sk_dim], standard normal
  TaskHead decoder;
  float epsilon_wm = 0.5f;
  std::uint64_t spec_seed = 0;
  std::uint64_t sk_seed = 0;
  std::uint64_t decoder_seed = 0;
  std::uint64_t shadow_seed = 0;
  EmbedConfigS embed;
};

BundleS make_bundle_s(const ModelConfig& config, std::uint64_t seed, PermutationFamily family,
                      const EmbedConfigS& embed, float epsilon_wm = 0.5f);

// -sim(F(Z, θ), F(Z, θ*)) on first-token features, averaged over the batch.
Var loss_ds(Var original_features, Var watermarked_features, std::size_t seq_len);
// -sim(sk, decoded) and sim(sk, decoded)², averaged over rows of `decoded`.
Var loss_corr(const Tensor& sk, Var decoded);
Var loss_uncorr(const Tensor& sk, Var decoded);

struct StepLossesS {
  double shadow = 0.0;   // L_S
  double decoder = 0.0;  // L_G
  double backbone = 0.0; // L_B
};

struct SessionS {
  const TransformerWeights* original = nullptr;  // θ, never written
  TransformerWeights watermarked;                // θ*
  TransformerWeights shadow;                     // θ_s
  BundleS bundle;                                // holds the trainable G
};

SessionS start_session_s(const TransformerWeights& original, BundleS bundle);

// Runs bundle.embed.steps iterations of the three sequential updates. Throws
// TrainingFault with the iteration index when a loss is not finite.
std::vector<StepLossesS> embed_s(SessionS& session, const Dataset& data);

// One optimizer step of θ_s on L_S for inputs Z.
double shadow_train_step(TransformerWeights& shadow, const TransformerWeights& original, const Tensor& z,
                         std::size_t seq_len, Optimizer& optimizer);

WRReport extract_s(const TransformerWeights& w, const BundleS& bundle, const Dataset& data);
WRReport extract_s(const TransformerWeights& w, const BundleS& bundle, const PermutationSpec& spec,
                   const Dataset& data, std::optional<double> threshold = std::nullopt);

// Mean first-token cosine similarity between two backbones on the data.
double feature_similarity(const TransformerWeights& a, const TransformerWeights& b, const Dataset& data);

}  // namespace tokenmark
