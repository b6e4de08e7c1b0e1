// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenmark/io.hpp"
#include "tokenmark/train.hpp"
#include "tokenmark/watermark.hpp"

namespace tokenmark {

enum class AttackKind {
  kFinetune,
  kPrune,
  kQuantize,
  kExtract,
  kOverwrite,
  kRandomSearch,
  kGradientSearch,
  kAdaptiveRemoval
};

std::string attack_name(AttackKind k);
AttackKind parse_attack(const std::string& name);

enum class PruneGranularity { kWeightMagnitude, kNeuron };

struct AttackConfig {
  AttackKind kind = AttackKind::kFinetune;
  std::uint64_t seed = 0;
  // finetune / extract / adaptive_removal
  std::size_t epochs = 5;
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  float learning_rate = 1e-3f;
  std::uint64_t task_seed = 101;  // disjoint fine-tuning task
  std::size_t task_samples = 4000;
  // prune
  float ratio = 0.1f;
  PruneGranularity granularity = PruneGranularity::kWeightMagnitude;
  // quantize
  std::uint32_t bits = 8;
  // random_search
  std::size_t budget = 10000;
  std::size_t small_set = 8;
  double hit_threshold = 0.5;
  // gradient_search
  float alpha = 0.1f;
  float temperature = 1.0f;
  float search_lr = 0.1f;
  std::size_t search_samples = 512;
  // Independent searches; the one with the best WR on the attacker's own data wins.
  std::size_t restarts = 1;
  // overwrite
  std::uint64_t overwrite_seed = 77;

  // Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const AttackConfig&) const = default;
};

void to_json(nlohmann::json& j, const AttackConfig& c);
void from_json(const nlohmann::json& j, AttackConfig& c);

// ---- weight-space attacks ---------------------------------------------------

// r ∈ [0, 1). weight_magnitude: the smallest-|w| fraction r of every backbone matrix is
// zeroed. neuron: the fraction r of output units with the smallest row norm
// in every backbone linear layer is zeroed together with its bias.
TransformerWeights prune(const TransformerWeights& w, float ratio, PruneGranularity granularity);
void prune_tensor(Tensor& t, float ratio);

// Per-tensor symmetric uniform quantization of every matrix, dequantized to
// fp32, for k ∈ [1, 8]. k = 1 maps each weight to sign(w)·mean|w|.
TransformerWeights quantize(const TransformerWeights& w, std::uint32_t bits);
void quantize_tensor(Tensor& t, std::uint32_t bits);

// ---- black-box access -------------------------------------------------------

// Query-only view of a deployed backbone: tokens in, output features out.
class FeatureOracle {
 public:
  explicit FeatureOracle(TransformerWeights model) : model_(std::move(model)) {}
  Tensor query(const TokenBatch& batch) const;
  std::size_t d() const { return model_.config.d; }
  std::size_t queries() const { return queries_; }

 private:
  TransformerWeights model_;
  mutable std::size_t queries_ = 0;
};

struct ExtractResult {
  TransformerWeights substitute;
  std::vector<double> losses;
  double similarity = 0.0;  // mean per-token cosine to the oracle on held-out queries
};

// Fresh substitute of the given architecture trained on -sim against the
// oracle's features for the attacker's queries.
ExtractResult extract_substitute(const FeatureOracle& oracle, const ModelConfig& config, const Dataset& queries,
                                 const Dataset& held_out, const AttackConfig& cfg);

// ---- adaptive attacks -------------------------------------------------------

struct RandomSearchResult {
  std::size_t tried = 0;
  std::size_t passed_small = 0;
  std::size_t hits = 0;
  double best_wr = 0.0;
  std::vector<PermutationSpec> found;
};

using KeyScore = std::function<double(const PermutationSpec& spec, const Dataset& data)>;

// Two-stage filter: a candidate whose WR on the small set exceeds the
// threshold is re-checked on the full set. `planted` candidates are tried first.
RandomSearchResult random_search(const KeyScore& score, std::size_t d, std::size_t n_heads, PermutationFamily family,
                                 const Dataset& small_set, const Dataset& full_set, const AttackConfig& cfg,
                                 const std::vector<PermutationSpec>& planted = {});

// Relaxed permutation over a head-constrained family: per-block logits
// [m, m] (row = destination column, column = source column) plus head-order
// logits [h, h].
struct SoftPermutation {
  std::size_t d = 0;
  std::size_t n_heads = 0;
  std::vector<Tensor> within;  // n_heads x [m, m]
  Tensor heads;                // [h, h]

  static SoftPermutation random(std::size_t d, std::size_t n_heads, Rng& rng);
  // Logits strongly peaked at `spec`.
  static SoftPermutation planted(const PermutationSpec& spec, float peak = 10.0f);
  std::vector<Tensor*> params();
};

// Soft matrix A with out = Z·A; A[src, dest] = σ(H)[b, b'] · σ(L_b)[w, w'] for
// dest = (b, w) and src = (b', w'). Gumbel noise is added when `rng` is set.
Var soft_matrix(Tape& tape, SoftPermutation& p, float temperature, Rng* rng);
// ‖I − AᵀA‖² summed over entries.
Var orthogonality_penalty(Var a);
// Row-argmax projection with duplicate repair; `repaired` counts replaced rows.
PermutationSpec project(const SoftPermutation& p, Rng& rng, std::size_t* repaired = nullptr);

struct GradientSearchResult {
  PermutationSpec candidate;
  std::vector<double> losses;
  std::size_t repaired = 0;
  bool degenerate = false;
  double penalty = 0.0;  // ‖I − AᵀA‖² of the final noise-free soft matrix
};

// Minimizes L_a = −cos(G(F(Z·A, θ*)·Aᵀ), sk) + α‖I − AᵀA‖² over the logits.
GradientSearchResult gradient_search(const TransformerWeights& w, const BundleS& bundle, const Dataset& data,
                                     const AttackConfig& cfg, std::optional<SoftPermutation> init = std::nullopt);

// θ̂ from θ* trained on L_rm = −sim(F(Z, θ̂), F(Z, θ*)) + sim²(sk, G(F(Z·P', θ̂)·P'^-1)).
TransformerWeights adaptive_removal(const TransformerWeights& w, const BundleS& bundle, const PermutationSpec& candidate,
                                    const Dataset& data, const AttackConfig& cfg, std::vector<double>* losses = nullptr);

// Second embedding with a different key on an already watermarked model.
// Throws ContractViolation when the replacement reuses the original key.
TransformerWeights overwrite(const TransformerWeights& w, const AnyBundle& original, AnyBundle& replacement,
                             const Dataset& data);

// ---- harness ----------------------------------------------------------------

// One watermarked model under attack, with the owner's secret bundle and the
// downstream head it was deployed with.
struct Subject {
  std::string label;
  TransformerWeights model;
  AnyBundle bundle;
  TaskHead head;
};

struct AttackData {
  DatasetConfig task;        // victim downstream task
  Dataset extraction;        // owner's extraction set
  Dataset task_train;        // victim task, for probes
  Dataset task_eval;
  Dataset attacker;          // attacker's own queries / data
  std::size_t n_classes = 10;
};

// WR of the bundle's scheme on a model.
WRReport verify(const TransformerWeights& w, const AnyBundle& bundle, const Dataset& data);
WRReport verify(const TransformerWeights& w, const AnyBundle& bundle, const PermutationSpec& spec, const Dataset& data);

struct SubjectResult {
  std::string label;
  Scheme scheme = Scheme::kB;
  double wr_before = 0.0;
  double wr_after = 0.0;
  double accuracy_before = 0.0;
  double accuracy_after = 0.0;
  std::vector<double> wr_per_epoch;        // finetune only
  std::vector<double> accuracy_per_epoch;  // finetune only, on the fine-tuning task
  nlohmann::json details = nlohmann::json::object();
};

struct AttackReport {
  AttackConfig config;
  std::vector<SubjectResult> subjects;
  std::size_t cost_steps = 0;
  nlohmann::json details = nlohmann::json::object();
};

void to_json(nlohmann::json& j, const SubjectResult& r);
void to_json(nlohmann::json& j, const AttackReport& r);

// Applies the attack to every subject. Search and removal attacks need a
// secret-vector subject and act on the first one found.
AttackReport run_attack(const AttackConfig& cfg, const std::vector<Subject>& subjects, const AttackData& data);

struct SweepRow {
  double strength = 0.0;
  std::optional<double> wr_b, wr_s, wr_trigger;
  double downstream_acc = 0.0;
};

// One attack per strength value (ratio for prune, bits for quantize, epochs
// for finetune, where finetune rows come from the per-epoch record).
std::vector<SweepRow> run_sweep(const AttackConfig& base, const std::vector<double>& strengths,
                                const std::vector<Subject>& subjects, const AttackData& data,
                                std::vector<AttackReport>* reports = nullptr);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace tokenmark
