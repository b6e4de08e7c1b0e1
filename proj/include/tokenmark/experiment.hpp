// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokenmark/attacks.hpp"
#include "tokenmark/io.hpp"

namespace tokenmark {

#ifndef TOKENMARK_VERSION
#define TOKENMARK_VERSION "0.0.0"
#endif

inline constexpr const char* kCodeVersion = TOKENMARK_VERSION;

// Fixed per-stage seeds so that every stage draws from its own stream.
struct SeedConfig {
  std::uint64_t init = 7;          // backbone initialization
  std::uint64_t head = 3;          // downstream head initialization
  std::uint64_t train_data = 11;   // pretraining samples
  std::uint64_t eval_data = 12;    // evaluation samples
  std::uint64_t extraction = 99;   // extraction set
  std::uint64_t watermark = 5;     // secret material of every scheme
  std::uint64_t attacker = 55;     // attacker's own data
  std::uint64_t wrong_keys = 8;    // wrong keys scored in integrity checks

  bool operator==(const SeedConfig&) const = default;
};

struct ExperimentConfig {
  ModelConfig model;
  DatasetConfig dataset;
  std::size_t train_samples = 8000;
  std::size_t eval_samples = 500;
  TrainConfig train;
  Scheme scheme = Scheme::kB;
  PermutationFamily family = PermutationFamily::kHeadsAndWithin;
  std::size_t target = 3;
  float epsilon_wm = 0.5f;
  EmbedConfigB embed_b = calibrated_b();
  EmbedConfigS embed_s;
  TriggerConfig trigger = calibrated_trigger();
  std::size_t extraction_samples = 200;
  std::size_t attacker_samples = 2000;
  std::size_t probe_samples = 8000;  // victim-task rows used to fit linear probes
  TrainConfig probe = probe_defaults();
  AttackConfig attack;
  std::vector<double> strengths;  // sweep values for `attack.kind`; empty means a single run
  SeedConfig seeds;
  std::string out = "out";

  static EmbedConfigB calibrated_b();
  static TriggerConfig calibrated_trigger();
  static TrainConfig probe_defaults();

  // Cross-field checks; throws ConfigError with a JSON pointer prefix.
  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

// Checks `doc` against the key set and value types of the default config,
// then overlays it on the defaults. Errors name the JSON pointer at fault.
ExperimentConfig parse_experiment(const nlohmann::json& doc);
ExperimentConfig load_experiment(const std::filesystem::path& path);

// SHA-256 of the canonical (sorted, compact) dump of the full config.
std::string config_hash(const ExperimentConfig& c);

// Datasets regenerated from the config.
Dataset train_set(const ExperimentConfig& c);
Dataset eval_set(const ExperimentConfig& c);
Dataset extraction_set(const ExperimentConfig& c, std::size_t n);
Dataset attacker_set(const ExperimentConfig& c);

struct TrainOutcome {
  TransformerWeights model;
  TaskHead head;
  std::vector<double> epoch_losses;
  EvalResult eval;
};

// Pretrains the toy backbone and a mean-pooled head on the main task.
TrainOutcome run_train(const ExperimentConfig& c);

struct EmbedOutcome {
  TransformerWeights model;
  AnyBundle bundle;
  TaskHead head;  // deployed downstream head; changed only by the trigger baseline
  std::vector<double> losses;  // L_wm for B, L_B for S, empty for the trigger baseline
};

EmbedOutcome run_embed(const ExperimentConfig& c, Scheme scheme, const TransformerWeights& base,
                       const TaskHead& head);

AttackData attack_data(const ExperimentConfig& c);

// Per-stage timing and artifact checksums of one command.
struct RunManifest {
  std::string command;
  std::string config_hash;
  std::string code_version = kCodeVersion;
  std::vector<std::pair<std::string, double>> stage_seconds;
  std::vector<std::pair<std::string, std::string>> artifacts;  // file name, SHA-256

  void add_artifact(const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const RunManifest& m);

}  // namespace tokenmark
