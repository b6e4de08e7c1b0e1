// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "tokenmark/model.hpp"
#include "tokenmark/rng.hpp"

namespace tokenmark {

// Class c owns a disjoint subset of tokens_per_class vocabulary ids (chosen by
// task_seed). Each position draws from the subset with probability `signal`
// and uniformly from the whole vocabulary otherwise.
struct DatasetConfig {
  std::uint32_t n_classes = 10;
  std::uint32_t seq_len = 8;
  std::uint32_t tokens_per_class = 6;
  float signal = 0.5f;
  std::uint64_t task_seed = 1;

  void validate(std::uint32_t vocab_size) const;
  bool operator==(const DatasetConfig&) const = default;
};

void to_json(nlohmann::json& j, const DatasetConfig& c);
void from_json(const nlohmann::json& j, DatasetConfig& c);

struct Dataset {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> labels;
  std::size_t seq_len = 0;

  std::size_t size() const { return labels.size(); }
  TokenBatch batch(std::size_t begin, std::size_t end) const;
  TokenBatch all() const { return batch(0, size()); }
  std::span<const std::size_t> labels_of(std::size_t begin, std::size_t end) const;
  Dataset subset(std::span<const std::size_t> rows) const;
  Dataset slice(std::size_t begin, std::size_t end) const;
};

// Labels are balanced: class counts differ by at most one. The same
// (config, sample_seed) always yields the same dataset.
Dataset make_dataset(const DatasetConfig& config, std::uint32_t vocab_size, std::size_t n, std::uint64_t sample_seed);

// The per-class token subsets implied by config.task_seed.
std::vector<std::vector<std::size_t>> class_tokens(const DatasetConfig& config, std::uint32_t vocab_size);

}  // namespace tokenmark
