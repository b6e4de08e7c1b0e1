// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/dataset.hpp"

#include <numeric>

#include <fmt/format.h>

#include "tokenmark/errors.hpp"

namespace tokenmark {

void DatasetConfig::validate(std::uint32_t vocab_size) const {
  if (n_classes < 2) throw ConfigError("data.n_classes must be >= 2");
  if (seq_len == 0) throw ConfigError("data.seq_len must be >= 1");
  if (tokens_per_class == 0) throw ConfigError("data.tokens_per_class must be >= 1");
  if (static_cast<std::uint64_t>(n_classes) * tokens_per_class > vocab_size) {
    throw ConfigError(fmt::format("data needs {} x {} class tokens but the vocabulary has {}", n_classes,
                                  tokens_per_class, vocab_size));
  }
  if (!(signal >= 0.0f && signal <= 1.0f)) throw ConfigError("data.signal must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = nlohmann::json{{"n_classes", c.n_classes},
                     {"seq_len", c.seq_len},
                     {"tokens_per_class", c.tokens_per_class},
                     {"signal", c.signal},
                     {"task_seed", c.task_seed}};
}

void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c = DatasetConfig{};
  if (j.contains("n_classes")) j.at("n_classes").get_to(c.n_classes);
  if (j.contains("seq_len")) j.at("seq_len").get_to(c.seq_len);
  if (j.contains("tokens_per_class")) j.at("tokens_per_class").get_to(c.tokens_per_class);
  if (j.contains("signal")) j.at("signal").get_to(c.signal);
  if (j.contains("task_seed")) j.at("task_seed").get_to(c.task_seed);
}

TokenBatch Dataset::batch(std::size_t begin, std::size_t end) const {
  if (begin > end || end > size()) throw InputError(fmt::format("batch [{}, {}) outside dataset of {}", begin, end, size()));
  return TokenBatch{{tokens.begin() + begin * seq_len, tokens.begin() + end * seq_len}, seq_len};
}

std::span<const std::size_t> Dataset::labels_of(std::size_t begin, std::size_t end) const {
  return std::span<const std::size_t>(labels).subspan(begin, end - begin);
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.seq_len = seq_len;
  for (std::size_t r : rows) {
    if (r >= size()) throw InputError(fmt::format("row {} outside dataset of {}", r, size()));
    out.tokens.insert(out.tokens.end(), tokens.begin() + r * seq_len, tokens.begin() + (r + 1) * seq_len);
    out.labels.push_back(labels[r]);
  }
  return out;
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> rows(end - begin);
  std::iota(rows.begin(), rows.end(), begin);
  return subset(rows);
}

std::vector<std::vector<std::size_t>> class_tokens(const DatasetConfig& config, std::uint32_t vocab_size) {
  config.validate(vocab_size);
  std::vector<std::size_t> vocab(vocab_size);
  std::iota(vocab.begin(), vocab.end(), std::size_t{0});
  Rng rng = Rng(config.task_seed).split("class-tokens");
  rng.shuffle(vocab);
  std::vector<std::vector<std::size_t>> out(config.n_classes);
  for (std::size_t c = 0; c < config.n_classes; ++c)
    out[c].assign(vocab.begin() + c * config.tokens_per_class, vocab.begin() + (c + 1) * config.tokens_per_class);
  return out;
}

Dataset make_dataset(const DatasetConfig& config, std::uint32_t vocab_size, std::size_t n, std::uint64_t sample_seed) {
  const auto subsets = class_tokens(config, vocab_size);
  Rng rng(sample_seed);
  Dataset out;
  out.seq_len = config.seq_len;
  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.labels[i] = i % config.n_classes;
  rng.shuffle(out.labels);
  out.tokens.reserve(n * config.seq_len);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& own = subsets[out.labels[i]];
    for (std::size_t p = 0; p < config.seq_len; ++p) {
      if (rng.bernoulli(config.signal)) {
        out.tokens.push_back(own[rng.below(own.size())]);
      } else {
        out.tokens.push_back(rng.below(vocab_size));
      }
    }
  }
  return out;
}

}  // namespace tokenmark
