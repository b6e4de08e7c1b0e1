// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "tokenmark/dataset.hpp"
#include "tokenmark/model.hpp"
#include "tokenmark/optimizer.hpp"

namespace tokenmark {

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  float learning_rate = 3e-3f;
  bool train_embedding = true;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Called after each epoch with the 1-based epoch number.
using EpochHook = std::function<void(std::size_t epoch)>;

// Optional extra loss term evaluated on each mini-batch; its value is added to
// the classification loss. Returning nullopt skips it for that batch.
using BatchLoss = std::function<std::optional<Var>(Tape& tape, TransformerWeights& w, const Dataset& batch)>;

// End-to-end CE training of embedding (optionally), backbone and head with Adam.
// Throws TrainingFault when the loss stops being finite.
std::vector<double> train_classifier(TransformerWeights& w, TaskHead& head, const Dataset& data,
                                     const TrainConfig& config, const EpochHook& hook = {},
                                     const BatchLoss& extra = {});

EvalResult evaluate_classifier(const TransformerWeights& w, const TaskHead& head, const Dataset& data);

// Fresh downstream head for `n_classes`, mean-pooled.
TaskHead make_downstream_head(std::size_t d, std::size_t n_classes, Rng& rng);

// Linear probe on frozen features; only the head is trained.
TaskHead train_probe(const TransformerWeights& w, const Dataset& data, std::size_t n_classes,
                     const TrainConfig& config);

struct FidelityReport {
  double loss_original = 0.0;
  double loss_watermarked = 0.0;
  double loss_gap = 0.0;  // |L(θ*) - L(θ)|
  double accuracy_original = 0.0;
  double accuracy_watermarked = 0.0;
  double accuracy_gap = 0.0;  // accuracy(θ*) - accuracy(θ), in fraction units
};

// Trains one probe per backbone under the same protocol and seed, then
// compares them on the evaluation set.
FidelityReport fidelity_gap(const TransformerWeights& original, const TransformerWeights& watermarked,
                            const Dataset& train, const Dataset& eval, std::size_t n_classes,
                            const TrainConfig& config);

void to_json(nlohmann::json& j, const FidelityReport& r);

// Marks exactly the given tensors as trainable for the duration of a scope.
class TrainableScope {
 public:
  explicit TrainableScope(std::vector<Tensor*> params);
  ~TrainableScope();
  TrainableScope(const TrainableScope&) = delete;
  TrainableScope& operator=(const TrainableScope&) = delete;
  const std::vector<Tensor*>& params() const { return params_; }

 private:
  std::vector<Tensor*> params_;
};

// Visits mini-batches of a freshly shuffled row order.
void for_each_batch(std::size_t n, std::size_t batch_size, Rng& rng,
                    const std::function<void(const std::vector<std::size_t>& rows)>& fn);

void require_finite(double value, const char* what, long iteration);

}  // namespace tokenmark
