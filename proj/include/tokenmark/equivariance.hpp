// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tokenmark/model.hpp"
#include "tokenmark/permutation.hpp"
#include "tokenmark/rng.hpp"

namespace tokenmark {

// Largest |F(ZP, θ)P^-1 - F(Z, P(θ))| over all output elements. `index` may be
// any bijection of the d columns.
float forward_deviation(const TransformerWeights& w, const Tensor& z, std::size_t seq_len,
                        std::span<const std::size_t> index);

// Per-group worst elementwise gap between the gradient of the transported
// model and the transported gradient of the original model. Both sides use the
// loss sum(R ⊙ output) with a fixed random R; groups are "w_q", "w_k", "w_v",
// "w_a", "w_1", "w_2", "b", "gamma".
std::map<std::string, float> backward_deviation(const TransformerWeights& w, const Tensor& z, std::size_t seq_len,
                                                std::span<const std::size_t> index, Rng& rng);

// One SGD step on permuted inputs with de-permuted outputs, transported by P,
// against one step on plain inputs starting from P(θ). Returns the worst gap.
float train_step_deviation(const TransformerWeights& w, const Tensor& z, std::size_t seq_len,
                           std::span<const std::size_t> index, Rng& rng, float learning_rate = 0.1f);

struct EquivarianceSuite {
  std::size_t trials = 0;
  float max_forward = 0.0f;
  float max_backward = 0.0f;
  float max_train_step = 0.0f;
  std::map<std::string, float> backward_by_group;
  // Cross-head permutation run as a negative control; must be large.
  float negative_control = 0.0f;
};

struct SuiteOptions {
  std::size_t trials = 100;
  std::uint64_t seed = 0;
  // Trial t cycles through layer counts 1..3, d in {8, 16} and head counts
  // {1, 2, 4} instead of using the base config.
  bool sweep_configs = false;
  // Replace the sampled spec by a cross-head column swap in every check.
  bool inject_cross_head = false;
  std::size_t seq_len = 5;
  std::size_t batch = 2;
};

// Runs the forward, backward and one-step checks over random (θ, Z, P) instances.
EquivarianceSuite run_equivariance_suite(const ModelConfig& base, const SuiteOptions& options);

// Column order swapping column 0 with the first column of head 1.
std::vector<std::size_t> cross_head_swap(std::size_t d, std::size_t n_heads);

// Random perturbation of every backbone tensor so that biases and norms are
// not at their trivial initial values.
void jitter_backbone(TransformerWeights& w, Rng& rng, float stddev);

}  // namespace tokenmark
