// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "tokenmark/tensor.hpp"

namespace tokenmark {

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

// Updates a fixed parameter set in place and zeroes its gradients afterward.
// Adam moment buffers are created on the first step and sized to match.
class Optimizer {
 public:
  Optimizer(OptimizerConfig config, std::vector<Tensor*> params);

  void step();
  void zero_grad();

  const OptimizerConfig& config() const noexcept { return config_; }
  std::int64_t steps_taken() const noexcept { return step_; }
  std::size_t param_count() const noexcept { return params_.size(); }

 private:
  OptimizerConfig config_;
  std::vector<Tensor*> params_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace tokenmark
