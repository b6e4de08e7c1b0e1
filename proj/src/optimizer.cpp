// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/optimizer.hpp"

#include <cmath>

#include "tokenmark/errors.hpp"

namespace tokenmark {

Optimizer::Optimizer(OptimizerConfig config, std::vector<Tensor*> params)
    : config_(config), params_(std::move(params)) {
  if (config_.kind == OptimizerKind::kAdam) {
    for (Tensor* p : params_) {
      m_.emplace_back(p->size(), 0.0f);
      v_.emplace_back(p->size(), 0.0f);
    }
  }
}

void Optimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i]->has_grad()) {
      throw ContractViolation("optimizer step on parameter " + std::to_string(i) + " without a gradient buffer");
    }
  }
  ++step_;
  const float lr = config_.learning_rate;
  if (config_.kind == OptimizerKind::kSgd) {
    for (Tensor* p : params_) {
      auto g = p->grad();
      auto w = p->data();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
    }
  } else {
    const double bc1 = 1.0 - std::pow(static_cast<double>(config_.beta1), static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(config_.beta2), static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto g = params_[i]->grad();
      auto w = params_[i]->data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = config_.beta1 * m[j] + (1.0f - config_.beta1) * g[j];
        v[j] = config_.beta2 * v[j] + (1.0f - config_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + config_.epsilon));
      }
    }
  }
  zero_grad();
}

void Optimizer::zero_grad() {
  for (Tensor* p : params_) p->zero_grad();
}

}  // namespace tokenmark
