// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tokenmark {

// Shape or dimension disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Bad user-supplied data (token ids out of range, empty sets, ...).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf or a degenerate value (zero-norm vector) where a finite one is required.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke an API precondition (e.g. optimizer step without gradients).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Loss diverged during an optimization loop.
class TrainingFault : public std::runtime_error {
 public:
  TrainingFault(const std::string& what, long iteration)
      : std::runtime_error(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}
  long iteration() const noexcept { return iteration_; }

 private:
  long iteration_;
};

// Malformed configuration or file; carries a location such as a JSON pointer.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace tokenmark
