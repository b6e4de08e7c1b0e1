// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "tokenmark/rng.hpp"
#include "tokenmark/tensor.hpp"

namespace tokenmark {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Linear record of operations for reverse-mode differentiation. Operations
// whose inputs do not need gradients record no backward rule, so a tape built
// over frozen tensors doubles as an inference context.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const float> out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Binds an externally owned tensor. If it requires grad, backward() adds
  // into its gradient buffer. The tensor must outlive the tape.
  Var parameter(Tensor& t);
  Var parameter(const Tensor& t);

  const Tensor& value(Var v) const;
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and replays backward rules in reverse recording
  // order. Intermediate gradients are reset first, so each call is one pass.
  void backward(Var loss);

  // For operation authors.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  std::span<float> grad_of(Var v);

 private:
  struct Node {
    Tensor owned;
    const Tensor* ref = nullptr;
    Tensor* param = nullptr;
    bool needs_grad = false;
    std::vector<float> grad;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

// ---- differentiable operations -------------------------------------------

Var matmul(Var a, Var b);     // [m,k] x [k,n]
Var matmul_nt(Var a, Var b);  // [m,k] x [n,k]^T, the linear-layer form x W^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_bias(Var x, Var bias);  // [m,n] + [n] broadcast over rows
Var scale(Var a, float s);
Var square(Var a);
Var relu(Var a);
Var gelu(Var a);  // tanh approximation
Var softmax_rows(Var x);
Var layernorm(Var x, Var gamma, Var beta, float eps = 1e-5f);

// Multi-head scaled dot-product attention over a batch of equal-length
// sequences stacked along rows. Heads are contiguous feature blocks of width
// d / n_heads.
Var attention(Var q, Var k, Var v, std::size_t n_heads, std::size_t seq_len);

// out[:, j] = x[:, perm[j]]
Var permute_cols(Var x, std::span<const std::size_t> perm);
// out[i, :] = table[ids[i], :]
Var gather_rows(Var table, std::span<const std::size_t> ids);
// Mean of each consecutive group of `group` rows.
Var mean_pool(Var x, std::size_t group);
Var dropout(Var x, float rate, Rng& rng);

Var sum(Var a);
Var mean(Var a);
// Mean over rows of -log softmax(logits)[target].
Var cross_entropy(Var logits, std::span<const std::size_t> targets);
// Per-row cosine similarity, [m,n] x [m,n] -> [m]. A zero-norm row is a NumericFault.
Var row_cosine(Var a, Var b);

}  // namespace tokenmark
