// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/equivariance.hpp"

#include <algorithm>
#include <array>
#include <numeric>

#include "tokenmark/errors.hpp"
#include "tokenmark/optimizer.hpp"

namespace tokenmark {

namespace {

Tensor random_like(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (float& v : t.data()) v = rng.normal();
  return t;
}

// sum(R ⊙ F(ZP, θ)P^-1); identity index gives the plain forward.
Var depermuted_loss(Tape& tape, TransformerWeights& w, const Tensor& z, std::size_t seq_len,
                    std::span<const std::size_t> index, const Tensor& r) {
  Var x = permute_cols(tape.constant(z), index);
  Var out = forward_backbone(tape, x, w, seq_len);
  out = permute_cols(out, invert_index(index));
  return sum(mul(out, tape.constant(r)));
}

Tensor grad_tensor(const Tensor& t) { return Tensor(t.shape(), std::vector<float>(t.grad().begin(), t.grad().end())); }

std::string group_of(const std::string& name) {
  for (const char* g : {"w_q", "w_k", "w_v", "w_a", "w_1", "w_2"})
    if (name.ends_with(g)) return g;
  if (name.ends_with("gamma")) return "gamma";
  return "b";
}

}  // namespace

float forward_deviation(const TransformerWeights& w, const Tensor& z, std::size_t seq_len,
                        std::span<const std::size_t> index) {
  Tape lhs_tape;
  Var lhs = forward_backbone(lhs_tape, permute_cols(lhs_tape.constant(z), index), w, seq_len);
  lhs = permute_cols(lhs, invert_index(index));
  const TransformerWeights moved = transport_weights(w, index);
  Tape rhs_tape;
  Var rhs = forward_backbone(rhs_tape, rhs_tape.constant(z), moved, seq_len);
  return max_abs_diff(lhs.value(), rhs.value());
}

std::map<std::string, float> backward_deviation(const TransformerWeights& w, const Tensor& z, std::size_t seq_len,
                                                std::span<const std::size_t> index, Rng& rng) {
  const Tensor r = random_like(z.shape(), rng);
  std::vector<std::size_t> id(index.size());
  std::iota(id.begin(), id.end(), std::size_t{0});

  TransformerWeights a = w;
  a.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(depermuted_loss(tape, a, z, seq_len, index, r));
  }
  TransformerWeights b = transport_weights(w, index);
  b.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(depermuted_loss(tape, b, z, seq_len, id, r));
  }
  std::map<std::string, float> out;
  auto ea = a.entries();
  auto eb = b.entries();
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (ea[i].is_embedding) continue;
    const Tensor moved = transport_tensor(grad_tensor(*ea[i].tensor), ea[i].rule, index);
    const float dev = max_abs_diff(moved, grad_tensor(*eb[i].tensor));
    float& slot = out[group_of(ea[i].name)];
    slot = std::max(slot, dev);
  }
  return out;
}

float train_step_deviation(const TransformerWeights& w, const Tensor& z, std::size_t seq_len,
                           std::span<const std::size_t> index, Rng& rng, float learning_rate) {
  const Tensor r = random_like(z.shape(), rng);
  std::vector<std::size_t> id(index.size());
  std::iota(id.begin(), id.end(), std::size_t{0});
  const OptimizerConfig sgd{OptimizerKind::kSgd, learning_rate};

  TransformerWeights a = w;
  a.set_requires_grad(true);
  {
    Optimizer opt(sgd, a.backbone_params());
    Tape tape;
    tape.backward(depermuted_loss(tape, a, z, seq_len, index, r));
    opt.step();
  }
  TransformerWeights b = transport_weights(w, index);
  b.set_requires_grad(true);
  {
    Optimizer opt(sgd, b.backbone_params());
    Tape tape;
    tape.backward(depermuted_loss(tape, b, z, seq_len, id, r));
    opt.step();
  }
  const TransformerWeights a_moved = transport_weights(a, index);
  auto ea = a_moved.entries();
  auto eb = b.entries();
  float worst = 0.0f;
  for (std::size_t i = 0; i < ea.size(); ++i) worst = std::max(worst, max_abs_diff(*ea[i].tensor, *eb[i].tensor));
  return worst;
}

std::vector<std::size_t> cross_head_swap(std::size_t d, std::size_t n_heads) {
  if (n_heads < 2) throw InputError("a cross-head permutation needs at least two heads");
  std::vector<std::size_t> idx(d);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::swap(idx[0], idx[d / n_heads]);
  return idx;
}

void jitter_backbone(TransformerWeights& w, Rng& rng, float stddev) {
  for (auto& e : w.entries()) {
    if (e.is_embedding) continue;
    for (float& v : e.tensor->data()) v += rng.normal(0.0f, stddev);
  }
}

EquivarianceSuite run_equivariance_suite(const ModelConfig& base, const SuiteOptions& options) {
  EquivarianceSuite suite;
  suite.trials = options.trials;
  const Rng root(options.seed);
  constexpr std::array<std::uint32_t, 3> kHeads{1, 2, 4};
  for (std::size_t t = 0; t < options.trials; ++t) {
    Rng rng = root.split(t);
    ModelConfig c = base;
    if (options.sweep_configs) {
      c.n_layers = static_cast<std::uint32_t>(1 + t % 3);
      c.d = (t / 3) % 2 == 0 ? 8 : 16;
      c.n_heads = kHeads[(t / 6) % 3];
      c.d_mlp = 2 * c.d;
    }
    c.max_seq_len = std::max<std::uint32_t>(c.max_seq_len, static_cast<std::uint32_t>(options.seq_len));
    TransformerWeights w = TransformerWeights::init(c, rng);
    jitter_backbone(w, rng, 0.2f);
    Tensor z = random_like({options.batch * options.seq_len, c.d}, rng);
    const PermutationSpec spec = sample_secret(rng, c.d, c.n_heads, PermutationFamily::kHeadsAndWithin);
    std::vector<std::size_t> index = spec.index();
    if (options.inject_cross_head && c.n_heads >= 2) index = cross_head_swap(c.d, c.n_heads);

    suite.max_forward = std::max(suite.max_forward, forward_deviation(w, z, options.seq_len, index));
    for (const auto& [group, dev] : backward_deviation(w, z, options.seq_len, index, rng)) {
      float& slot = suite.backward_by_group[group];
      slot = std::max(slot, dev);
      suite.max_backward = std::max(suite.max_backward, dev);
    }
    suite.max_train_step = std::max(suite.max_train_step, train_step_deviation(w, z, options.seq_len, index, rng));
    if (c.n_heads >= 2) {
      suite.negative_control =
          std::max(suite.negative_control, forward_deviation(w, z, options.seq_len, cross_head_swap(c.d, c.n_heads)));
    }
  }
  return suite;
}

}  // namespace tokenmark
