// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <utility>

#include "test_support.hpp"
#include "tokenmark/errors.hpp"
#include "tokenmark/model.hpp"

using namespace tokenmark;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.d = 4;
  c.n_heads = 2;
  c.d_mlp = 8;
  c.vocab_size = 4;
  c.max_seq_len = 3;
  return c;
}

void zero_all(TransformerWeights& w) {
  for (auto& e : w.entries()) std::fill(e.tensor->data().begin(), e.tensor->data().end(), 0.0f);
}

}  // namespace

TEST_CASE("config invariants") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig{};
  c.d_mlp = 8;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("weights have one field per symbol and config-consistent shapes") {
  Rng rng(1);
  ModelConfig c;
  auto w = TransformerWeights::init(c, rng);
  CHECK_NOTHROW(w.validate());
  // token + position, 16 per block, final gamma/beta
  CHECK(w.entries().size() == 2 + 16 * c.n_layers + 2);
  c.attn_bias = false;
  auto nb = TransformerWeights::init(c, rng);
  CHECK(nb.entries().size() == 2 + 12 * c.n_layers + 2);
  w.blocks[0].w_1 = Tensor({3, 3});
  CHECK_THROWS_AS(w.validate(), DimensionError);
}

TEST_CASE("embed examples") {
  Rng rng(2);
  auto w = TransformerWeights::init(small_config(), rng);
  const TokenBatch batch{{0, 1, 2}, 3};

  zero_all(w);
  const Tensor zeros = embed_tokens(w, batch);
  for (float v : zeros.data()) CHECK(v == 0.0f);

  for (std::size_t i = 0; i < 4; ++i) w.token_embedding.at(i, i) = 1.0f;
  const Tensor z = embed_tokens(w, batch);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) CHECK(z.at(r, c) == (r == c ? 1.0f : 0.0f));

  auto fresh = TransformerWeights::init(small_config(), rng);
  const Tensor same = embed_tokens(fresh, TokenBatch{{2, 2}, 2});
  bool differs = false;
  for (std::size_t c = 0; c < 4; ++c) differs = differs || same.at(0, c) != same.at(1, c);
  CHECK(differs);

  CHECK_THROWS_AS(embed_tokens(fresh, TokenBatch{{0, 4}, 2}), InputError);
  CHECK_THROWS_AS(embed_tokens(fresh, TokenBatch{{0, 1, 2, 3}, 4}), InputError);
}

TEST_CASE("a zero-weight block passes Z through the residual to the final norm") {
  Rng rng(3);
  auto w = TransformerWeights::init(small_config(), rng);
  Tensor z = testing::random_tensor({6, 4}, rng);
  for (auto& e : w.entries()) {
    const bool is_gamma = e.name.ends_with("gamma");
    std::fill(e.tensor->data().begin(), e.tensor->data().end(), is_gamma ? 1.0f : 0.0f);
  }
  const Tensor out = backbone_features(w, z, 3);
  Tape tape;
  const Tensor expect =
      layernorm(tape.constant(z), tape.constant(Tensor({4}, 1.0f)), tape.constant(Tensor({4}))).value();
  CHECK(max_abs_diff(out, expect) < 1e-6f);
}

TEST_CASE("non-finite activations raise a numeric fault naming the block") {
  Rng rng(4);
  auto w = TransformerWeights::init(small_config(), rng);
  w.blocks[0].b_2[1] = std::numeric_limits<float>::infinity();
  Tensor z = testing::random_tensor({3, 4}, rng);
  try {
    backbone_features(w, z, 3);
    FAIL("expected NumericFault");
  } catch (const NumericFault& e) {
    CHECK(std::string(e.what()).find("block 0") != std::string::npos);
  }
}

TEST_CASE("head examples") {
  Rng rng(5);
  Tensor f = testing::random_tensor({6, 4}, rng);
  Tape tape;
  auto x = tape.constant(f);

  auto id = forward_head(tape, x, TaskHead::identity(Reduction::kFirstToken), 3).value();
  CHECK(id.shape() == Shape{2, 4});
  for (std::size_t c = 0; c < 4; ++c) {
    CHECK(id.at(0, c) == f.at(0, c));
    CHECK(id.at(1, c) == f.at(3, c));
  }

  auto sel = TaskHead::linear(HeadKind::kDownstream, Reduction::kFirstToken, 4, 2, rng, 1.0f);
  sel.layers[0].weight = Tensor::matrix({{0, 0, 1, 0}, {1, 0, 0, 0}});
  auto picked = forward_head(tape, x, sel, 3).value();
  CHECK(picked.at(0, 0) == f.at(0, 2));
  CHECK(picked.at(0, 1) == f.at(0, 0));

  auto g = TaskHead::mlp(HeadKind::kWatermarkDecoder, Reduction::kFirstToken, 4, 32, 16, rng);
  CHECK(forward_head(tape, x, g, 3).value().shape() == Shape{2, 16});

  auto mean = forward_head(tape, x, TaskHead::identity(Reduction::kMeanPool), 3).value();
  CHECK(mean.at(1, 2) == doctest::Approx((f.at(3, 2) + f.at(4, 2) + f.at(5, 2)) / 3.0f));

  auto wrong = TaskHead::linear(HeadKind::kDownstream, Reduction::kFirstToken, 5, 2, rng, 1.0f);
  CHECK_THROWS_AS(forward_head(tape, x, wrong, 3), DimensionError);
}

TEST_CASE("losses") {
  Tape tape;
  auto pred = tape.constant(Tensor::matrix({{30, -30}, {-30, 30}}));
  const std::vector<std::size_t> t{0, 1};
  CHECK(loss(LossKind::kCrossEntropy, pred, t).value()[0] == doctest::Approx(0.0f));
  auto u = tape.constant(Tensor::matrix({{1, 2}}));
  CHECK(loss(LossKind::kCosineSimilarity, u, u).value()[0] == doctest::Approx(1.0f));
  CHECK(loss(LossKind::kCosineSimilarity, u, tape.constant(Tensor::matrix({{-1, -2}}))).value()[0] ==
        doctest::Approx(-1.0f));
  CHECK(loss(LossKind::kCosineSimilarity, u, tape.constant(Tensor::matrix({{2, -1}}))).value()[0] ==
        doctest::Approx(0.0f));
  CHECK_THROWS_AS(loss(LossKind::kCosineSimilarity, u, tape.constant(Tensor({1, 2}))), NumericFault);
}

TEST_CASE("backbone gradients match central differences") {
  Rng rng(6);
  auto w = TransformerWeights::init(small_config(), rng);
  for (auto& e : w.entries())
    if (!e.is_embedding)
      for (float& v : e.tensor->data()) v += rng.normal(0.0f, 0.2f);
  const Tensor z = testing::random_tensor({6, 4}, rng);

  auto input = testing::grad_check(
      [&](Tape& tape, const std::vector<Var>& v) {
        return testing::weighted_sum(forward_backbone(tape, v[0], std::as_const(w), 3));
      },
      {z});
  CHECK(input.rel_error < 1e-3);

  const Tensor r = testing::random_tensor({6, 4}, rng);
  auto value = [&]() {
    Tape tape;
    auto out = forward_backbone(tape, tape.constant(z), std::as_const(w), 3);
    return static_cast<double>(sum(mul(out, tape.constant(r))).value()[0]);
  };
  w.set_requires_grad(true);
  {
    Tape tape;
    tape.backward(sum(mul(forward_backbone(tape, tape.constant(z), w, 3), tape.constant(r))));
  }
  double diff2 = 0.0, norm2 = 0.0;
  const float h = 1e-3f;
  for (auto& e : w.entries()) {
    if (e.is_embedding) continue;
    for (std::size_t i = 0; i < e.tensor->size(); ++i) {
      float& p = (*e.tensor)[i];
      const float saved = p;
      p = saved + h;
      const double up = value();
      p = saved - h;
      const double down = value();
      p = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = e.tensor->grad()[i];
      diff2 += (numeric - analytic) * (numeric - analytic);
      norm2 += analytic * analytic;
    }
  }
  CHECK(std::sqrt(diff2 / norm2) < 1e-3);
}
