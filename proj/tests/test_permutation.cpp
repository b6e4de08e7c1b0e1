// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>

#include "test_support.hpp"
#include "tokenmark/equivariance.hpp"
#include "tokenmark/errors.hpp"
#include "tokenmark/permutation.hpp"

using namespace tokenmark;

namespace {

const PermutationFamily kFamilies[] = {PermutationFamily::kWithinHeadsOnly, PermutationFamily::kHeadsAndWithin,
                                       PermutationFamily::kPaperCounted};

ModelConfig config(std::uint32_t layers, std::uint32_t d, std::uint32_t heads) {
  ModelConfig c;
  c.n_layers = layers;
  c.d = d;
  c.n_heads = heads;
  c.d_mlp = 2 * d;
  return c;
}

}  // namespace

TEST_CASE("materialized matrix is orthogonal with integer entries") {
  Rng rng(1);
  for (auto fam : kFamilies) {
    const auto s = sample(rng, 12, 3, fam);
    const Tensor p = s.materialize();
    const Tensor ppt = matmul(p, transpose(p));
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j) CHECK(ppt.at(i, j) == (i == j ? 1.0f : 0.0f));
  }
}

TEST_CASE("sample examples") {
  Rng rng(2);
  std::set<std::vector<std::size_t>> seen;
  for (int i = 0; i < 200; ++i) seen.insert(sample(rng, 2, 1, PermutationFamily::kHeadsAndWithin).index());
  CHECK(seen.size() == 2);

  for (int i = 0; i < 50; ++i) {
    const auto s = sample(rng, 4, 2, PermutationFamily::kWithinHeadsOnly);
    CHECK(s.head_order == std::vector<std::size_t>{0, 1});
  }
  for (int i = 0; i < 50; ++i) {
    const auto s = sample(rng, 8, 2, PermutationFamily::kPaperCounted);
    CHECK(s.within_head[0] == s.within_head[1]);
  }
}

TEST_CASE("sampling is uniform over the family") {
  Rng rng(3);
  std::map<std::vector<std::size_t>, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) ++counts[sample(rng, 4, 2, PermutationFamily::kWithinHeadsOnly).index()];
  const auto members = enumerate_family(4, 2, PermutationFamily::kWithinHeadsOnly);
  REQUIRE(counts.size() == members.size());
  double chi2 = 0.0;
  for (const auto& m : members) {
    const double f = counts[m] / static_cast<double>(n);
    CHECK(std::abs(f - 0.25) <= 0.02);
    chi2 += (counts[m] - n / 4.0) * (counts[m] - n / 4.0) / (n / 4.0);
  }
  // 3 degrees of freedom, 0.999 quantile
  CHECK(chi2 < 16.27);
}

TEST_CASE("secret and wrong-key sampling exclude what they must") {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) CHECK_FALSE(sample_secret(rng, 2, 1, PermutationFamily::kHeadsAndWithin).is_identity());
  const auto key = sample_secret(rng, 4, 2, PermutationFamily::kWithinHeadsOnly);
  for (int i = 0; i < 200; ++i) {
    const auto other = sample_excluding(rng, key, PermutationFamily::kWithinHeadsOnly);
    CHECK_FALSE(other == key);
    CHECK_FALSE(other.is_identity());
  }
  const auto swap = sample_secret(rng, 2, 1, PermutationFamily::kHeadsAndWithin);
  CHECK_THROWS_AS(sample_excluding(rng, swap, PermutationFamily::kHeadsAndWithin), InputError);
}

TEST_CASE("apply_features examples") {
  Rng rng(5);
  Tensor z = testing::random_tensor({3, 6}, rng);
  CHECK(apply_features(z, PermutationSpec::identity(6, 2), Direction::kForward).same_values(z));

  const auto s = sample_secret(rng, 6, 2, PermutationFamily::kHeadsAndWithin);
  const Tensor there = apply_features(z, s, Direction::kForward);
  CHECK(apply_features(there, s, Direction::kInverse).same_values(z));
  CHECK(apply_features(there, s.inverse(), Direction::kForward).same_values(z));

  PermutationSpec swap = PermutationSpec::identity(6, 1);
  std::swap(swap.within_head[0][0], swap.within_head[0][1]);
  const Tensor sw = apply_features(Tensor::matrix({{1, 2, 3, 4, 5, 6}}), swap, Direction::kForward);
  CHECK(sw.same_values(Tensor::matrix({{2, 1, 3, 4, 5, 6}})));

  // Z P with the materialized matrix.
  CHECK(max_abs_diff(there, matmul(z, s.materialize())) == 0.0f);

  CHECK_THROWS_AS(apply_features(Tensor({2, 5}), s, Direction::kForward), DimensionError);
}

TEST_CASE("transport examples") {
  Rng rng(6);
  auto w = TransformerWeights::init(config(2, 8, 2), rng);
  CHECK(transport_weights(w, PermutationSpec::identity(8, 2)).same_values(w));

  PermutationSpec swap = PermutationSpec::identity(2, 1);
  std::swap(swap.within_head[0][0], swap.within_head[0][1]);
  const Tensor moved = transport_tensor(Tensor::matrix({{1, 2}, {3, 4}}), TransportRule::kConjugate, swap.index());
  CHECK(moved.same_values(Tensor::matrix({{4, 3}, {2, 1}})));
  // P W P^-1 with dense matrices
  const Tensor p = swap.materialize();
  CHECK(matmul(matmul(p, Tensor::matrix({{1, 2}, {3, 4}})), transpose(p)).same_values(moved));

  const auto s = sample_secret(rng, 8, 2, PermutationFamily::kHeadsAndWithin);
  const auto there = transport_weights(w, s);
  CHECK(there.token_embedding.same_values(w.token_embedding));
  CHECK(there.position_embedding.same_values(w.position_embedding));
  CHECK(transport_weights(there, s.inverse()).same_values(w));

  auto wrong = TransformerWeights::init(config(1, 4, 2), rng);
  CHECK_THROWS_AS(transport_weights(wrong, s), DimensionError);
}

TEST_CASE("dense-matrix form of the transport rules") {
  Rng rng(7);
  const auto s = sample_secret(rng, 6, 3, PermutationFamily::kHeadsAndWithin);
  const Tensor p = s.materialize();
  const Tensor pinv = transpose(p);
  const auto idx = s.index();
  const Tensor sq = testing::random_tensor({6, 6}, rng);
  const Tensor w1 = testing::random_tensor({9, 6}, rng);
  const Tensor w2 = testing::random_tensor({6, 9}, rng);
  const Tensor row = testing::random_tensor({1, 6}, rng);
  CHECK(max_abs_diff(transport_tensor(sq, TransportRule::kConjugate, idx), matmul(matmul(p, sq), pinv)) == 0.0f);
  // W_1 is stored [out, in]; the columns rule acts on its input side.
  CHECK(max_abs_diff(transport_tensor(w1, TransportRule::kColumns, idx), matmul(w1, pinv)) == 0.0f);
  CHECK(max_abs_diff(transport_tensor(w2, TransportRule::kRows, idx), matmul(p, w2)) == 0.0f);
  CHECK(max_abs_diff(transport_tensor(row, TransportRule::kColumns, idx), matmul(row, pinv)) == 0.0f);
}

TEST_CASE("group closure and composition of transports") {
  Rng rng(8);
  auto w = TransformerWeights::init(config(2, 12, 3), rng);
  for (auto fam : kFamilies) {
    const auto a = sample(rng, 12, 3, fam);
    const auto b = sample(rng, 12, 3, fam);
    const auto c = compose(a, b);
    CHECK(c.in_family(fam));
    CHECK(transport_weights(transport_weights(w, a), b).same_values(transport_weights(w, compose(b, a))));
    CHECK(compose(a, a.inverse()).is_identity());
    // matrix product
    CHECK(max_abs_diff(c.materialize(), matmul(a.materialize(), b.materialize())) == 0.0f);
  }
}

TEST_CASE("counting") {
  CHECK(count_permutations(3, 1, PermutationFamily::kWithinHeadsOnly) == 6);
  CHECK(count_permutations(3, 1, PermutationFamily::kHeadsAndWithin) == 6);
  CHECK(count_permutations(3, 1, PermutationFamily::kPaperCounted) == 6);
  CHECK(count_permutations(4, 2, PermutationFamily::kHeadsAndWithin) == 8);

  std::size_t all = 0, valid = 0;
  std::vector<std::size_t> idx{0, 1, 2, 3};
  do {
    ++all;
    valid += is_head_valid(idx, 2);
  } while (std::next_permutation(idx.begin(), idx.end()));
  CHECK(all == 24);
  CHECK(valid == 8);

  for (std::size_t d = 1; d <= 8; ++d)
    for (std::size_t h = 1; h <= d; ++h) {
      if (d % h != 0) continue;
      for (auto fam : kFamilies) {
        CAPTURE(d);
        CAPTURE(h);
        CHECK(BigInt(enumerate_family(d, h, fam).size()) == count_permutations(d, h, fam));
      }
    }

  BigInt expect = 1;
  for (int i = 2; i <= 12; ++i) expect *= i;
  BigInt f64 = 1;
  for (int i = 2; i <= 64; ++i) f64 *= i;
  expect *= f64;
  const BigInt counted = count_permutations(768, 12, PermutationFamily::kPaperCounted);
  CHECK(counted == expect);
  const auto [mantissa, exponent] = scientific(counted);
  CHECK(exponent == 97);
  CHECK(mantissa == doctest::Approx(6.1).epsilon(0.01));
}

TEST_CASE("overlap") {
  Rng rng(9);
  const auto s = sample(rng, 8, 2, PermutationFamily::kHeadsAndWithin);
  CHECK(overlap(s, s) == 1.0);
  PermutationSpec swap = PermutationSpec::identity(2, 1);
  std::swap(swap.within_head[0][0], swap.within_head[0][1]);
  CHECK(overlap(PermutationSpec::identity(2, 1), swap) == 0.0);

  const std::size_t m = 8;
  double total = 0.0;
  const int pairs = 10000;
  for (int i = 0; i < pairs; ++i) {
    total += overlap(sample(rng, 16, 2, PermutationFamily::kWithinHeadsOnly),
                     sample(rng, 16, 2, PermutationFamily::kWithinHeadsOnly));
  }
  CHECK(std::abs(total / pairs - 1.0 / m) < 0.01);
}

TEST_CASE("json round trip and validation") {
  Rng rng(10);
  const auto s = sample(rng, 8, 4, PermutationFamily::kHeadsAndWithin);
  const nlohmann::json j = s;
  CHECK(j.get<PermutationSpec>() == s);
  nlohmann::json bad = j;
  bad["head_order"] = {0, 0, 1, 2};
  CHECK_THROWS_AS(bad.get<PermutationSpec>(), ConfigError);
  CHECK_THROWS_AS(PermutationSpec::from_index(cross_head_swap(4, 2), 2), InputError);
}

TEST_CASE("forward equivariance holds for sampled specs and fails across heads") {
  Rng rng(11);
  for (std::uint32_t heads : {1u, 2u, 4u}) {
    auto c = config(2, 16, heads);
    auto w = TransformerWeights::init(c, rng);
    jitter_backbone(w, rng, 0.2f);
    const Tensor z = testing::random_tensor({10, 16}, rng);
    for (auto fam : kFamilies) {
      const auto s = sample(rng, 16, heads, fam);
      CHECK(forward_deviation(w, z, 5, s.index()) < 1e-4f);
    }
    const auto id = PermutationSpec::identity(16, heads).index();
    CHECK(forward_deviation(w, z, 5, id) == 0.0f);
    if (heads >= 2) CHECK(forward_deviation(w, z, 5, cross_head_swap(16, heads)) >= 1e-2f);
  }
}

TEST_CASE("backward and one-step training equivariance") {
  Rng rng(12);
  auto w = TransformerWeights::init(config(2, 8, 2), rng);
  jitter_backbone(w, rng, 0.2f);
  const Tensor z = testing::random_tensor({10, 8}, rng);
  const auto s = sample_secret(rng, 8, 2, PermutationFamily::kHeadsAndWithin);
  const auto by_group = backward_deviation(w, z, 5, s.index(), rng);
  CHECK(by_group.size() == 8);
  for (const auto& [group, dev] : by_group) {
    CAPTURE(group);
    CHECK(dev < 1e-4f);
  }
  CHECK(train_step_deviation(w, z, 5, s.index(), rng) < 1e-4f);
}

TEST_CASE("suite over the config sweep") {
  SuiteOptions opts;
  opts.trials = 18;
  opts.seed = 3;
  opts.sweep_configs = true;
  const auto suite = run_equivariance_suite(ModelConfig{}, opts);
  CHECK(suite.max_forward < 1e-4f);
  CHECK(suite.max_backward < 1e-4f);
  CHECK(suite.max_train_step < 1e-4f);
  CHECK(suite.negative_control >= 1e-2f);

  opts.inject_cross_head = true;
  opts.sweep_configs = false;
  opts.trials = 3;
  CHECK(run_equivariance_suite(ModelConfig{}, opts).max_forward >= 1e-2f);
}
