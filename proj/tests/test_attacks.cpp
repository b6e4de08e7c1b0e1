// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "tokenmark/attacks.hpp"
#include "tokenmark/errors.hpp"

using namespace tokenmark;

namespace {

ModelConfig small_config() {
  ModelConfig mc;
  mc.n_layers = 1;
  return mc;
}

TransformerWeights small_model(std::uint64_t seed) {
  Rng rng(seed);
  return TransformerWeights::init(small_config(), rng);
}

EmbedConfigS tiny_s() {
  EmbedConfigS e;
  e.steps = 2;
  e.samples = 64;
  e.batch_size = 16;
  return e;
}

AttackData tiny_data(const ModelConfig& mc) {
  AttackData d;
  d.extraction = make_dataset(d.task, mc.vocab_size, 40, 11);
  d.task_train = make_dataset(d.task, mc.vocab_size, 80, 12);
  d.task_eval = make_dataset(d.task, mc.vocab_size, 40, 13);
  d.attacker = make_dataset(d.task, mc.vocab_size, 64, 14);
  return d;
}

}  // namespace

TEST_CASE("magnitude pruning zeroes the smallest fraction") {
  Tensor t = Tensor::vector({1, -2, 3, -4});
  prune_tensor(t, 0.5f);
  CHECK(t.same_values(Tensor::vector({0, 0, 3, -4})));
  Tensor u = Tensor::vector({1, -2, 3, -4});
  prune_tensor(u, 0.0f);
  CHECK(u.same_values(Tensor::vector({1, -2, 3, -4})));
  prune_tensor(u, 0.75f);
  CHECK(u.same_values(Tensor::vector({0, 0, 0, -4})));
  CHECK_THROWS_AS(prune_tensor(u, 1.0f), ConfigError);
}

TEST_CASE("model pruning leaves embeddings alone and ratio 0 changes nothing") {
  const TransformerWeights w = small_model(1);
  CHECK(prune(w, 0.0f, PruneGranularity::kWeightMagnitude).same_values(w));
  CHECK(prune(w, 0.0f, PruneGranularity::kNeuron).same_values(w));
  const TransformerWeights p = prune(w, 0.5f, PruneGranularity::kWeightMagnitude);
  CHECK(p.token_embedding.same_values(w.token_embedding));
  CHECK(p.position_embedding.same_values(w.position_embedding));
  std::size_t zeros = 0;
  for (float v : p.blocks[0].w_q.data()) zeros += v == 0.0f;
  CHECK(zeros == w.blocks[0].w_q.size() / 2);
}

TEST_CASE("neuron pruning removes whole rows with their bias") {
  TransformerWeights w = small_model(2);
  for (std::size_t c = 0; c < w.blocks[0].w_1.cols(); ++c) w.blocks[0].w_1.at(3, c) = 1e-4f;
  w.blocks[0].b_1[3] = 0.7f;
  const TransformerWeights p = prune(w, 1.0f / 32.0f, PruneGranularity::kNeuron);
  for (std::size_t c = 0; c < p.blocks[0].w_1.cols(); ++c) CHECK(p.blocks[0].w_1.at(3, c) == 0.0f);
  CHECK(p.blocks[0].b_1[3] == 0.0f);
  std::size_t zero_rows = 0;
  for (std::size_t r = 0; r < p.blocks[0].w_1.rows(); ++r) zero_rows += p.blocks[0].w_1.at(r, 0) == 0.0f;
  CHECK(zero_rows == 1);
}

TEST_CASE("quantization examples") {
  Tensor zeros({2, 2});
  quantize_tensor(zeros, 8);
  CHECK(zeros.same_values(Tensor({2, 2})));

  const Tensor t = Tensor::matrix({{0.3f, -1.0f, 0.05f}, {0.77f, -0.41f, 0.0f}});
  Tensor pair = Tensor::vector({1.0f, -0.5f});
  quantize_tensor(pair, 8);
  CHECK(std::fabs(pair[1] + 0.5f) <= 1.0f / 254.0f);
  Tensor q8 = t;
  quantize_tensor(q8, 8);
  CHECK(max_abs_diff(q8, t) <= 1.0f / 254.0f + 1e-7f);
  CHECK(q8.at(0, 1) == -1.0f);

  Tensor q1 = Tensor::vector({2.0f, -1.0f, 0.0f, 3.0f});
  quantize_tensor(q1, 1);
  CHECK(q1.same_values(Tensor::vector({1.5f, -1.5f, 0.0f, 1.5f})));

  Tensor q2 = Tensor::vector({0.9f, -0.2f, 0.6f, -1.0f});
  quantize_tensor(q2, 2);
  CHECK(q2.same_values(Tensor::vector({1.0f, 0.0f, 1.0f, -1.0f})));
  CHECK_THROWS_AS(quantize_tensor(q2, 0), ConfigError);
}

TEST_CASE("8-bit model quantization stays within half a step per tensor") {
  const TransformerWeights w = small_model(3);
  const TransformerWeights q = quantize(w, 8);
  CHECK_THROWS_AS(quantize(w, 9), ConfigError);
  const auto a = w.entries();
  const auto b = q.entries();
  for (std::size_t i = 0; i < a.size(); ++i) {
    float peak = 0.0f;
    for (float v : a[i].tensor->data()) peak = std::max(peak, std::fabs(v));
    if (a[i].tensor->rank() == 2) {
      CHECK(max_abs_diff(*b[i].tensor, *a[i].tensor) <= peak / 254.0f + 1e-7f);
    } else {
      CHECK(b[i].tensor->same_values(*a[i].tensor));
    }
  }
}

TEST_CASE("attack config validation and JSON round trip") {
  AttackConfig c;
  c.kind = AttackKind::kGradientSearch;
  c.granularity = PruneGranularity::kNeuron;
  c.alpha = 0.25f;
  nlohmann::json j = c;
  CHECK(j.at("kind") == "gradient_search");
  CHECK(j.get<AttackConfig>() == c);
  CHECK(parse_attack("adaptive_removal") == AttackKind::kAdaptiveRemoval);
  CHECK_THROWS_AS(parse_attack("nope"), ConfigError);
  c.ratio = -0.1f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = AttackConfig{};
  c.temperature = 0.0f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  j = AttackConfig{};
  j["granularity"] = "layer";
  CHECK_THROWS_AS(j.get<AttackConfig>(), ConfigError);
}

template <class T>
concept ExposesWeights = requires(const T& t) { t.model(); } || requires(const T& t) { t.weights(); } ||
                         requires(const T& t) { t.model_; } || std::is_convertible_v<T, TransformerWeights>;

static_assert(!ExposesWeights<FeatureOracle>);

TEST_CASE("feature oracle answers queries and counts them") {
  const TransformerWeights w = small_model(4);
  const FeatureOracle oracle(w);
  const Dataset q = make_dataset(DatasetConfig{}, 64, 5, 1);
  const Tensor f = oracle.query(q.all());
  CHECK(f.same_values(backbone_features(w, embed_tokens(w, q.all()), q.seq_len)));
  CHECK(oracle.queries() == 5);
  CHECK(oracle.d() == 16);
}

TEST_CASE("extraction moves a fresh substitute towards the oracle") {
  const TransformerWeights victim = small_model(5);
  const FeatureOracle oracle(victim);
  const Dataset queries = make_dataset(DatasetConfig{}, 64, 128, 2);
  const Dataset held = make_dataset(DatasetConfig{}, 64, 32, 3);
  AttackConfig cfg;
  cfg.epochs = 0;
  const double start = extract_substitute(oracle, victim.config, queries, held, cfg).similarity;
  cfg.epochs = 10;
  const ExtractResult r = extract_substitute(oracle, victim.config, queries, held, cfg);
  CHECK(r.similarity > start);
  CHECK(r.losses.back() < r.losses.front());
  ModelConfig wide = victim.config;
  wide.d = 32;
  wide.d_mlp = 64;
  CHECK_THROWS_AS(extract_substitute(oracle, wide, queries, held, cfg), DimensionError);
}

TEST_CASE("random search with no budget finds nothing and a planted key is found") {
  Rng rng(6);
  const PermutationSpec key = sample_secret(rng, 16, 2, PermutationFamily::kHeadsAndWithin);
  std::size_t calls = 0;
  const KeyScore score = [&](const PermutationSpec& s, const Dataset&) {
    ++calls;
    return s == key ? 1.0 : 0.0;
  };
  const Dataset set = make_dataset(DatasetConfig{}, 64, 8, 1);
  AttackConfig cfg;
  cfg.budget = 0;
  RandomSearchResult r = random_search(score, 16, 2, PermutationFamily::kHeadsAndWithin, set, set, cfg);
  CHECK(r.tried == 0);
  CHECK(r.hits == 0);
  r = random_search(score, 16, 2, PermutationFamily::kHeadsAndWithin, set, set, cfg, {key});
  CHECK(r.hits == 1);
  CHECK(r.found.front() == key);
  cfg.budget = 200;
  calls = 0;
  r = random_search(score, 16, 2, PermutationFamily::kHeadsAndWithin, set, set, cfg);
  CHECK(r.tried == 200);
  CHECK(r.passed_small == 0);
  CHECK(calls == 200);
}

TEST_CASE("peaked soft permutation approaches the hard matrix") {
  Rng rng(7);
  const PermutationSpec spec = sample_secret(rng, 16, 2, PermutationFamily::kHeadsAndWithin);
  SoftPermutation p = SoftPermutation::planted(spec, 30.0f);
  Tape tape;
  Var a = soft_matrix(tape, p, 1.0f, nullptr);
  CHECK(max_abs_diff(a.value(), spec.materialize()) < 1e-5f);
  CHECK(orthogonality_penalty(a).value()[0] < 1e-6f);
}

TEST_CASE("soft matrix rows and columns follow the head-block structure") {
  Rng rng(8);
  SoftPermutation p = SoftPermutation::random(16, 2, rng);
  Tape tape;
  const Tensor a = soft_matrix(tape, p, 1.0f, nullptr).value();
  for (std::size_t dest = 0; dest < 16; ++dest) {
    double col = 0.0;
    for (std::size_t src = 0; src < 16; ++src) col += a.at(src, dest);
    CHECK(col == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("gradients reach the permutation logits") {
  Rng rng(9);
  SoftPermutation p = SoftPermutation::random(16, 2, rng);
  TrainableScope scope(p.params());
  Tape tape;
  Var a = soft_matrix(tape, p, 1.0f, &rng);
  tape.backward(orthogonality_penalty(a));
  for (Tensor* t : p.params()) {
    double norm = 0.0;
    for (float g : t->grad()) norm += std::fabs(g);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("a larger orthogonality weight leaves a more orthogonal soft matrix") {
  const TransformerWeights w = small_model(17);
  const BundleS bundle = make_bundle_s(w.config, 8, PermutationFamily::kHeadsAndWithin, tiny_s());
  const Dataset data = make_dataset(DatasetConfig{}, 64, 64, 7);
  AttackConfig cfg;
  cfg.epochs = 0;
  const double initial = gradient_search(w, bundle, data, cfg).penalty;
  cfg.epochs = 5;
  double last = std::numeric_limits<double>::infinity();
  for (float alpha : {0.0f, 0.1f, 1.0f, 10.0f}) {
    cfg.alpha = alpha;
    const double penalty = gradient_search(w, bundle, data, cfg).penalty;
    CHECK(penalty <= last);
    last = penalty;
  }
  CHECK(last < initial);
}

TEST_CASE("projection recovers a planted key and repairs duplicates") {
  Rng rng(10);
  const PermutationSpec spec = sample_secret(rng, 16, 2, PermutationFamily::kHeadsAndWithin);
  std::size_t repaired = 99;
  CHECK(project(SoftPermutation::planted(spec), rng, &repaired) == spec);
  CHECK(repaired == 0);

  SoftPermutation dup = SoftPermutation::planted(PermutationSpec::identity(16, 2));
  for (std::size_t w = 0; w < 8; ++w) dup.within[0].at(w, 0) = 20.0f + static_cast<float>(w);
  const PermutationSpec s = project(dup, rng, &repaired);
  CHECK(repaired == 7);
  CHECK(s.within_head[0][7] == 0);
  CHECK(is_bijection(s.index()));
}

TEST_CASE("gradient search from the planted key keeps the key") {
  const TransformerWeights w = small_model(11);
  const BundleS bundle = make_bundle_s(w.config, 3, PermutationFamily::kHeadsAndWithin, tiny_s());
  const Dataset data = make_dataset(DatasetConfig{}, 64, 32, 4);
  AttackConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  cfg.search_lr = 1e-3f;
  const GradientSearchResult r = gradient_search(w, bundle, data, cfg, SoftPermutation::planted(bundle.spec));
  CHECK(r.candidate == bundle.spec);
  CHECK(r.losses.size() == 4);
  CHECK_FALSE(r.degenerate);
}

TEST_CASE("adaptive removal with no steps returns the model unchanged") {
  const TransformerWeights w = small_model(12);
  const BundleS bundle = make_bundle_s(w.config, 4, PermutationFamily::kHeadsAndWithin, tiny_s());
  const Dataset data = make_dataset(DatasetConfig{}, 64, 32, 5);
  AttackConfig cfg;
  cfg.steps = 0;
  CHECK(adaptive_removal(w, bundle, bundle.spec, data, cfg).same_values(w));
  cfg.steps = 3;
  std::vector<double> losses;
  const TransformerWeights out = adaptive_removal(w, bundle, bundle.spec, data, cfg, &losses);
  CHECK(losses.size() == 3);
  CHECK_FALSE(out.same_values(w));
  CHECK(out.token_embedding.same_values(w.token_embedding));
}

TEST_CASE("overwrite with the original key is rejected") {
  const TransformerWeights w = small_model(13);
  const AnyBundle original = make_bundle_s(w.config, 5, PermutationFamily::kHeadsAndWithin, tiny_s());
  AnyBundle same = original;
  const Dataset data = make_dataset(DatasetConfig{}, 64, 32, 6);
  CHECK_THROWS_AS(overwrite(w, original, same, data), ContractViolation);
  AnyBundle other = make_bundle_s(w.config, 6, PermutationFamily::kHeadsAndWithin, tiny_s());
  REQUIRE_FALSE(std::get<BundleS>(other).spec == std::get<BundleS>(original).spec);
  CHECK_FALSE(overwrite(w, original, other, data).same_values(w));
}

TEST_CASE("fine-tuning for zero epochs leaves WR unchanged") {
  const TransformerWeights w = small_model(14);
  const AttackData data = tiny_data(w.config);
  EmbedConfigB eb;
  Rng rng(1);
  Subject s{"b", w, make_bundle_b(w.config, 10, 2, 7, PermutationFamily::kHeadsAndWithin, eb),
            make_downstream_head(16, 10, rng)};
  AttackConfig cfg;
  cfg.epochs = 0;
  cfg.task_samples = 32;
  const AttackReport rep = run_attack(cfg, {s}, data);
  REQUIRE(rep.subjects.size() == 1);
  CHECK(rep.subjects[0].wr_after == rep.subjects[0].wr_before);
  CHECK(rep.subjects[0].wr_per_epoch.empty());
  cfg.epochs = 1;
  const AttackReport one = run_attack(cfg, {s}, data);
  CHECK(one.subjects[0].wr_per_epoch.size() == 1);
  CHECK(one.subjects[0].accuracy_per_epoch.size() == 1);
  const nlohmann::json j = one;
  CHECK(j.at("attack") == "finetune");
}

TEST_CASE("prune sweep yields one row per strength") {
  const TransformerWeights w = small_model(15);
  const AttackData data = tiny_data(w.config);
  EmbedConfigB eb;
  Rng rng(2);
  Subject s{"b", w, make_bundle_b(w.config, 10, 1, 8, PermutationFamily::kHeadsAndWithin, eb),
            make_downstream_head(16, 10, rng)};
  AttackConfig cfg;
  cfg.kind = AttackKind::kPrune;
  const auto rows = run_sweep(cfg, {0.0, 0.5}, {s}, data);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].wr_b.has_value());
  CHECK_FALSE(rows[0].wr_s.has_value());
  CHECK(*rows[0].wr_b == run_attack(cfg, {s}, data).subjects[0].wr_before);
  cfg.kind = AttackKind::kExtract;
  CHECK_THROWS_AS(run_sweep(cfg, {1.0}, {s}, data), ConfigError);
}

TEST_CASE("sweep CSV leaves missing schemes empty") {
  std::vector<SweepRow> rows(2);
  rows[0].strength = 0.1;
  rows[0].wr_b = 1.0;
  rows[0].wr_trigger = 0.25;
  rows[0].downstream_acc = 0.9;
  rows[1].strength = 0.2;
  rows[1].wr_s = 0.5;
  CHECK(sweep_csv(rows) ==
        "strength,wr_tokenmark_b,wr_tokenmark_s,wr_trigger_baseline,downstream_acc\n"
        "0.1,1,,0.25,0.9\n"
        "0.2,,0.5,,0\n");
}

TEST_CASE("search attacks need a secret-vector subject") {
  const TransformerWeights w = small_model(16);
  const AttackData data = tiny_data(w.config);
  Rng rng(3);
  Subject s{"b", w, make_bundle_b(w.config, 10, 1, 9, PermutationFamily::kHeadsAndWithin, EmbedConfigB{}),
            make_downstream_head(16, 10, rng)};
  AttackConfig cfg;
  cfg.kind = AttackKind::kGradientSearch;
  CHECK_THROWS_AS(run_attack(cfg, {s}, data), InputError);
}
