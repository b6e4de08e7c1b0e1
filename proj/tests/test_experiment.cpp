// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>
#include <string>

#include "tokenmark/errors.hpp"
#include "tokenmark/experiment.hpp"

using namespace tokenmark;
using nlohmann::json;

namespace {

std::string error_of(const json& doc) {
  try {
    parse_experiment(doc);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

TEST_CASE("empty document yields the defaults") {
  const ExperimentConfig c = parse_experiment(json::object());
  CHECK(c == ExperimentConfig{});
  CHECK(c.embed_b.steps == 150);
  CHECK(c.embed_b.samples == 4096);
  CHECK(c.trigger.target == c.target);
  CHECK(c.probe.epochs == 20);
}

TEST_CASE("config round-trips through JSON") {
  ExperimentConfig c;
  c.scheme = Scheme::kS;
  c.family = PermutationFamily::kPaperCounted;
  c.attack.kind = AttackKind::kPrune;
  c.strengths = {0.1, 0.2};
  c.seeds.watermark = 41;
  c.embed_s.steps = 12;
  c.out = "elsewhere";
  const json j = c;
  CHECK(parse_experiment(j) == c);
}

TEST_CASE("partial documents overlay the defaults") {
  const ExperimentConfig c = parse_experiment(json{{"embed_s", {{"steps", 7}}}, {"scheme", "trigger_baseline"}});
  CHECK(c.embed_s.steps == 7);
  CHECK(c.embed_s.samples == EmbedConfigS{}.samples);
  CHECK(c.scheme == Scheme::kTriggerBaseline);
}

TEST_CASE("schema errors carry the JSON pointer") {
  CHECK(error_of(json{{"embed_s", {{"stepz", 1}}}}) == "/embed_s/stepz: unknown key");
  CHECK(error_of(json{{"model", {{"d", 16.5}}}}) == "/model/d: expected a non-negative integer, got number");
  CHECK(error_of(json{{"model", {{"d", -16}}}}) == "/model/d: expected a non-negative integer, got number");
  CHECK(error_of(json{{"train", "fast"}}) == "/train: expected an object, got string");
  CHECK(error_of(json{{"strengths", {0.1, "x"}}}) == "/strengths/1: expected a number, got string");
  CHECK(error_of(json{{"trigger", {{"tokens", {1, -2}}}}}) ==
        "/trigger/tokens/1: expected a non-negative integer, got number");
  CHECK(error_of(json::array()) == "/: expected an object, got array");
}

TEST_CASE("value errors carry the JSON pointer") {
  CHECK(starts_with(error_of(json{{"scheme", "C"}}), "/scheme: unknown scheme"));
  CHECK(starts_with(error_of(json{{"family", "all"}}), "/family: unknown permutation family"));
  CHECK(starts_with(error_of(json{{"attack", {{"kind", "melt"}}}}), "/attack/kind: unknown attack"));
  CHECK(error_of(json{{"attack", {{"ratio", 1.0}}}}) == "/attack/ratio: must lie in [0, 1)");
  CHECK(error_of(json{{"attack", {{"bits", 9}}}}) == "/attack/bits: must lie in [1, 8]");
  CHECK(starts_with(error_of(json{{"model", {{"n_heads", 3}}}}), "/model: model.d (16) must be divisible"));
  CHECK(error_of(json{{"target", 10}}) == "/target: must be below dataset.n_classes (10)");
  CHECK(error_of(json{{"extraction_samples", 0}}) == "/extraction_samples: must be >= 1");
  CHECK(starts_with(error_of(json{{"trigger", {{"tokens", {1, 64}}}}}), "/trigger/tokens/1: token 64 outside"));
}

TEST_CASE("vocabulary too small for the dataset is a config error") {
  const std::string e = error_of(json{{"model", {{"vocab_size", 40}}}});
  CHECK(starts_with(e, "/dataset: data needs 10 x 6 class tokens"));
}

TEST_CASE("config hash is stable, sensitive and ignores the output directory") {
  ExperimentConfig a;
  ExperimentConfig b;
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a).size() == 64);
  b.out = "somewhere/else";
  CHECK(config_hash(a) == config_hash(b));
  b.seeds.watermark += 1;
  CHECK(config_hash(a) != config_hash(b));
  ExperimentConfig d;
  d.dataset.signal = 0.4f;
  CHECK(config_hash(a) != config_hash(d));
}

TEST_CASE("datasets regenerate from the config") {
  ExperimentConfig c;
  c.train_samples = 64;
  const Dataset a = train_set(c);
  const Dataset b = train_set(c);
  CHECK(a.tokens == b.tokens);
  CHECK(a.labels == b.labels);
  CHECK(extraction_set(c, 10).tokens != train_set(c).slice(0, 10).tokens);
  CHECK_THROWS_AS(extraction_set(c, 0), InputError);
  const AttackData d = attack_data(c);
  CHECK(d.extraction.size() == c.extraction_samples);
  CHECK(d.attacker.size() == c.attacker_samples);
  CHECK(d.task_train.size() == 64);
}

TEST_CASE("default toy config reaches 90% synthetic-task accuracy") {
  const TrainOutcome t = run_train(ExperimentConfig{});
  CHECK(t.epoch_losses.size() == 10);
  CHECK(t.eval.accuracy >= 0.90);
  CHECK(t.eval.accuracy == doctest::Approx(0.92).epsilon(1e-9));
}

TEST_CASE("embedding is deterministic and refuses a foreign architecture") {
  ExperimentConfig c;
  c.train_samples = 600;
  c.train.epochs = 1;
  c.embed_b.steps = 3;
  c.embed_b.samples = 256;
  const TrainOutcome t = run_train(c);
  const EmbedOutcome a = run_embed(c, Scheme::kB, t.model, t.head);
  const EmbedOutcome b = run_embed(c, Scheme::kB, t.model, t.head);
  std::ostringstream wa, wb, ba, bb;
  write_weights(wa, a.model);
  write_weights(wb, b.model);
  write_bundle(ba, a.bundle);
  write_bundle(bb, b.bundle);
  CHECK(wa.str() == wb.str());
  CHECK(ba.str() == bb.str());
  CHECK(a.losses.size() == 3);
  CHECK(bundle_scheme(a.bundle) == Scheme::kB);

  ExperimentConfig wide = c;
  wide.model.d = 32;
  wide.model.d_mlp = 64;
  CHECK_THROWS_AS(run_embed(wide, Scheme::kB, t.model, t.head), InputError);
}

TEST_CASE("manifest lists stages and artifacts") {
  RunManifest m;
  m.command = "train";
  m.config_hash = "abc";
  m.stage_seconds.emplace_back("train", 1.5);
  m.artifacts.emplace_back("model.tkw", "00");
  const json j = m;
  CHECK(j["code_version"] == kCodeVersion);
  CHECK(j["stages"][0]["stage"] == "train");
  CHECK(j["artifacts"][0]["file"] == "model.tkw");
}
