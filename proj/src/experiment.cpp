// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/experiment.hpp"

#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "tokenmark/errors.hpp"

namespace tokenmark {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& pointer, const std::string& why) {
  throw ConfigError(fmt::format("{}: {}", pointer, why));
}

const char* type_word(const json& example) {
  if (example.is_object()) return "an object";
  if (example.is_array()) return "an array";
  if (example.is_boolean()) return "a boolean";
  if (example.is_string()) return "a string";
  if (example.is_number_unsigned()) return "a non-negative integer";
  if (example.is_number_integer()) return "an integer";
  return "a number";
}

bool same_kind(const json& example, const json& value) {
  if (example.is_number_unsigned())
    return value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
  if (example.is_number_integer()) return value.is_number_integer();
  if (example.is_number_float()) return value.is_number();
  return example.type() == value.type();
}

std::string escape(const std::string& key) {
  std::string out;
  for (char c : key) {
    if (c == '~') out += "~0";
    else if (c == '/') out += "~1";
    else out += c;
  }
  return out;
}

// The default config doubles as the schema: same keys, same value kinds.
void check_schema(const json& example, const json& value, const std::string& pointer) {
  const std::string at = pointer.empty() ? "/" : pointer;
  if (!same_kind(example, value)) fail(at, fmt::format("expected {}, got {}", type_word(example), value.type_name()));
  if (example.is_object()) {
    for (const auto& [key, child] : value.items()) {
      const std::string p = pointer + "/" + escape(key);
      if (!example.contains(key)) fail(p, "unknown key");
      check_schema(example.at(key), child, p);
    }
  } else if (example.is_array()) {
    for (std::size_t i = 0; i < value.size(); ++i) {
      const std::string p = fmt::format("{}/{}", pointer, i);
      if (example.empty()) {
        if (!value[i].is_number()) fail(p, fmt::format("expected a number, got {}", value[i].type_name()));
      } else {
        check_schema(example[0], value[i], p);
      }
    }
  }
}

template <class Fn>
void prefixed(const std::string& pointer, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (!what.empty() && what.front() == '/') throw ConfigError(pointer + what);
    fail(pointer, what);
  }
}

void check_embed_b(const EmbedConfigB& c) {
  if (c.samples == 0) fail("/embed_b/samples", "must be >= 1");
  if (c.batch_size == 0) fail("/embed_b/batch_size", "must be >= 1");
  if (!(c.learning_rate > 0.0f) || !std::isfinite(c.learning_rate)) fail("/embed_b/learning_rate", "must be positive");
  if (!(c.clean_weight >= 0.0f)) fail("/embed_b/clean_weight", "must be >= 0");
}

void check_embed_s(const EmbedConfigS& c) {
  if (c.samples == 0) fail("/embed_s/samples", "must be >= 1");
  if (c.batch_size == 0) fail("/embed_s/batch_size", "must be >= 1");
  if (!(c.lr_backbone > 0.0f)) fail("/embed_s/lr_backbone", "must be positive");
  if (!(c.lr_decoder > 0.0f)) fail("/embed_s/lr_decoder", "must be positive");
  if (!(c.lr_shadow > 0.0f)) fail("/embed_s/lr_shadow", "must be positive");
  if (!(c.dropout >= 0.0f && c.dropout < 1.0f)) fail("/embed_s/dropout", "must lie in [0, 1)");
  if (c.sk_dim == 0) fail("/embed_s/sk_dim", "must be >= 1");
  if (c.decoder_hidden == 0) fail("/embed_s/decoder_hidden", "must be >= 1");
}

void check_train(const TrainConfig& c, const std::string& pointer) {
  if (c.batch_size == 0) fail(pointer + "/batch_size", "must be >= 1");
  if (!(c.learning_rate > 0.0f) || !std::isfinite(c.learning_rate)) fail(pointer + "/learning_rate", "must be positive");
}

}  // namespace

EmbedConfigB ExperimentConfig::calibrated_b() {
  EmbedConfigB c;
  c.steps = 150;
  c.samples = 4096;
  c.batch_size = 128;
  c.learning_rate = 1e-3f;
  return c;
}

TriggerConfig ExperimentConfig::calibrated_trigger() {
  TriggerConfig c;
  c.target = 3;
  c.seed = 5;
  return c;
}

TrainConfig ExperimentConfig::probe_defaults() {
  TrainConfig c;
  c.epochs = 20;
  return c;
}

void ExperimentConfig::validate() const {
  prefixed("/model", [&] { model.validate(); });
  prefixed("/dataset", [&] { dataset.validate(model.vocab_size); });
  if (dataset.seq_len > model.max_seq_len)
    fail("/dataset/seq_len", fmt::format("{} exceeds model.max_seq_len {}", dataset.seq_len, model.max_seq_len));
  if (train_samples == 0) fail("/train_samples", "must be >= 1");
  if (eval_samples == 0) fail("/eval_samples", "must be >= 1");
  if (extraction_samples == 0) fail("/extraction_samples", "must be >= 1");
  if (attacker_samples == 0) fail("/attacker_samples", "must be >= 1");
  if (probe_samples == 0) fail("/probe_samples", "must be >= 1");
  check_train(train, "/train");
  check_train(probe, "/probe");
  if (target >= dataset.n_classes) fail("/target", fmt::format("must be below dataset.n_classes ({})", dataset.n_classes));
  if (!(epsilon_wm > -1.0f && epsilon_wm < 1.0f)) fail("/epsilon_wm", "must lie in (-1, 1)");
  check_embed_b(embed_b);
  check_embed_s(embed_s);
  for (std::size_t i = 0; i < trigger.tokens.size(); ++i)
    if (trigger.tokens[i] >= model.vocab_size)
      fail(fmt::format("/trigger/tokens/{}", i), fmt::format("token {} outside vocabulary of {}", trigger.tokens[i],
                                                             model.vocab_size));
  if (trigger.tokens.empty() || trigger.tokens.size() >= dataset.seq_len)
    fail("/trigger/tokens", "needs between 1 and seq_len - 1 tokens");
  if (!(trigger.poison_rate > 0.0f && trigger.poison_rate <= 1.0f)) fail("/trigger/poison_rate", "must lie in (0, 1]");
  if (trigger.batch_size == 0) fail("/trigger/batch_size", "must be >= 1");
  if (!(trigger.learning_rate > 0.0f)) fail("/trigger/learning_rate", "must be positive");
  if (trigger.target >= dataset.n_classes) fail("/trigger/target", "must be below dataset.n_classes");
  prefixed("/attack", [&] { attack.validate(); });
  for (std::size_t i = 0; i < strengths.size(); ++i)
    if (!std::isfinite(strengths[i]) || strengths[i] < 0.0) fail(fmt::format("/strengths/{}", i), "must be finite and >= 0");
  if (out.empty()) fail("/out", "must not be empty");
}

void to_json(json& j, const SeedConfig& s) {
  j = json{{"init", s.init},           {"head", s.head},           {"train_data", s.train_data},
           {"eval_data", s.eval_data}, {"extraction", s.extraction}, {"watermark", s.watermark},
           {"attacker", s.attacker},   {"wrong_keys", s.wrong_keys}};
}

void from_json(const json& j, SeedConfig& s) {
  s = SeedConfig{};
  if (j.contains("init")) j.at("init").get_to(s.init);
  if (j.contains("head")) j.at("head").get_to(s.head);
  if (j.contains("train_data")) j.at("train_data").get_to(s.train_data);
  if (j.contains("eval_data")) j.at("eval_data").get_to(s.eval_data);
  if (j.contains("extraction")) j.at("extraction").get_to(s.extraction);
  if (j.contains("watermark")) j.at("watermark").get_to(s.watermark);
  if (j.contains("attacker")) j.at("attacker").get_to(s.attacker);
  if (j.contains("wrong_keys")) j.at("wrong_keys").get_to(s.wrong_keys);
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"model", c.model},
           {"dataset", c.dataset},
           {"train_samples", c.train_samples},
           {"eval_samples", c.eval_samples},
           {"train", c.train},
           {"scheme", scheme_name(c.scheme)},
           {"family", family_name(c.family)},
           {"target", c.target},
           {"epsilon_wm", c.epsilon_wm},
           {"embed_b", c.embed_b},
           {"embed_s", c.embed_s},
           {"trigger", c.trigger},
           {"extraction_samples", c.extraction_samples},
           {"attacker_samples", c.attacker_samples},
           {"probe_samples", c.probe_samples},
           {"probe", c.probe},
           {"attack", c.attack},
           {"strengths", c.strengths},
           {"seeds", c.seeds},
           {"out", c.out}};
}

void from_json(const json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (j.contains("model")) j.at("model").get_to(c.model);
  if (j.contains("dataset")) j.at("dataset").get_to(c.dataset);
  if (j.contains("train_samples")) j.at("train_samples").get_to(c.train_samples);
  if (j.contains("eval_samples")) j.at("eval_samples").get_to(c.eval_samples);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("scheme")) prefixed("/scheme", [&] { c.scheme = parse_scheme(j.at("scheme").get<std::string>()); });
  if (j.contains("family")) prefixed("/family", [&] { c.family = parse_family(j.at("family").get<std::string>()); });
  if (j.contains("target")) j.at("target").get_to(c.target);
  if (j.contains("epsilon_wm")) j.at("epsilon_wm").get_to(c.epsilon_wm);
  if (j.contains("embed_b")) j.at("embed_b").get_to(c.embed_b);
  if (j.contains("embed_s")) j.at("embed_s").get_to(c.embed_s);
  if (j.contains("trigger")) j.at("trigger").get_to(c.trigger);
  if (j.contains("extraction_samples")) j.at("extraction_samples").get_to(c.extraction_samples);
  if (j.contains("attacker_samples")) j.at("attacker_samples").get_to(c.attacker_samples);
  if (j.contains("probe_samples")) j.at("probe_samples").get_to(c.probe_samples);
  if (j.contains("probe")) j.at("probe").get_to(c.probe);
  if (j.contains("attack")) prefixed("/attack", [&] { j.at("attack").get_to(c.attack); });
  if (j.contains("strengths")) j.at("strengths").get_to(c.strengths);
  if (j.contains("seeds")) j.at("seeds").get_to(c.seeds);
  if (j.contains("out")) j.at("out").get_to(c.out);
}

ExperimentConfig parse_experiment(const json& doc) {
  const json defaults = ExperimentConfig{};
  check_schema(defaults, doc, "");
  json merged = defaults;
  merged.merge_patch(doc);
  ExperimentConfig c;
  try {
    merged.get_to(c);
  } catch (const json::exception& e) {
    fail("/", e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError(fmt::format("cannot open config {}", path.string()));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return parse_experiment(doc);
}

std::string config_hash(const ExperimentConfig& c) {
  json j = c;
  j.erase("out");
  return sha256_hex(j.dump());
}

Dataset train_set(const ExperimentConfig& c) {
  return make_dataset(c.dataset, c.model.vocab_size, c.train_samples, c.seeds.train_data);
}

Dataset eval_set(const ExperimentConfig& c) {
  return make_dataset(c.dataset, c.model.vocab_size, c.eval_samples, c.seeds.eval_data);
}

Dataset extraction_set(const ExperimentConfig& c, std::size_t n) {
  if (n == 0) throw InputError("empty extraction set");
  return make_dataset(c.dataset, c.model.vocab_size, n, c.seeds.extraction);
}

Dataset attacker_set(const ExperimentConfig& c) {
  return make_dataset(c.dataset, c.model.vocab_size, c.attacker_samples, c.seeds.attacker);
}

TrainOutcome run_train(const ExperimentConfig& c) {
  Rng init(c.seeds.init);
  Rng head_rng(c.seeds.head);
  TrainOutcome out{TransformerWeights::init(c.model, init), make_downstream_head(c.model.d, c.dataset.n_classes, head_rng),
                   {}, {}};
  out.epoch_losses = train_classifier(out.model, out.head, train_set(c), c.train);
  out.eval = evaluate_classifier(out.model, out.head, eval_set(c));
  return out;
}

EmbedOutcome run_embed(const ExperimentConfig& c, Scheme scheme, const TransformerWeights& base,
                       const TaskHead& head) {
  if (base.config != c.model) throw InputError("model file does not match the configured architecture");
  const Dataset data = train_set(c);
  EmbedOutcome out{base, BundleB{}, head, {}};
  switch (scheme) {
    case Scheme::kB: {
      BundleB b = make_bundle_b(c.model, c.dataset.n_classes, c.target, c.seeds.watermark, c.family, c.embed_b);
      b.epsilon_wm = c.epsilon_wm;
      out.losses = embed_b(out.model, b, data, head.layers.empty() ? nullptr : &head);
      out.bundle = std::move(b);
      break;
    }
    case Scheme::kS: {
      BundleS b = make_bundle_s(c.model, c.seeds.watermark, c.family, c.embed_s, c.epsilon_wm);
      SessionS session = start_session_s(base, std::move(b));
      for (const auto& step : embed_s(session, data)) out.losses.push_back(step.backbone);
      out.model = std::move(session.watermarked);
      out.bundle = std::move(session.bundle);
      break;
    }
    case Scheme::kTriggerBaseline:
      out.bundle = embed_trigger_baseline(out.model, out.head, data, c.dataset.n_classes, c.trigger);
      break;
  }
  return out;
}

AttackData attack_data(const ExperimentConfig& c) {
  AttackData d;
  d.task = c.dataset;
  d.extraction = extraction_set(c, c.extraction_samples);
  const Dataset train = train_set(c);
  d.task_train = train.slice(0, std::min(c.probe_samples, train.size()));
  d.task_eval = eval_set(c);
  d.attacker = attacker_set(c);
  d.n_classes = c.dataset.n_classes;
  return d;
}

void RunManifest::add_artifact(const std::filesystem::path& path) {
  artifacts.emplace_back(path.filename().string(), sha256_file(path));
}

void to_json(json& j, const RunManifest& m) {
  json stages = json::array();
  for (const auto& [name, seconds] : m.stage_seconds) stages.push_back({{"stage", name}, {"wall_seconds", seconds}});
  json files = json::array();
  for (const auto& [name, digest] : m.artifacts) files.push_back({{"file", name}, {"sha256", digest}});
  j = json{{"command", m.command},
           {"config_hash", m.config_hash},
           {"code_version", m.code_version},
           {"stages", stages},
           {"artifacts", files}};
}

}  // namespace tokenmark
