// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/watermark.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include <fmt/format.h>

#include "tokenmark/errors.hpp"
#include "tokenmark/optimizer.hpp"

namespace tokenmark {

std::string scheme_name(Scheme s) {
  switch (s) {
    case Scheme::kB:
      return "B";
    case Scheme::kS:
      return "S";
    case Scheme::kTriggerBaseline:
      return "trigger_baseline";
  }
  return "unknown";
}

Scheme parse_scheme(const std::string& name) {
  if (name == "B" || name == "b") return Scheme::kB;
  if (name == "S" || name == "s") return Scheme::kS;
  if (name == "trigger_baseline") return Scheme::kTriggerBaseline;
  throw ConfigError(fmt::format("unknown scheme '{}' (expected B, S or trigger_baseline)", name));
}

void to_json(nlohmann::json& j, const WRReport& r) {
  j = nlohmann::json{{"scheme", scheme_name(r.scheme)},
                     {"wr", r.wr},
                     {"count", r.count},
                     {"total", r.total},
                     {"scores", r.scores},
                     {"model", r.model_label},
                     {"extraction_set", r.extraction_label}};
  if (r.scheme == Scheme::kS) {
    j["threshold"] = r.threshold;
  } else {
    j["target"] = r.target;
    j["decoded"] = r.decoded;
    j["logits"] = r.logits;
  }
  if (r.false_positive_rate) j["false_positive_rate"] = *r.false_positive_rate;
}

namespace {

constexpr std::size_t kChunk = 256;

std::vector<std::size_t> leading_rows(const Dataset& data, std::size_t n) {
  std::vector<std::size_t> rows(std::min(n, data.size()));
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

// Cycles through a reshuffled row order, one batch per call.
class BatchCycle {
 public:
  BatchCycle(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(std::min(batch, n)), rng_(std::move(rng)) {
    if (n == 0) throw InputError("embedding set is empty");
    if (batch == 0) throw ConfigError("batch_size must be >= 1");
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_);
  }
  std::vector<std::size_t> next() {
    std::vector<std::size_t> rows;
    while (rows.size() < batch_) {
      if (pos_ == n_) {
        rng_.shuffle(order_);
        pos_ = 0;
      }
      rows.push_back(order_[pos_++]);
    }
    return rows;
  }

 private:
  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

// F(ZP, θ)P^-1 on the tape.
template <class W>
Var permuted_forward(Tape& tape, Var z, W& w, const PermutationSpec& spec, std::size_t seq_len,
                     const ForwardOptions& opts = {}) {
  Var f = forward_backbone(tape, apply_features(z, spec, Direction::kForward), w, seq_len, opts);
  return apply_features(f, spec, Direction::kInverse);
}

Tensor stack_rows(const std::vector<Tensor>& parts, std::size_t cols) {
  std::vector<float> out;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    rows += p.rows();
  }
  return Tensor({rows, cols}, std::move(out));
}

Tensor repeat_row(const Tensor& v, std::size_t rows) {
  std::vector<float> out;
  out.reserve(rows * v.size());
  for (std::size_t r = 0; r < rows; ++r) out.insert(out.end(), v.data().begin(), v.data().end());
  return Tensor({rows, v.size()}, std::move(out));
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw NumericFault("cosine similarity of a zero-norm vector");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace

Tensor decode(const TransformerWeights& w, const TaskHead& g, const PermutationSpec& spec, const Dataset& data) {
  if (data.size() == 0) throw InputError("extraction set is empty");
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < data.size(); s += kChunk) {
    const std::size_t e = std::min(data.size(), s + kChunk);
    Tape tape;
    Var f = permuted_forward(tape, embed(tape, w, data.batch(s, e)), w, spec, data.seq_len);
    parts.push_back(forward_head(tape, f, g, data.seq_len).value().detached());
  }
  return stack_rows(parts, g.out_dim());
}

Tensor decode_features(const Tensor& features, const TaskHead& g, std::size_t seq_len) {
  Tape tape;
  return forward_head(tape, tape.constant(features), g, seq_len).value().detached();
}

WRReport classification_wr(const Tensor& logits, std::size_t target) {
  WRReport r;
  r.scheme = Scheme::kB;
  r.target = target;
  r.total = logits.rows();
  const std::size_t c = logits.cols();
  if (target >= c) throw InputError(fmt::format("target class {} outside decoder output of {}", target, c));
  for (std::size_t i = 0; i < r.total; ++i) {
    const float* row = logits.data().data() + i * c;
    const std::size_t arg = static_cast<std::size_t>(std::max_element(row, row + c) - row);
    r.decoded.push_back(arg);
    r.scores.push_back(row[target]);
    r.logits.emplace_back(row, row + c);
    r.count += arg == target;
  }
  r.wr = r.total == 0 ? 0.0 : static_cast<double>(r.count) / static_cast<double>(r.total);
  return r;
}

WRReport similarity_wr(const Tensor& decoded, const Tensor& sk, double threshold) {
  if (decoded.cols() != sk.size()) {
    throw DimensionError(fmt::format("decoded width {} does not match sk dimension {}", decoded.cols(), sk.size()));
  }
  WRReport r;
  r.scheme = Scheme::kS;
  r.threshold = threshold;
  r.total = decoded.rows();
  const std::size_t c = decoded.cols();
  for (std::size_t i = 0; i < r.total; ++i) {
    const double sim = cosine(decoded.data().subspan(i * c, c), sk.data());
    r.scores.push_back(sim);
    r.count += sim > threshold;
  }
  r.wr = r.total == 0 ? 0.0 : static_cast<double>(r.count) / static_cast<double>(r.total);
  return r;
}

// ---- TokenMark-B ------------------------------------------------------------

void to_json(nlohmann::json& j, const EmbedConfigB& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"samples", c.samples},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"clean_weight", c.clean_weight}};
}

void from_json(const nlohmann::json& j, EmbedConfigB& c) {
  c = EmbedConfigB{};
  if (j.contains("steps")) j.at("steps").get_to(c.steps);
  if (j.contains("samples")) j.at("samples").get_to(c.samples);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
  if (j.contains("clean_weight")) j.at("clean_weight").get_to(c.clean_weight);
}

TaskHead random_decoder(std::size_t d, std::size_t n_classes, Rng& rng) {
  TaskHead g = TaskHead::linear(HeadKind::kWatermarkDecoder, Reduction::kFirstToken, d, n_classes, rng, 1.0f);
  Tensor& w = g.layers[0].weight;
  for (std::size_t r = 0; r < n_classes; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += w.at(r, c);
    mean /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) w.at(r, c) -= static_cast<float>(mean);
  }
  return g;
}

BundleB make_bundle_b(const ModelConfig& config, std::size_t n_classes, std::size_t target, std::uint64_t seed,
                      PermutationFamily family, const EmbedConfigB& embed) {
  if (target >= n_classes) throw ConfigError(fmt::format("y_t = {} but the decoder has {} classes", target, n_classes));
  BundleB b;
  const Rng root(seed);
  b.spec_seed = root.split("spec").seed();
  b.decoder_seed = root.split("decoder").seed();
  Rng spec_rng(b.spec_seed);
  Rng dec_rng(b.decoder_seed);
  b.family = family;
  b.spec = sample_secret(spec_rng, config.d, config.n_heads, family);
  b.target = target;
  b.decoder = random_decoder(config.d, n_classes, dec_rng);
  b.embed = embed;
  return b;
}

std::vector<double> embed_b(TransformerWeights& w, const BundleB& bundle, const Dataset& data, const TaskHead* clean_head) {
  const EmbedConfigB& cfg = bundle.embed;
  if (bundle.spec.d != w.config.d || bundle.spec.n_heads != w.config.n_heads) {
    throw DimensionError("bundle spec does not match the model's d / n_heads");
  }
  const bool with_clean = cfg.clean_weight > 0.0f;
  std::vector<double> losses;
  if (cfg.steps == 0) return losses;
  const Dataset set = data.subset(leading_rows(data, cfg.samples));
  TaskHead clean;
  if (with_clean) {
    Rng head_rng = Rng(bundle.decoder_seed).split("clean-head");
    clean = clean_head ? *clean_head : make_downstream_head(w.config.d, bundle.decoder.out_dim(), head_rng);
  }
  std::vector<Tensor*> params = w.backbone_params();
  if (with_clean)
    for (Tensor* p : clean.params()) params.push_back(p);
  TrainableScope scope(params);
  Optimizer opt({OptimizerKind::kAdam, cfg.learning_rate}, params);
  BatchCycle cycle(set.size(), cfg.batch_size, Rng(bundle.decoder_seed).split("embed-b"));
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const Dataset b = set.subset(cycle.next());
    const std::vector<std::size_t> targets(b.size(), bundle.target);
    Tape tape;
    Var z = embed(tape, std::as_const(w), b.all());
    Var f = permuted_forward(tape, z, w, bundle.spec, b.seq_len);
    Var l_wm = cross_entropy(forward_head(tape, f, bundle.decoder, b.seq_len), targets);
    const double v = l_wm.value()[0];
    require_finite(v, "L_wm", static_cast<long>(step));
    losses.push_back(v);
    Var total = l_wm;
    if (with_clean) {
      Var fc = forward_backbone(tape, z, w, b.seq_len);
      Var l_ds = cross_entropy(forward_head(tape, fc, clean, b.seq_len), b.labels);
      total = add(total, scale(l_ds, cfg.clean_weight));
    }
    tape.backward(total);
    opt.step();
  }
  return losses;
}

WRReport extract_b(const TransformerWeights& w, const BundleB& bundle, const PermutationSpec& spec, const Dataset& data) {
  WRReport r = classification_wr(decode(w, bundle.decoder, spec, data), bundle.target);
  r.scheme = Scheme::kB;
  return r;
}

WRReport extract_b(const TransformerWeights& w, const BundleB& bundle, const Dataset& data) {
  return extract_b(w, bundle, bundle.spec, data);
}

// ---- trigger baseline -------------------------------------------------------

void to_json(nlohmann::json& j, const TriggerConfig& c) {
  j = nlohmann::json{{"tokens", c.tokens},         {"poison_rate", c.poison_rate},
                     {"epochs", c.epochs},         {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate}, {"target", c.target},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TriggerConfig& c) {
  c = TriggerConfig{};
  if (j.contains("tokens")) j.at("tokens").get_to(c.tokens);
  if (j.contains("poison_rate")) j.at("poison_rate").get_to(c.poison_rate);
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
  if (j.contains("target")) j.at("target").get_to(c.target);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

Dataset apply_trigger(const Dataset& data, const std::vector<std::size_t>& trigger) {
  if (trigger.size() >= data.seq_len) throw InputError("trigger must be shorter than the sequence");
  Dataset out = data;
  const std::size_t n = data.seq_len, k = trigger.size();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto src = data.tokens.begin() + i * n;
    auto dst = out.tokens.begin() + i * n;
    std::copy(trigger.begin(), trigger.end(), dst);
    std::copy(src, src + (n - k), dst + k);
  }
  return out;
}

TriggerBundle embed_trigger_baseline(TransformerWeights& w, TaskHead& downstream, const Dataset& data,
                                     std::size_t n_classes, const TriggerConfig& config) {
  if (!(config.poison_rate >= 0.0f && config.poison_rate <= 1.0f)) throw ConfigError("poison_rate must lie in [0, 1]");
  if (config.target >= n_classes) throw ConfigError("trigger target outside the decoder classes");
  for (std::size_t t : config.tokens)
    if (t >= w.config.vocab_size) throw ConfigError(fmt::format("trigger token {} outside the vocabulary", t));
  TriggerBundle bundle;
  bundle.config = config;
  bundle.decoder_seed = Rng(config.seed).split("trigger-decoder").seed();
  Rng dec_rng(bundle.decoder_seed);
  bundle.decoder = random_decoder(w.config.d, n_classes, dec_rng);
  TrainConfig tc;
  tc.epochs = config.epochs;
  tc.batch_size = config.batch_size;
  tc.learning_rate = config.learning_rate;
  tc.train_embedding = true;
  tc.seed = config.seed;
  const TaskHead& g = bundle.decoder;
  auto poison = [&](Tape& tape, TransformerWeights& wt, const Dataset& b) -> std::optional<Var> {
    const auto k = static_cast<std::size_t>(std::ceil(config.poison_rate * static_cast<float>(b.size())));
    if (config.poison_rate <= 0.0f || k == 0) return std::nullopt;
    const Dataset p = apply_trigger(b.slice(0, k), config.tokens);
    const std::vector<std::size_t> targets(p.size(), config.target);
    Var f = forward_backbone(tape, embed(tape, wt, p.all()), wt, p.seq_len);
    return cross_entropy(forward_head(tape, f, g, p.seq_len), targets);
  };
  train_classifier(w, downstream, data, tc, {}, poison);
  return bundle;
}

WRReport extract_trigger(const TransformerWeights& w, const TriggerBundle& bundle, const Dataset& data) {
  const Dataset triggered = apply_trigger(data, bundle.config.tokens);
  const PermutationSpec id = PermutationSpec::identity(w.config.d, w.config.n_heads);
  WRReport r = classification_wr(decode(w, bundle.decoder, id, triggered), bundle.config.target);
  r.scheme = Scheme::kTriggerBaseline;
  return r;
}

// ---- TokenMark-S ------------------------------------------------------------

void to_json(nlohmann::json& j, const EmbedConfigS& c) {
  j = nlohmann::json{{"steps", c.steps},
                     {"samples", c.samples},
                     {"batch_size", c.batch_size},
                     {"lr_backbone", c.lr_backbone},
                     {"lr_decoder", c.lr_decoder},
                     {"lr_shadow", c.lr_shadow},
                     {"dropout", c.dropout},
                     {"sk_dim", c.sk_dim},
                     {"decoder_hidden", c.decoder_hidden}};
}

void from_json(const nlohmann::json& j, EmbedConfigS& c) {
  c = EmbedConfigS{};
  if (j.contains("steps")) j.at("steps").get_to(c.steps);
  if (j.contains("samples")) j.at("samples").get_to(c.samples);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("lr_backbone")) j.at("lr_backbone").get_to(c.lr_backbone);
  if (j.contains("lr_decoder")) j.at("lr_decoder").get_to(c.lr_decoder);
  if (j.contains("lr_shadow")) j.at("lr_shadow").get_to(c.lr_shadow);
  if (j.contains("dropout")) j.at("dropout").get_to(c.dropout);
  if (j.contains("sk_dim")) j.at("sk_dim").get_to(c.sk_dim);
  if (j.contains("decoder_hidden")) j.at("decoder_hidden").get_to(c.decoder_hidden);
}

BundleS make_bundle_s(const ModelConfig& config, std::uint64_t seed, PermutationFamily family,
                      const EmbedConfigS& embed, float epsilon_wm) {
  if (!(epsilon_wm > 0.0f && epsilon_wm < 1.0f)) throw ConfigError("epsilon_wm must lie in (0, 1)");
  if (embed.sk_dim == 0 || embed.decoder_hidden == 0) throw ConfigError("sk_dim and decoder_hidden must be >= 1");
  BundleS b;
  const Rng root(seed);
  b.spec_seed = root.split("spec").seed();
  b.sk_seed = root.split("sk").seed();
  b.decoder_seed = root.split("decoder").seed();
  b.shadow_seed = root.split("shadow").seed();
  Rng spec_rng(b.spec_seed), sk_rng(b.sk_seed), dec_rng(b.decoder_seed);
  b.family = family;
  b.spec = sample_secret(spec_rng, config.d, config.n_heads, family);
  b.sk = Tensor({embed.sk_dim});
  for (float& v : b.sk.data()) v = sk_rng.normal();
  b.decoder = TaskHead::mlp(HeadKind::kWatermarkDecoder, Reduction::kFirstToken, config.d, embed.decoder_hidden,
                            embed.sk_dim, dec_rng);
  b.epsilon_wm = epsilon_wm;
  b.embed = embed;
  return b;
}

Var loss_ds(Var original_features, Var watermarked_features, std::size_t seq_len) {
  Var a = reduce_tokens(original_features, Reduction::kFirstToken, seq_len);
  Var b = reduce_tokens(watermarked_features, Reduction::kFirstToken, seq_len);
  return scale(mean(row_cosine(a, b)), -1.0f);
}

Var loss_corr(const Tensor& sk, Var decoded) {
  Var target = decoded.tape->constant(repeat_row(sk, decoded.value().rows()));
  return scale(mean(row_cosine(decoded, target)), -1.0f);
}

Var loss_uncorr(const Tensor& sk, Var decoded) {
  Var target = decoded.tape->constant(repeat_row(sk, decoded.value().rows()));
  return mean(square(row_cosine(decoded, target)));
}

SessionS start_session_s(const TransformerWeights& original, BundleS bundle) {
  original.validate();
  if (bundle.spec.d != original.config.d || bundle.spec.n_heads != original.config.n_heads) {
    throw DimensionError("bundle spec does not match the model's d / n_heads");
  }
  SessionS s;
  s.original = &original;
  s.watermarked = original;
  Rng shadow_rng(bundle.shadow_seed);
  s.shadow = TransformerWeights::init(original.config, shadow_rng);
  s.bundle = std::move(bundle);
  return s;
}

double shadow_train_step(TransformerWeights& shadow, const TransformerWeights& original, const Tensor& z,
                         std::size_t seq_len, Optimizer& optimizer) {
  Tape tape;
  Var zc = tape.constant(z);
  Var reference = forward_backbone(tape, zc, original, seq_len);
  Var mimic = forward_backbone(tape, zc, shadow, seq_len);
  Var l = loss_ds(reference, mimic, seq_len);
  const double v = l.value()[0];
  tape.backward(l);
  optimizer.step();
  return v;
}

std::vector<StepLossesS> embed_s(SessionS& session, const Dataset& data) {
  if (session.original == nullptr) throw ContractViolation("embedding session was not started");
  const TransformerWeights& original = *session.original;
  BundleS& bundle = session.bundle;
  const EmbedConfigS& cfg = bundle.embed;
  TransformerWeights& wm = session.watermarked;
  TransformerWeights& shadow = session.shadow;
  TaskHead& g = bundle.decoder;
  const Tensor& sk = bundle.sk;

  const Dataset set = data.subset(leading_rows(data, cfg.samples));
  TrainableScope s_scope(shadow.backbone_params());
  TrainableScope g_scope(g.params());
  TrainableScope b_scope(wm.backbone_params());
  Optimizer opt_s({OptimizerKind::kAdam, cfg.lr_shadow}, shadow.backbone_params());
  Optimizer opt_g({OptimizerKind::kAdam, cfg.lr_decoder}, g.params());
  Optimizer opt_b({OptimizerKind::kAdam, cfg.lr_backbone}, wm.backbone_params());
  const Rng root = Rng(bundle.shadow_seed).split("embed-s");
  BatchCycle cycle(set.size(), cfg.batch_size, root.split("batches"));
  Rng wrong_rng = root.split("wrong-keys");
  std::vector<StepLossesS> log;
  for (std::size_t it = 0; it < cfg.steps; ++it) {
    const long iter = static_cast<long>(it);
    const Dataset b = set.subset(cycle.next());
    const std::size_t n = b.seq_len;
    const Tensor z = embed_tokens(original, b.all());
    const PermutationSpec wrong = sample_excluding(wrong_rng, bundle.spec, bundle.family);
    Rng drop = root.split(it);
    const ForwardOptions noisy{cfg.dropout, &drop};
    StepLossesS step;

    step.shadow = shadow_train_step(shadow, original, z, n, opt_s);
    require_finite(step.shadow, "L_S", iter);

    {
      Tape tape;
      Var zc = tape.constant(z);
      Var keyed = forward_head(tape, permuted_forward(tape, zc, std::as_const(wm), bundle.spec, n, noisy), g, n);
      Var shadow_keyed = forward_head(tape, permuted_forward(tape, zc, std::as_const(shadow), bundle.spec, n), g, n);
      Var wrong_keyed = forward_head(tape, permuted_forward(tape, zc, std::as_const(wm), wrong, n, noisy), g, n);
      Var plain = forward_head(tape, forward_backbone(tape, zc, original, n), g, n);
      Var l = add(add(loss_corr(sk, keyed), loss_corr(sk, shadow_keyed)),
                  add(loss_uncorr(sk, wrong_keyed), loss_uncorr(sk, plain)));
      step.decoder = l.value()[0];
      require_finite(step.decoder, "L_G", iter);
      tape.backward(l);
      opt_g.step();
    }

    {
      Tape tape;
      Var zc = tape.constant(z);
      Var reference = forward_backbone(tape, zc, original, n);
      Var clean = forward_backbone(tape, zc, wm, n, noisy);
      Var keyed = permuted_forward(tape, zc, wm, bundle.spec, n, noisy);
      Var l = add(loss_ds(reference, clean, n),
                  add(loss_corr(sk, forward_head(tape, keyed, std::as_const(g), n)),
                      loss_uncorr(sk, forward_head(tape, clean, std::as_const(g), n))));
      step.backbone = l.value()[0];
      require_finite(step.backbone, "L_B", iter);
      tape.backward(l);
      opt_b.step();
    }
    log.push_back(step);
  }
  return log;
}

WRReport extract_s(const TransformerWeights& w, const BundleS& bundle, const PermutationSpec& spec, const Dataset& data,
                   std::optional<double> threshold) {
  return similarity_wr(decode(w, bundle.decoder, spec, data), bundle.sk, threshold.value_or(bundle.epsilon_wm));
}

WRReport extract_s(const TransformerWeights& w, const BundleS& bundle, const Dataset& data) {
  return extract_s(w, bundle, bundle.spec, data);
}

double feature_similarity(const TransformerWeights& a, const TransformerWeights& b, const Dataset& data) {
  if (data.size() == 0) throw InputError("similarity set is empty");
  double total = 0.0;
  for (std::size_t s = 0; s < data.size(); s += kChunk) {
    const std::size_t e = std::min(data.size(), s + kChunk);
    const TokenBatch batch = data.batch(s, e);
    Tape tape;
    Var fa = forward_backbone(tape, embed(tape, a, batch), a, data.seq_len);
    Var fb = forward_backbone(tape, embed(tape, b, batch), b, data.seq_len);
    total -= loss_ds(fa, fb, data.seq_len).value()[0] * static_cast<double>(e - s);
  }
  return total / static_cast<double>(data.size());
}

}  // namespace tokenmark
