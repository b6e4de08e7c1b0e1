// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include <fmt/format.h>

#include "tokenmark/errors.hpp"
#include "tokenmark/optimizer.hpp"

namespace tokenmark {

namespace {

constexpr std::pair<AttackKind, const char*> kAttackNames[] = {
    {AttackKind::kFinetune, "finetune"},
    {AttackKind::kPrune, "prune"},
    {AttackKind::kQuantize, "quantize"},
    {AttackKind::kExtract, "extract"},
    {AttackKind::kOverwrite, "overwrite"},
    {AttackKind::kRandomSearch, "random_search"},
    {AttackKind::kGradientSearch, "gradient_search"},
    {AttackKind::kAdaptiveRemoval, "adaptive_removal"},
};

std::string granularity_name(PruneGranularity g) {
  return g == PruneGranularity::kNeuron ? "neuron" : "weight_magnitude";
}

PruneGranularity parse_granularity(const std::string& s) {
  if (s == "weight_magnitude") return PruneGranularity::kWeightMagnitude;
  if (s == "neuron") return PruneGranularity::kNeuron;
  throw ConfigError(fmt::format("/granularity: unknown value '{}' (expected weight_magnitude or neuron)", s));
}

// Indices of `values` ordered by (value, index).
std::vector<std::size_t> ascending(const std::vector<double>& values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return order;
}

std::size_t prune_count(std::size_t n, float ratio) {
  return std::min(n, static_cast<std::size_t>(std::floor(static_cast<double>(ratio) * static_cast<double>(n))));
}

void prune_rows(Tensor& w, Tensor* bias, float ratio) {
  const std::size_t rows = w.rows(), cols = w.cols();
  std::vector<double> norms(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) norms[r] += static_cast<double>(w.at(r, c)) * w.at(r, c);
  }
  const auto order = ascending(norms);
  for (std::size_t k = 0; k < prune_count(rows, ratio); ++k) {
    const std::size_t r = order[k];
    for (std::size_t c = 0; c < cols; ++c) w.at(r, c) = 0.0f;
    if (bias != nullptr) (*bias)[r] = 0.0f;
  }
}

// F(ZP, θ)P^-1 on the tape.
template <class W>
Var permuted_forward(Tape& tape, Var z, W& w, const PermutationSpec& spec, std::size_t seq_len) {
  Var f = forward_backbone(tape, apply_features(z, spec, Direction::kForward), w, seq_len);
  return apply_features(f, spec, Direction::kInverse);
}

Tensor identity_matrix(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0f;
  return t;
}

// Row-wise softmax input (logits + optional Gumbel noise) / temperature.
Var noisy_logits(Tape& tape, Tensor& logits, float temperature, Rng* rng) {
  Var l = tape.parameter(logits);
  if (rng != nullptr) {
    Tensor g(logits.shape());
    for (float& v : g.data()) v = rng->gumbel();
    l = add(l, tape.constant(std::move(g)));
  }
  return scale(l, 1.0f / temperature);
}

// Row argmax with duplicates resolved: each claimed column is kept by its
// highest-scoring row, the other rows draw from the unclaimed columns.
std::vector<std::size_t> project_rows(const Tensor& logits, Rng& rng, std::size_t& repaired, bool& collapsed) {
  const std::size_t n = logits.rows();
  std::vector<std::size_t> pick(n);
  for (std::size_t r = 0; r < n; ++r) {
    const float* row = logits.data().data() + r * n;
    pick[r] = static_cast<std::size_t>(std::max_element(row, row + n) - row);
  }
  collapsed = n > 1 && std::all_of(pick.begin(), pick.end(), [&](std::size_t p) { return p == pick[0]; });
  std::vector<long> owner(n, -1);
  for (std::size_t r = 0; r < n; ++r) {
    const long o = owner[pick[r]];
    if (o < 0 || logits.at(r, pick[r]) > logits.at(static_cast<std::size_t>(o), pick[r])) {
      owner[pick[r]] = static_cast<long>(r);
    }
  }
  std::vector<std::size_t> missing, losers;
  for (std::size_t c = 0; c < n; ++c) {
    if (owner[c] < 0) missing.push_back(c);
  }
  for (std::size_t r = 0; r < n; ++r) {
    if (owner[pick[r]] != static_cast<long>(r)) losers.push_back(r);
  }
  rng.shuffle(missing);
  for (std::size_t k = 0; k < losers.size(); ++k) pick[losers[k]] = missing[k];
  repaired += losers.size();
  return pick;
}

std::optional<std::size_t> first_of(const std::vector<Subject>& subjects, Scheme scheme) {
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (bundle_scheme(subjects[i].bundle) == scheme) return i;
  }
  return std::nullopt;
}

double downstream_accuracy(const TransformerWeights& w, const TaskHead& head, const AttackData& data) {
  return evaluate_classifier(w, head, data.task_eval).accuracy;
}

TrainConfig probe_config(const AttackConfig& cfg) {
  TrainConfig tc;
  tc.epochs = 10;
  tc.batch_size = cfg.batch_size;
  tc.seed = cfg.seed;
  return tc;
}

double probe_accuracy(const TransformerWeights& w, const AttackData& data, const AttackConfig& cfg) {
  const TaskHead probe = train_probe(w, data.task_train, data.n_classes, probe_config(cfg));
  return evaluate_classifier(w, probe, data.task_eval).accuracy;
}

AnyBundle replacement_bundle(const AnyBundle& original, const ModelConfig& config, const AttackData& data,
                             std::uint64_t seed) {
  const PermutationSpec* old_spec = nullptr;
  if (const auto* b = std::get_if<BundleB>(&original)) old_spec = &b->spec;
  if (const auto* s = std::get_if<BundleS>(&original)) old_spec = &s->spec;
  for (std::uint64_t k = 0;; ++k) {
    const std::uint64_t s = seed + k;
    AnyBundle fresh;
    if (const auto* b = std::get_if<BundleB>(&original)) {
      Rng target_rng = Rng(s).split("target");
      fresh = make_bundle_b(config, data.n_classes, target_rng.below(data.n_classes), s, b->family, b->embed);
      if (std::get<BundleB>(fresh).spec == *old_spec) continue;
    } else if (const auto* sb = std::get_if<BundleS>(&original)) {
      fresh = make_bundle_s(config, s, sb->family, sb->embed, sb->epsilon_wm);
      if (std::get<BundleS>(fresh).spec == *old_spec) continue;
    } else {
      throw InputError("overwrite applies to TokenMark bundles only");
    }
    return fresh;
  }
}

}  // namespace

std::string attack_name(AttackKind k) {
  for (const auto& [kind, name] : kAttackNames) {
    if (kind == k) return name;
  }
  return "unknown";
}

AttackKind parse_attack(const std::string& name) {
  for (const auto& [kind, n] : kAttackNames) {
    if (name == n) return kind;
  }
  throw ConfigError(fmt::format("/kind: unknown attack '{}'", name));
}

void AttackConfig::validate() const {
  auto fail = [](const char* field, const std::string& why) {
    throw ConfigError(fmt::format("/{}: {}", field, why));
  };
  if (batch_size == 0) fail("batch_size", "must be >= 1");
  if (!(learning_rate > 0.0f) || !std::isfinite(learning_rate)) fail("learning_rate", "must be positive and finite");
  if (!(ratio >= 0.0f && ratio < 1.0f)) fail("ratio", "must lie in [0, 1)");
  if (bits < 1 || bits > 8) fail("bits", "must lie in [1, 8]");
  if (restarts == 0) fail("restarts", "must be >= 1");
  if (small_set == 0) fail("small_set", "must be >= 1");
  if (!(hit_threshold >= 0.0 && hit_threshold <= 1.0)) fail("hit_threshold", "must lie in [0, 1]");
  if (!(alpha >= 0.0f) || !std::isfinite(alpha)) fail("alpha", "must be non-negative and finite");
  if (!(temperature > 0.0f) || !std::isfinite(temperature)) fail("temperature", "must be positive and finite");
  if (!(search_lr > 0.0f) || !std::isfinite(search_lr)) fail("search_lr", "must be positive and finite");
  if (search_samples == 0) fail("search_samples", "must be >= 1");
  if (task_samples == 0) fail("task_samples", "must be >= 1");
}

void to_json(nlohmann::json& j, const AttackConfig& c) {
  j = nlohmann::json{{"kind", attack_name(c.kind)},
                     {"seed", c.seed},
                     {"epochs", c.epochs},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"task_seed", c.task_seed},
                     {"task_samples", c.task_samples},
                     {"ratio", c.ratio},
                     {"granularity", granularity_name(c.granularity)},
                     {"bits", c.bits},
                     {"budget", c.budget},
                     {"small_set", c.small_set},
                     {"hit_threshold", c.hit_threshold},
                     {"alpha", c.alpha},
                     {"temperature", c.temperature},
                     {"search_lr", c.search_lr},
                     {"search_samples", c.search_samples},
                     {"restarts", c.restarts},
                     {"overwrite_seed", c.overwrite_seed}};
}

void from_json(const nlohmann::json& j, AttackConfig& c) {
  c = AttackConfig{};
  if (j.contains("kind")) c.kind = parse_attack(j.at("kind").get<std::string>());
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("steps")) j.at("steps").get_to(c.steps);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
  if (j.contains("task_seed")) j.at("task_seed").get_to(c.task_seed);
  if (j.contains("task_samples")) j.at("task_samples").get_to(c.task_samples);
  if (j.contains("ratio")) j.at("ratio").get_to(c.ratio);
  if (j.contains("granularity")) c.granularity = parse_granularity(j.at("granularity").get<std::string>());
  if (j.contains("bits")) j.at("bits").get_to(c.bits);
  if (j.contains("budget")) j.at("budget").get_to(c.budget);
  if (j.contains("small_set")) j.at("small_set").get_to(c.small_set);
  if (j.contains("hit_threshold")) j.at("hit_threshold").get_to(c.hit_threshold);
  if (j.contains("alpha")) j.at("alpha").get_to(c.alpha);
  if (j.contains("temperature")) j.at("temperature").get_to(c.temperature);
  if (j.contains("search_lr")) j.at("search_lr").get_to(c.search_lr);
  if (j.contains("search_samples")) j.at("search_samples").get_to(c.search_samples);
  if (j.contains("restarts")) j.at("restarts").get_to(c.restarts);
  if (j.contains("overwrite_seed")) j.at("overwrite_seed").get_to(c.overwrite_seed);
}

// ---- weight-space attacks ---------------------------------------------------

void prune_tensor(Tensor& t, float ratio) {
  if (!(ratio >= 0.0f && ratio < 1.0f)) throw ConfigError("prune ratio must lie in [0, 1)");
  std::vector<double> mags(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) mags[i] = std::fabs(t[i]);
  const auto order = ascending(mags);
  for (std::size_t k = 0; k < prune_count(t.size(), ratio); ++k) t[order[k]] = 0.0f;
}

TransformerWeights prune(const TransformerWeights& w, float ratio, PruneGranularity granularity) {
  if (!(ratio >= 0.0f && ratio < 1.0f)) throw ConfigError("prune ratio must lie in [0, 1)");
  TransformerWeights out = w;
  if (granularity == PruneGranularity::kWeightMagnitude) {
    for (auto& e : out.entries()) {
      if (!e.is_embedding && e.tensor->rank() == 2) prune_tensor(*e.tensor, ratio);
    }
    return out;
  }
  for (auto& b : out.blocks) {
    const bool bias = w.config.attn_bias;
    prune_rows(b.w_q, bias ? &b.b_q : nullptr, ratio);
    prune_rows(b.w_k, bias ? &b.b_k : nullptr, ratio);
    prune_rows(b.w_v, bias ? &b.b_v : nullptr, ratio);
    prune_rows(b.w_a, bias ? &b.b_a : nullptr, ratio);
    prune_rows(b.w_1, &b.b_1, ratio);
    prune_rows(b.w_2, &b.b_2, ratio);
  }
  return out;
}

void quantize_tensor(Tensor& t, std::uint32_t bits) {
  if (bits < 1 || bits > 8) throw ConfigError("quantization bits must lie in [1, 8]");
  if (t.empty()) return;
  if (bits == 1) {
    double total = 0.0;
    for (float v : t.data()) total += std::fabs(v);
    const auto m = static_cast<float>(total / static_cast<double>(t.size()));
    for (float& v : t.data()) v = v > 0.0f ? m : (v < 0.0f ? -m : 0.0f);
    return;
  }
  float peak = 0.0f;
  for (float v : t.data()) peak = std::max(peak, std::fabs(v));
  if (peak == 0.0f) return;
  const double levels = std::ldexp(1.0, static_cast<int>(bits) - 1) - 1.0;
  const double step = static_cast<double>(peak) / levels;
  for (float& v : t.data()) {
    const double q = std::clamp(std::nearbyint(static_cast<double>(v) / step), -levels, levels);
    v = static_cast<float>(q * step);
  }
}

TransformerWeights quantize(const TransformerWeights& w, std::uint32_t bits) {
  TransformerWeights out = w;
  for (auto& e : out.entries()) {
    if (e.tensor->rank() == 2) quantize_tensor(*e.tensor, bits);
  }
  return out;
}

// ---- black-box access -------------------------------------------------------

Tensor FeatureOracle::query(const TokenBatch& batch) const {
  queries_ += batch.size();
  return backbone_features(model_, embed_tokens(model_, batch), batch.seq_len);
}

ExtractResult extract_substitute(const FeatureOracle& oracle, const ModelConfig& config, const Dataset& queries,
                                 const Dataset& held_out, const AttackConfig& cfg) {
  if (queries.size() == 0 || held_out.size() == 0) throw InputError("extraction attack needs queries and held-out data");
  if (config.d != oracle.d()) throw DimensionError("substitute width differs from the oracle's feature width");
  ExtractResult r;
  Rng init_rng = Rng(cfg.seed).split("substitute");
  r.substitute = TransformerWeights::init(config, init_rng);
  TransformerWeights& sub = r.substitute;
  const Tensor targets = oracle.query(queries.all());
  const std::size_t n = queries.seq_len;
  TrainableScope scope(sub.all_params());
  Optimizer opt({OptimizerKind::kAdam, cfg.learning_rate}, sub.all_params());
  Rng rng = Rng(cfg.seed).split("extract-batches");
  long step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    for_each_batch(queries.size(), cfg.batch_size, rng, [&](const std::vector<std::size_t>& rows) {
      const Dataset b = queries.subset(rows);
      std::vector<float> t;
      t.reserve(rows.size() * n * config.d);
      for (std::size_t row : rows) {
        const auto src = targets.data().subspan(row * n * config.d, n * config.d);
        t.insert(t.end(), src.begin(), src.end());
      }
      Tape tape;
      Var f = forward_backbone(tape, embed(tape, sub, b.all()), sub, n);
      Var target = tape.constant(Tensor({rows.size() * n, config.d}, std::move(t)));
      Var l = scale(mean(row_cosine(f, target)), -1.0f);
      const double v = l.value()[0];
      require_finite(v, "extraction loss", step++);
      tape.backward(l);
      opt.step();
      r.losses.push_back(v);
    });
  }
  const Tensor reference = oracle.query(held_out.all());
  Tape tape;
  Var f = forward_backbone(tape, embed(tape, std::as_const(sub), held_out.all()), std::as_const(sub), held_out.seq_len);
  r.similarity = mean(row_cosine(f, tape.constant(reference))).value()[0];
  return r;
}

// ---- adaptive attacks -------------------------------------------------------

RandomSearchResult random_search(const KeyScore& score, std::size_t d, std::size_t n_heads, PermutationFamily family,
                                 const Dataset& small_set, const Dataset& full_set, const AttackConfig& cfg,
                                 const std::vector<PermutationSpec>& planted) {
  if (small_set.size() == 0 || full_set.size() == 0) throw InputError("random search needs non-empty sets");
  RandomSearchResult r;
  Rng rng = Rng(cfg.seed).split("random-search");
  auto attempt = [&](const PermutationSpec& spec) {
    ++r.tried;
    const double small = score(spec, small_set);
    if (small <= cfg.hit_threshold) return;
    ++r.passed_small;
    const double full = score(spec, full_set);
    r.best_wr = std::max(r.best_wr, full);
    if (full > cfg.hit_threshold) {
      ++r.hits;
      r.found.push_back(spec);
    }
  };
  for (const auto& p : planted) attempt(p);
  for (std::size_t i = 0; i < cfg.budget; ++i) attempt(sample(rng, d, n_heads, family));
  return r;
}

SoftPermutation SoftPermutation::random(std::size_t d, std::size_t n_heads, Rng& rng) {
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("d must be divisible by n_heads");
  const std::size_t m = d / n_heads;
  SoftPermutation p;
  p.d = d;
  p.n_heads = n_heads;
  for (std::size_t b = 0; b < n_heads; ++b) {
    Tensor t({m, m});
    for (float& v : t.data()) v = rng.normal();
    p.within.push_back(std::move(t));
  }
  p.heads = Tensor({n_heads, n_heads});
  for (float& v : p.heads.data()) v = rng.normal();
  return p;
}

SoftPermutation SoftPermutation::planted(const PermutationSpec& spec, float peak) {
  spec.validate();
  const std::size_t m = spec.head_dim();
  SoftPermutation p;
  p.d = spec.d;
  p.n_heads = spec.n_heads;
  for (std::size_t b = 0; b < spec.n_heads; ++b) {
    Tensor t({m, m});
    for (std::size_t w = 0; w < m; ++w) t.at(w, spec.within_head[b][w]) = peak;
    p.within.push_back(std::move(t));
  }
  p.heads = Tensor({spec.n_heads, spec.n_heads});
  for (std::size_t b = 0; b < spec.n_heads; ++b) p.heads.at(b, spec.head_order[b]) = peak;
  return p;
}

std::vector<Tensor*> SoftPermutation::params() {
  std::vector<Tensor*> out;
  for (auto& t : within) out.push_back(&t);
  out.push_back(&heads);
  return out;
}

Var soft_matrix(Tape& tape, SoftPermutation& p, float temperature, Rng* rng) {
  if (!(temperature > 0.0f)) throw ConfigError("temperature must be positive");
  const std::size_t d = p.d, h = p.n_heads, m = d / h;
  // R[(b', w'), w'] = 1 spreads a within-block map over every source block.
  Tensor r({d, m});
  Tensor e({d, h});
  for (std::size_t b = 0; b < h; ++b) {
    for (std::size_t w = 0; w < m; ++w) {
      r.at(b * m + w, w) = 1.0f;
      e.at(b * m + w, b) = 1.0f;
    }
  }
  Var rv = tape.constant(r);
  std::optional<Var> u;
  for (std::size_t b = 0; b < h; ++b) {
    Var sw = softmax_rows(noisy_logits(tape, p.within[b], temperature, rng));
    Tensor c({m, d});
    for (std::size_t w = 0; w < m; ++w) c.at(w, b * m + w) = 1.0f;
    Var term = matmul(matmul(rv, transpose(sw)), tape.constant(std::move(c)));
    u = u ? add(*u, term) : term;
  }
  Var sh = softmax_rows(noisy_logits(tape, p.heads, temperature, rng));
  Var ev = tape.constant(e);
  Var v = matmul(matmul(ev, transpose(sh)), transpose(ev));
  return mul(*u, v);
}

Var orthogonality_penalty(Var a) {
  Var gram = matmul(transpose(a), a);
  Var eye = a.tape->constant(identity_matrix(a.value().cols()));
  return sum(square(sub(eye, gram)));
}

PermutationSpec project(const SoftPermutation& p, Rng& rng, std::size_t* repaired) {
  std::size_t fixed = 0;
  bool collapsed = false;
  PermutationSpec s;
  s.d = p.d;
  s.n_heads = p.n_heads;
  s.head_order = project_rows(p.heads, rng, fixed, collapsed);
  for (const auto& t : p.within) s.within_head.push_back(project_rows(t, rng, fixed, collapsed));
  if (repaired != nullptr) *repaired = fixed;
  s.validate();
  return s;
}

GradientSearchResult gradient_search(const TransformerWeights& w, const BundleS& bundle, const Dataset& data,
                                     const AttackConfig& cfg, std::optional<SoftPermutation> init) {
  if (data.size() == 0) throw InputError("gradient search needs data");
  Rng rng = Rng(cfg.seed).split("gradient-search");
  Rng init_rng = rng.split("init");
  SoftPermutation p = init ? std::move(*init) : SoftPermutation::random(w.config.d, w.config.n_heads, init_rng);
  if (p.d != w.config.d || p.n_heads != w.config.n_heads) throw DimensionError("soft permutation does not fit the model");
  std::vector<std::size_t> rows(std::min(cfg.search_samples, data.size()));
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  const Dataset set = data.subset(rows);
  const std::size_t n = set.seq_len;
  GradientSearchResult r;
  {
    TrainableScope scope(p.params());
    Optimizer opt({OptimizerKind::kAdam, cfg.search_lr}, p.params());
    Rng batches = rng.split("batches");
    Rng noise = rng.split("gumbel");
    long step = 0;
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      for_each_batch(set.size(), cfg.batch_size, batches, [&](const std::vector<std::size_t>& idx) {
        const Dataset b = set.subset(idx);
        Tape tape;
        Var a = soft_matrix(tape, p, cfg.temperature, &noise);
        Var z = embed(tape, w, b.all());
        Var f = forward_backbone(tape, matmul(z, a), w, n);
        Var decoded = forward_head(tape, matmul(f, transpose(a)), bundle.decoder, n);
        Var l = add(loss_corr(bundle.sk, decoded), scale(orthogonality_penalty(a), cfg.alpha));
        const double v = l.value()[0];
        require_finite(v, "search loss", step++);
        tape.backward(l);
        opt.step();
        r.losses.push_back(v);
      });
    }
  }
  Rng repair = rng.split("repair");
  std::size_t fixed = 0;
  bool collapsed = false;
  r.candidate.d = p.d;
  r.candidate.n_heads = p.n_heads;
  r.candidate.head_order = project_rows(p.heads, repair, fixed, collapsed);
  r.degenerate = collapsed;
  for (const auto& t : p.within) {
    r.candidate.within_head.push_back(project_rows(t, repair, fixed, collapsed));
    r.degenerate = r.degenerate || collapsed;
  }
  r.repaired = fixed;
  r.candidate.validate();
  Tape tape;
  r.penalty = orthogonality_penalty(soft_matrix(tape, p, cfg.temperature, nullptr)).value()[0];
  return r;
}

TransformerWeights adaptive_removal(const TransformerWeights& w, const BundleS& bundle, const PermutationSpec& candidate,
                                    const Dataset& data, const AttackConfig& cfg, std::vector<double>* losses) {
  if (data.size() == 0) throw InputError("removal needs data");
  if (candidate.d != w.config.d) throw DimensionError("candidate permutation does not fit the model");
  TransformerWeights out = w;
  const std::size_t n = data.seq_len;
  TrainableScope scope(out.backbone_params());
  Optimizer opt({OptimizerKind::kAdam, cfg.learning_rate}, out.backbone_params());
  Rng rng = Rng(cfg.seed).split("adaptive-removal");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t pos = order.size();
  for (std::size_t it = 0; it < cfg.steps; ++it) {
    std::vector<std::size_t> rows;
    while (rows.size() < std::min(cfg.batch_size, data.size())) {
      if (pos == order.size()) {
        rng.shuffle(order);
        pos = 0;
      }
      rows.push_back(order[pos++]);
    }
    const Dataset b = data.subset(rows);
    Tape tape;
    Var z = tape.constant(embed_tokens(w, b.all()));
    Var reference = forward_backbone(tape, z, w, n);
    Var clean = forward_backbone(tape, z, out, n);
    Var keyed = permuted_forward(tape, z, out, candidate, n);
    Var l = add(loss_ds(reference, clean, n), loss_uncorr(bundle.sk, forward_head(tape, keyed, bundle.decoder, n)));
    const double v = l.value()[0];
    require_finite(v, "removal loss", static_cast<long>(it));
    tape.backward(l);
    opt.step();
    if (losses != nullptr) losses->push_back(v);
  }
  return out;
}

TransformerWeights overwrite(const TransformerWeights& w, const AnyBundle& original, AnyBundle& replacement,
                             const Dataset& data) {
  if (bundle_scheme(original) == bundle_scheme(replacement)) {
    const auto same = std::visit(
        [&](const auto& a) {
          using T = std::decay_t<decltype(a)>;
          if constexpr (std::is_same_v<T, TriggerBundle>) {
            return a.config.tokens == std::get<TriggerBundle>(replacement).config.tokens;
          } else {
            return a.spec == std::get<T>(replacement).spec;
          }
        },
        original);
    if (same) throw ContractViolation("overwrite must use a key different from the original");
  }
  if (auto* b = std::get_if<BundleB>(&replacement)) {
    TransformerWeights out = w;
    embed_b(out, *b, data);
    return out;
  }
  if (auto* s = std::get_if<BundleS>(&replacement)) {
    SessionS session = start_session_s(w, *s);
    embed_s(session, data);
    *s = session.bundle;
    return session.watermarked;
  }
  throw InputError("overwrite applies to TokenMark bundles only");
}

// ---- harness ----------------------------------------------------------------

WRReport verify(const TransformerWeights& w, const AnyBundle& bundle, const PermutationSpec& spec, const Dataset& data) {
  return std::visit(
      [&](const auto& b) -> WRReport {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, BundleB>) {
          return extract_b(w, b, spec, data);
        } else if constexpr (std::is_same_v<T, BundleS>) {
          return extract_s(w, b, spec, data);
        } else {
          return extract_trigger(w, b, data);
        }
      },
      bundle);
}

WRReport verify(const TransformerWeights& w, const AnyBundle& bundle, const Dataset& data) {
  return std::visit(
      [&](const auto& b) -> WRReport {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, TriggerBundle>) {
          return extract_trigger(w, b, data);
        } else {
          return verify(w, bundle, b.spec, data);
        }
      },
      bundle);
}

void to_json(nlohmann::json& j, const SubjectResult& r) {
  j = nlohmann::json{{"label", r.label},
                     {"scheme", scheme_name(r.scheme)},
                     {"wr_before", r.wr_before},
                     {"wr_after", r.wr_after},
                     {"accuracy_before", r.accuracy_before},
                     {"accuracy_after", r.accuracy_after},
                     {"details", r.details}};
  if (!r.wr_per_epoch.empty()) j["wr_per_epoch"] = r.wr_per_epoch;
  if (!r.accuracy_per_epoch.empty()) j["accuracy_per_epoch"] = r.accuracy_per_epoch;
}

void to_json(nlohmann::json& j, const AttackReport& r) {
  j = nlohmann::json{{"attack", attack_name(r.config.kind)},
                     {"config", r.config},
                     {"subjects", r.subjects},
                     {"cost_steps", r.cost_steps},
                     {"details", r.details}};
}

AttackReport run_attack(const AttackConfig& cfg, const std::vector<Subject>& subjects, const AttackData& data) {
  cfg.validate();
  AttackReport report;
  report.config = cfg;
  auto base_result = [&](const Subject& s) {
    SubjectResult r;
    r.label = s.label;
    r.scheme = bundle_scheme(s.bundle);
    r.wr_before = verify(s.model, s.bundle, data.extraction).wr;
    return r;
  };

  switch (cfg.kind) {
    case AttackKind::kFinetune: {
      DatasetConfig task = data.task;
      task.task_seed = cfg.task_seed;
      const std::uint32_t vocab = subjects.empty() ? 0 : subjects.front().model.config.vocab_size;
      const Dataset train = make_dataset(task, vocab, cfg.task_samples, Rng(cfg.seed).split("finetune-train").seed());
      const Dataset eval = make_dataset(task, vocab, std::max<std::size_t>(cfg.task_samples / 4, 1),
                                        Rng(cfg.seed).split("finetune-eval").seed());
      for (const auto& s : subjects) {
        SubjectResult r = base_result(s);
        r.accuracy_before = downstream_accuracy(s.model, s.head, data);
        TransformerWeights w = s.model;
        Rng head_rng = Rng(cfg.seed).split("finetune-head");
        TaskHead head = make_downstream_head(w.config.d, task.n_classes, head_rng);
        TrainConfig tc;
        tc.epochs = cfg.epochs;
        tc.batch_size = cfg.batch_size;
        tc.learning_rate = cfg.learning_rate;
        tc.seed = cfg.seed;
        train_classifier(w, head, train, tc, [&](std::size_t) {
          r.wr_per_epoch.push_back(verify(w, s.bundle, data.extraction).wr);
          r.accuracy_per_epoch.push_back(evaluate_classifier(w, head, eval).accuracy);
        });
        r.wr_after = r.wr_per_epoch.empty() ? r.wr_before : r.wr_per_epoch.back();
        r.accuracy_after = r.accuracy_per_epoch.empty() ? r.accuracy_before : r.accuracy_per_epoch.back();
        r.details["accuracy_after_task"] = "finetune";
        report.cost_steps += cfg.epochs * ((train.size() + cfg.batch_size - 1) / cfg.batch_size);
        report.subjects.push_back(std::move(r));
      }
      break;
    }
    case AttackKind::kPrune:
    case AttackKind::kQuantize: {
      for (const auto& s : subjects) {
        SubjectResult r = base_result(s);
        r.accuracy_before = downstream_accuracy(s.model, s.head, data);
        const TransformerWeights w = cfg.kind == AttackKind::kPrune ? prune(s.model, cfg.ratio, cfg.granularity)
                                                                    : quantize(s.model, cfg.bits);
        r.wr_after = verify(w, s.bundle, data.extraction).wr;
        r.accuracy_after = downstream_accuracy(w, s.head, data);
        report.subjects.push_back(std::move(r));
      }
      break;
    }
    case AttackKind::kExtract: {
      for (const auto& s : subjects) {
        SubjectResult r = base_result(s);
        const FeatureOracle oracle(s.model);
        ExtractResult ex = extract_substitute(oracle, s.model.config, data.attacker, data.task_eval, cfg);
        r.wr_after = verify(ex.substitute, s.bundle, data.extraction).wr;
        r.accuracy_before = probe_accuracy(s.model, data, cfg);
        r.accuracy_after = probe_accuracy(ex.substitute, data, cfg);
        r.details["similarity"] = ex.similarity;
        r.details["queries"] = oracle.queries();
        r.details["final_loss"] = ex.losses.empty() ? 0.0 : ex.losses.back();
        r.details["accuracy_metric"] = "linear_probe";
        report.cost_steps += ex.losses.size();
        report.subjects.push_back(std::move(r));
      }
      break;
    }
    case AttackKind::kOverwrite: {
      for (const auto& s : subjects) {
        if (bundle_scheme(s.bundle) == Scheme::kTriggerBaseline) continue;
        SubjectResult r = base_result(s);
        r.accuracy_before = downstream_accuracy(s.model, s.head, data);
        AnyBundle fresh = replacement_bundle(s.bundle, s.model.config, data, cfg.overwrite_seed);
        const TransformerWeights w = overwrite(s.model, s.bundle, fresh, data.attacker);
        r.wr_after = verify(w, s.bundle, data.extraction).wr;
        r.accuracy_after = downstream_accuracy(w, s.head, data);
        r.details["wr_new_key"] = verify(w, fresh, data.extraction).wr;
        r.details["new_spec"] = std::visit(
            [](const auto& b) -> nlohmann::json {
              if constexpr (std::is_same_v<std::decay_t<decltype(b)>, TriggerBundle>) {
                return nullptr;
              } else {
                return b.spec;
              }
            },
            fresh);
        report.subjects.push_back(std::move(r));
      }
      break;
    }
    case AttackKind::kRandomSearch: {
      for (const auto& s : subjects) {
        if (bundle_scheme(s.bundle) == Scheme::kTriggerBaseline) continue;
        SubjectResult r = base_result(s);
        const Dataset small = data.attacker.slice(0, std::min(cfg.small_set, data.attacker.size()));
        const KeyScore score = [&](const PermutationSpec& spec, const Dataset& set) {
          return verify(s.model, s.bundle, spec, set).wr;
        };
        const PermutationFamily family = std::visit(
            [](const auto& b) {
              if constexpr (std::is_same_v<std::decay_t<decltype(b)>, TriggerBundle>) {
                return PermutationFamily::kHeadsAndWithin;
              } else {
                return b.family;
              }
            },
            s.bundle);
        const RandomSearchResult rs = random_search(score, s.model.config.d, s.model.config.n_heads, family, small,
                                                    data.extraction, cfg);
        r.wr_after = rs.best_wr;
        r.details["tried"] = rs.tried;
        r.details["passed_small"] = rs.passed_small;
        r.details["hits"] = rs.hits;
        r.details["found"] = rs.found;
        report.cost_steps += rs.tried;
        report.subjects.push_back(std::move(r));
      }
      break;
    }
    case AttackKind::kGradientSearch:
    case AttackKind::kAdaptiveRemoval: {
      const auto at = first_of(subjects, Scheme::kS);
      if (!at) throw InputError(fmt::format("{} needs a TokenMark-S subject", attack_name(cfg.kind)));
      const Subject& s = subjects[*at];
      const BundleS& bundle = std::get<BundleS>(s.bundle);
      SubjectResult r = base_result(s);
      GradientSearchResult gs;
      double best = -1.0;
      nlohmann::json tries = nlohmann::json::array();
      for (std::size_t k = 0; k < cfg.restarts; ++k) {
        AttackConfig one = cfg;
        one.seed = Rng(cfg.seed).split(k).seed();
        GradientSearchResult g = gradient_search(s.model, bundle, data.attacker, one);
        const double own = verify(s.model, s.bundle, g.candidate, data.attacker).wr;
        tries.push_back(own);
        report.cost_steps += g.losses.size();
        if (own > best) {
          best = own;
          gs = std::move(g);
        }
      }
      const double wr_candidate = verify(s.model, s.bundle, gs.candidate, data.extraction).wr;
      r.details["attacker_wr_per_restart"] = tries;
      r.details["candidate"] = gs.candidate;
      r.details["wr_candidate"] = wr_candidate;
      r.details["overlap"] = overlap(gs.candidate, bundle.spec);
      r.details["repaired"] = gs.repaired;
      r.details["degenerate"] = gs.degenerate;
      r.details["final_loss"] = gs.losses.empty() ? 0.0 : gs.losses.back();
      r.details["penalty"] = gs.penalty;
      r.accuracy_before = downstream_accuracy(s.model, s.head, data);
      if (cfg.kind == AttackKind::kGradientSearch) {
        r.wr_after = r.wr_before;
        r.accuracy_after = r.accuracy_before;
      } else {
        const TransformerWeights w = adaptive_removal(s.model, bundle, gs.candidate, data.attacker, cfg);
        r.wr_after = verify(w, s.bundle, data.extraction).wr;
        r.details["wr_candidate_after"] = verify(w, s.bundle, gs.candidate, data.extraction).wr;
        r.accuracy_after = downstream_accuracy(w, s.head, data);
        report.cost_steps += cfg.steps;
      }
      report.subjects.push_back(std::move(r));
      break;
    }
  }
  return report;
}

std::vector<SweepRow> run_sweep(const AttackConfig& base, const std::vector<double>& strengths,
                                const std::vector<Subject>& subjects, const AttackData& data,
                                std::vector<AttackReport>* reports) {
  std::vector<SweepRow> rows;
  auto fill = [&](SweepRow& row, const AttackReport& rep, auto wr_of, auto acc_of) {
    double acc = 0.0;
    for (const auto& r : rep.subjects) {
      const double wr = wr_of(r);
      switch (r.scheme) {
        case Scheme::kB:
          if (!row.wr_b) row.wr_b = wr;
          break;
        case Scheme::kS:
          if (!row.wr_s) row.wr_s = wr;
          break;
        case Scheme::kTriggerBaseline:
          if (!row.wr_trigger) row.wr_trigger = wr;
          break;
      }
      acc += acc_of(r);
    }
    row.downstream_acc = rep.subjects.empty() ? 0.0 : acc / static_cast<double>(rep.subjects.size());
  };

  if (base.kind == AttackKind::kFinetune) {
    AttackConfig cfg = base;
    std::size_t top = 0;
    for (double s : strengths) {
      if (s < 0.0 || s != std::floor(s)) throw ConfigError("finetune sweep strengths must be whole epoch counts");
      top = std::max(top, static_cast<std::size_t>(s));
    }
    cfg.epochs = top;
    const AttackReport rep = run_attack(cfg, subjects, data);
    for (double s : strengths) {
      const auto e = static_cast<std::size_t>(s);
      SweepRow row;
      row.strength = s;
      fill(
          row, rep, [&](const SubjectResult& r) { return e == 0 ? r.wr_before : r.wr_per_epoch.at(e - 1); },
          [&](const SubjectResult& r) { return e == 0 ? r.accuracy_before : r.accuracy_per_epoch.at(e - 1); });
      rows.push_back(row);
    }
    if (reports != nullptr) reports->push_back(rep);
    return rows;
  }

  for (double s : strengths) {
    AttackConfig cfg = base;
    if (base.kind == AttackKind::kPrune) {
      cfg.ratio = static_cast<float>(s);
    } else if (base.kind == AttackKind::kQuantize) {
      if (s < 1.0 || s != std::floor(s)) throw ConfigError("quantize sweep strengths must be whole bit widths");
      cfg.bits = static_cast<std::uint32_t>(s);
    } else {
      throw ConfigError(fmt::format("sweep does not support attack '{}'", attack_name(base.kind)));
    }
    const AttackReport rep = run_attack(cfg, subjects, data);
    SweepRow row;
    row.strength = s;
    fill(
        row, rep, [](const SubjectResult& r) { return r.wr_after; },
        [](const SubjectResult& r) { return r.accuracy_after; });
    rows.push_back(row);
    if (reports != nullptr) reports->push_back(rep);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  auto cell = [](const std::optional<double>& v) { return v ? fmt::format("{}", *v) : std::string(); };
  std::string out = "strength,wr_tokenmark_b,wr_tokenmark_s,wr_trigger_baseline,downstream_acc\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{}\n", r.strength, cell(r.wr_b), cell(r.wr_s), cell(r.wr_trigger), r.downstream_acc);
  }
  return out;
}

}  // namespace tokenmark
