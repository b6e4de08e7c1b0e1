// SPDX-License-Identifier: Apache-2.0
#include "tokenmark/train.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "tokenmark/errors.hpp"

namespace tokenmark {

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"train_embedding", c.train_embedding},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
  if (j.contains("train_embedding")) j.at("train_embedding").get_to(c.train_embedding);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

void to_json(nlohmann::json& j, const FidelityReport& r) {
  j = nlohmann::json{{"loss_original", r.loss_original},
                     {"loss_watermarked", r.loss_watermarked},
                     {"loss_gap", r.loss_gap},
                     {"accuracy_original", r.accuracy_original},
                     {"accuracy_watermarked", r.accuracy_watermarked},
                     {"accuracy_gap", r.accuracy_gap}};
}

TrainableScope::TrainableScope(std::vector<Tensor*> params) : params_(std::move(params)) {
  for (Tensor* p : params_) p->set_requires_grad(true);
}

TrainableScope::~TrainableScope() {
  for (Tensor* p : params_) p->set_requires_grad(false);
}

void for_each_batch(std::size_t n, std::size_t batch_size, Rng& rng,
                    const std::function<void(const std::vector<std::size_t>& rows)>& fn) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  for (std::size_t s = 0; s < n; s += batch_size) {
    std::vector<std::size_t> rows(order.begin() + s, order.begin() + std::min(n, s + batch_size));
    fn(rows);
  }
}

void require_finite(double value, const char* what, long iteration) {
  if (!std::isfinite(value)) throw TrainingFault(fmt::format("{} diverged to {}", what, value), iteration);
}

TaskHead make_downstream_head(std::size_t d, std::size_t n_classes, Rng& rng) {
  return TaskHead::linear(HeadKind::kDownstream, Reduction::kMeanPool, d, n_classes, rng,
                          1.0f / std::sqrt(static_cast<float>(d)));
}

std::vector<double> train_classifier(TransformerWeights& w, TaskHead& head, const Dataset& data,
                                     const TrainConfig& config, const EpochHook& hook, const BatchLoss& extra) {
  if (data.size() == 0) throw InputError("training set is empty");
  std::vector<Tensor*> params = config.train_embedding ? w.all_params() : w.backbone_params();
  for (Tensor* p : head.params()) params.push_back(p);
  TrainableScope scope(params);
  Optimizer opt({OptimizerKind::kAdam, config.learning_rate}, params);
  Rng rng = Rng(config.seed).split("train-classifier");
  std::vector<double> epoch_loss;
  long step = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    double total = 0.0;
    std::size_t count = 0;
    for_each_batch(data.size(), config.batch_size, rng, [&](const std::vector<std::size_t>& rows) {
      const Dataset b = data.subset(rows);
      Tape tape;
      Var z = config.train_embedding ? embed(tape, w, b.all()) : embed(tape, std::as_const(w), b.all());
      Var f = forward_backbone(tape, z, w, b.seq_len);
      Var l = cross_entropy(forward_head(tape, f, head, b.seq_len), b.labels);
      if (extra) {
        if (auto more = extra(tape, w, b)) l = add(l, *more);
      }
      const double v = l.value()[0];
      require_finite(v, "classifier loss", step);
      tape.backward(l);
      opt.step();
      total += v * rows.size();
      count += rows.size();
      ++step;
    });
    epoch_loss.push_back(total / static_cast<double>(count));
    if (hook) hook(e + 1);
  }
  return epoch_loss;
}

namespace {

EvalResult evaluate_logits(const Tensor& logits, std::span<const std::size_t> labels) {
  Tape tape;
  EvalResult r;
  r.loss = cross_entropy(tape.constant(logits), labels).value()[0];
  std::size_t hits = 0;
  const std::size_t c = logits.cols();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = logits.data().data() + i * c;
    hits += static_cast<std::size_t>(std::max_element(row, row + c) - row) == labels[i];
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(labels.size());
  return r;
}

constexpr std::size_t kEvalChunk = 256;

// Reduced backbone features for the whole set, computed in chunks.
Tensor pooled_features(const TransformerWeights& w, const Dataset& data, Reduction reduction) {
  std::vector<float> out;
  for (std::size_t s = 0; s < data.size(); s += kEvalChunk) {
    const std::size_t e = std::min(data.size(), s + kEvalChunk);
    Tape tape;
    Var f = forward_backbone(tape, embed(tape, w, data.batch(s, e)), w, data.seq_len);
    const Tensor& r = reduce_tokens(f, reduction, data.seq_len).value();
    out.insert(out.end(), r.data().begin(), r.data().end());
  }
  return Tensor({data.size(), w.config.d}, std::move(out));
}

}  // namespace

EvalResult evaluate_classifier(const TransformerWeights& w, const TaskHead& head, const Dataset& data) {
  if (data.size() == 0) throw InputError("evaluation set is empty");
  const Tensor feats = pooled_features(w, data, head.reduction);
  Tape tape;
  TaskHead flat = head;
  flat.reduction = Reduction::kFirstToken;
  const Tensor logits = forward_head(tape, tape.constant(feats), std::as_const(flat), 1).value().detached();
  return evaluate_logits(logits, data.labels);
}

TaskHead train_probe(const TransformerWeights& w, const Dataset& data, std::size_t n_classes,
                     const TrainConfig& config) {
  if (data.size() == 0) throw InputError("probe training set is empty");
  Rng rng = Rng(config.seed).split("probe");
  TaskHead head = make_downstream_head(w.config.d, n_classes, rng);
  const Tensor feats = pooled_features(w, data, Reduction::kMeanPool);
  TaskHead flat = head;
  flat.reduction = Reduction::kFirstToken;
  TrainableScope scope(flat.params());
  Optimizer opt({OptimizerKind::kAdam, config.learning_rate}, flat.params());
  const std::size_t d = w.config.d;
  long step = 0;
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for_each_batch(data.size(), config.batch_size, rng, [&](const std::vector<std::size_t>& rows) {
      Tensor x({rows.size(), d});
      std::vector<std::size_t> y(rows.size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(feats.data().begin() + rows[i] * d, d, x.data().begin() + i * d);
        y[i] = data.labels[rows[i]];
      }
      Tape tape;
      Var l = cross_entropy(forward_head(tape, tape.constant(std::move(x)), flat, 1), y);
      require_finite(l.value()[0], "probe loss", step++);
      tape.backward(l);
      opt.step();
    });
  }
  head.layers = flat.layers;
  for (Tensor* p : head.params()) p->set_requires_grad(false);
  return head;
}

FidelityReport fidelity_gap(const TransformerWeights& original, const TransformerWeights& watermarked,
                            const Dataset& train, const Dataset& eval, std::size_t n_classes,
                            const TrainConfig& config) {
  const TaskHead h0 = train_probe(original, train, n_classes, config);
  const TaskHead h1 = train_probe(watermarked, train, n_classes, config);
  const EvalResult r0 = evaluate_classifier(original, h0, eval);
  const EvalResult r1 = evaluate_classifier(watermarked, h1, eval);
  FidelityReport out;
  out.loss_original = r0.loss;
  out.loss_watermarked = r1.loss;
  out.loss_gap = std::abs(r1.loss - r0.loss);
  out.accuracy_original = r0.accuracy;
  out.accuracy_watermarked = r1.accuracy;
  out.accuracy_gap = r1.accuracy - r0.accuracy;
  return out;
}

}  // namespace tokenmark
