// SPDX-License-Identifier: Apache-2.0
// Command-line runner: train, embed, extract, attack, verify-equivariance, sweep.
#include <algorithm>
#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "tokenmark/equivariance.hpp"
#include "tokenmark/errors.hpp"
#include "tokenmark/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tokenmark;

namespace {

constexpr float kEquivarianceTolerance = 1e-4f;

// Raised for a deviation above tolerance; maps to exit code 1.
struct ToleranceFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string model;
  std::string head;
  std::string bundle;
  std::string scheme;
  std::string reference;
  std::string kind;
  std::optional<std::size_t> set_size;
  std::size_t trials = 100;
  bool sweep_configs = true;
  bool inject_cross_head = false;
};

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

struct Run {
  ExperimentConfig config;
  fs::path out;
  RunManifest manifest;

  Run(const Options& o, const std::string& command) {
    config = o.config.empty() ? parse_experiment(json::object()) : load_experiment(o.config);
    if (!o.out.empty()) config.out = o.out;
    out = config.out;
    fs::create_directories(out);
    manifest.command = command;
  }

  // The hash is taken after command-line overrides are applied.
  void seal() { manifest.config_hash = config_hash(config); }

  void write_json(const std::string& name, const json& j) {
    require_finite_json(j);
    write_text_file(out / name, j.dump(2) + "\n");
    manifest.add_artifact(out / name);
  }

  void write_text(const std::string& name, const std::string& text) {
    write_text_file(out / name, text);
    manifest.add_artifact(out / name);
  }

  template <class Save, class T>
  void write_binary(const std::string& name, Save save, const T& value) {
    save(out / name, value);
    manifest.add_artifact(out / name);
  }

  void finish() {
    write_text_file(out / fmt::format("manifest_{}.json", manifest.command), json(manifest).dump(2) + "\n");
    spdlog::info("wrote {} artifacts to {}", manifest.artifacts.size(), out.string());
  }
};

fs::path require_file(const std::string& path, const char* flag) {
  if (path.empty()) throw InputError(fmt::format("{} is required", flag));
  if (!fs::is_regular_file(path)) throw InputError(fmt::format("{} {}: no such file", flag, path));
  return path;
}

std::optional<TaskHead> optional_head(const std::string& explicit_path, const std::string& model_path) {
  if (!explicit_path.empty()) return load_head(require_file(explicit_path, "--head"));
  const fs::path sibling = fs::path(model_path).parent_path() / "head.tkh";
  if (fs::is_regular_file(sibling)) return load_head(sibling);
  return std::nullopt;
}

Scheme checked_scheme(const Options& o, const AnyBundle& bundle) {
  const Scheme actual = bundle_scheme(bundle);
  if (!o.scheme.empty() && parse_scheme(o.scheme) != actual)
    throw InputError(fmt::format("--scheme {} does not match the bundle's scheme {}", o.scheme, scheme_name(actual)));
  return actual;
}

std::string histogram_csv(const std::vector<double>& scores, std::size_t bins) {
  std::string csv = "bin_low,bin_high,count\n";
  if (scores.empty()) return csv;
  const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
  const double lo = *lo_it;
  const double width = std::max(*hi_it - lo, 1e-12) / static_cast<double>(bins);
  std::vector<std::size_t> counts(bins, 0);
  for (double s : scores) counts[std::min(bins - 1, static_cast<std::size_t>((s - lo) / width))]++;
  for (std::size_t b = 0; b < bins; ++b)
    csv += fmt::format("{},{},{}\n", lo + width * static_cast<double>(b), lo + width * static_cast<double>(b + 1),
                       counts[b]);
  return csv;
}

// ---- commands ---------------------------------------------------------------

int cmd_train(const Options& o) {
  Run run(o, "train");
  if (o.seed) run.config.seeds.init = *o.seed;
  run.seal();
  Stopwatch clock;
  const TrainOutcome t = run_train(run.config);
  run.manifest.stage_seconds.emplace_back("train", clock.lap());
  spdlog::info("trained {} epochs: eval accuracy {:.4f}, eval loss {:.4f}", t.epoch_losses.size(), t.eval.accuracy,
               t.eval.loss);
  run.write_binary("model.tkw", save_weights, t.model);
  run.write_binary("head.tkh", save_head, t.head);
  run.write_json("train_report.json", json{{"config_hash", run.manifest.config_hash},
                                           {"epoch_losses", t.epoch_losses},
                                           {"eval_accuracy", t.eval.accuracy},
                                           {"eval_loss", t.eval.loss},
                                           {"train_samples", run.config.train_samples},
                                           {"eval_samples", run.config.eval_samples}});
  run.finish();
  return 0;
}

int cmd_embed(const Options& o) {
  Run run(o, "embed");
  if (!o.scheme.empty()) run.config.scheme = parse_scheme(o.scheme);
  if (o.seed) run.config.seeds.watermark = *o.seed;
  run.seal();
  const TransformerWeights base = load_weights(require_file(o.model, "--model"));
  std::optional<TaskHead> head = optional_head(o.head, o.model);
  if (!head && run.config.scheme == Scheme::kTriggerBaseline)
    throw InputError("the trigger baseline needs the downstream head (--head)");
  Stopwatch clock;
  const EmbedOutcome e = run_embed(run.config, run.config.scheme, base, head.value_or(TaskHead{}));
  const double seconds = clock.lap();
  run.manifest.stage_seconds.emplace_back("embed", seconds);
  spdlog::info("embedded scheme {} in {:.2f} s", scheme_name(run.config.scheme), seconds);

  const Dataset ext = extraction_set(run.config, run.config.extraction_samples);
  const WRReport wr = verify(e.model, e.bundle, ext);
  spdlog::info("WR on the extraction set: {:.4f}", wr.wr);
  run.write_binary("watermarked.tkw", save_weights, e.model);
  run.write_binary("bundle.tkb", save_bundle, e.bundle);
  if (head) run.write_binary("deployed_head.tkh", save_head, e.head);
  json report{{"config_hash", run.manifest.config_hash},
              {"scheme", scheme_name(run.config.scheme)},
              {"losses", e.losses},
              {"wr", wr.wr},
              {"extraction_samples", ext.size()}};
  run.write_json("embed_report.json", report);
  run.finish();
  return 0;
}

int cmd_extract(const Options& o) {
  Run run(o, "extract");
  if (o.seed) run.config.seeds.extraction = *o.seed;
  const std::size_t n = o.set_size.value_or(run.config.extraction_samples);
  if (n == 0) throw InputError("--set-size 0: the extraction set is empty");
  run.config.extraction_samples = n;
  run.seal();
  const TransformerWeights model = load_weights(require_file(o.model, "--model"));
  const AnyBundle bundle = load_bundle(require_file(o.bundle, "--bundle"));
  const Scheme scheme = checked_scheme(o, bundle);
  const Dataset ext = extraction_set(run.config, n);

  Stopwatch clock;
  WRReport report = verify(model, bundle, ext);
  report.model_label = fs::path(o.model).filename().string();
  report.extraction_label = fmt::format("synthetic n={} seed={}", n, run.config.seeds.extraction);
  if (!o.reference.empty()) {
    const TransformerWeights reference = load_weights(require_file(o.reference, "--reference"));
    report.false_positive_rate = verify(reference, bundle, ext).wr;
  }
  run.manifest.stage_seconds.emplace_back("extract", clock.lap());

  fmt::print("{:<22}{}\n", "scheme", scheme_name(scheme));
  fmt::print("{:<22}{}\n", "model", report.model_label);
  fmt::print("{:<22}{}\n", "extraction set", report.extraction_label);
  fmt::print("{:<22}{} / {}\n", "count / total", report.count, report.total);
  fmt::print("{:<22}{:.4f}\n", "WR", report.wr);
  if (scheme == Scheme::kS) fmt::print("{:<22}{:.4f}\n", "threshold", report.threshold);
  else fmt::print("{:<22}{}\n", "target class", report.target);
  if (report.false_positive_rate) fmt::print("{:<22}{:.4f}\n", "FPR (reference)", *report.false_positive_rate);

  std::string scores = "index,score\n";
  for (std::size_t i = 0; i < report.scores.size(); ++i) scores += fmt::format("{},{}\n", i, report.scores[i]);
  run.write_json("extract_report.json", report);
  run.write_text("scores.csv", scores);
  run.write_text("scores_histogram.csv", histogram_csv(report.scores, 20));
  run.finish();
  return 0;
}

std::vector<double> default_strengths(const AttackConfig& a) {
  switch (a.kind) {
    case AttackKind::kFinetune: {
      std::vector<double> s;
      for (std::size_t e = 1; e <= a.epochs; ++e) s.push_back(static_cast<double>(e));
      return s;
    }
    case AttackKind::kPrune:
      return {a.ratio};
    case AttackKind::kQuantize:
      return {static_cast<double>(a.bits)};
    default:
      return {};
  }
}

bool sweepable(AttackKind k) {
  return k == AttackKind::kFinetune || k == AttackKind::kPrune || k == AttackKind::kQuantize;
}

int cmd_attack(const Options& o) {
  Run run(o, "attack");
  if (!o.kind.empty()) run.config.attack.kind = parse_attack(o.kind);
  if (o.seed) run.config.attack.seed = *o.seed;
  run.config.validate();
  run.seal();
  const AttackConfig& cfg = run.config.attack;
  if (!run.config.strengths.empty() && !sweepable(cfg.kind))
    throw ConfigError(fmt::format("/strengths: attack '{}' takes no sweep", attack_name(cfg.kind)));

  const TransformerWeights model = load_weights(require_file(o.model, "--model"));
  const AnyBundle bundle = load_bundle(require_file(o.bundle, "--bundle"));
  const Scheme scheme = checked_scheme(o, bundle);
  std::optional<TaskHead> head = optional_head(o.head, o.model);
  if (!head) throw InputError("--head is required (no head.tkh next to the model)");
  const std::vector<Subject> subjects{{scheme_name(scheme), model, bundle, *head}};
  const AttackData data = attack_data(run.config);

  Stopwatch clock;
  json reports = json::array();
  if (sweepable(cfg.kind)) {
    const std::vector<double> strengths =
        run.config.strengths.empty() ? default_strengths(cfg) : run.config.strengths;
    std::vector<AttackReport> runs;
    const auto rows = run_sweep(cfg, strengths, subjects, data, &runs);
    for (const auto& r : runs) reports.push_back(r);
    run.write_text("attack.csv", sweep_csv(rows));
    for (const auto& row : rows)
      spdlog::info("{} {}: WR {:.4f}, downstream accuracy {:.4f}", attack_name(cfg.kind), row.strength,
                   row.wr_b.value_or(row.wr_s.value_or(row.wr_trigger.value_or(0.0))), row.downstream_acc);
  } else {
    const AttackReport r = run_attack(cfg, subjects, data);
    for (const auto& s : r.subjects)
      spdlog::info("{} on {}: WR {:.4f} -> {:.4f}", attack_name(cfg.kind), s.label, s.wr_before, s.wr_after);
    reports.push_back(r);
  }
  run.manifest.stage_seconds.emplace_back("attack", clock.lap());
  run.write_json("attack_report.json", json{{"config_hash", run.manifest.config_hash}, {"runs", reports}});
  run.finish();
  return 0;
}

int cmd_sweep(const Options& o) {
  Run run(o, "sweep");
  if (o.seed) run.config.seeds.watermark = *o.seed;
  run.seal();
  Stopwatch clock;
  TransformerWeights base;
  TaskHead head;
  if (!o.model.empty()) {
    base = load_weights(require_file(o.model, "--model"));
    std::optional<TaskHead> h = optional_head(o.head, o.model);
    if (!h) throw InputError("--head is required (no head.tkh next to the model)");
    head = std::move(*h);
  } else {
    TrainOutcome t = run_train(run.config);
    spdlog::info("trained base model: eval accuracy {:.4f}", t.eval.accuracy);
    base = std::move(t.model);
    head = std::move(t.head);
    run.manifest.stage_seconds.emplace_back("train", clock.lap());
  }

  std::vector<Subject> subjects;
  for (Scheme s : {Scheme::kB, Scheme::kS, Scheme::kTriggerBaseline}) {
    EmbedOutcome e = run_embed(run.config, s, base, head);
    run.manifest.stage_seconds.emplace_back("embed_" + scheme_name(s), clock.lap());
    subjects.push_back({scheme_name(s), std::move(e.model), std::move(e.bundle), std::move(e.head)});
  }
  const AttackData data = attack_data(run.config);

  struct Plan {
    AttackKind kind;
    std::vector<double> strengths;
  };
  std::vector<Plan> plans;
  if (!run.config.strengths.empty()) {
    if (!sweepable(run.config.attack.kind))
      throw ConfigError(fmt::format("/attack/kind: '{}' takes no sweep", attack_name(run.config.attack.kind)));
    plans.push_back({run.config.attack.kind, run.config.strengths});
  } else {
    plans.push_back({AttackKind::kFinetune, {1, 2, 3, 4, 5}});
    plans.push_back({AttackKind::kPrune, {0.1, 0.2, 0.3, 0.4, 0.5}});
    plans.push_back({AttackKind::kQuantize, {8, 7, 6, 5, 4, 3, 2, 1}});
  }

  json reports = json::object();
  for (const Plan& p : plans) {
    AttackConfig cfg = run.config.attack;
    cfg.kind = p.kind;
    std::vector<AttackReport> runs;
    const auto rows = run_sweep(cfg, p.strengths, subjects, data, &runs);
    run.manifest.stage_seconds.emplace_back("sweep_" + attack_name(p.kind), clock.lap());
    run.write_text(fmt::format("sweep_{}.csv", attack_name(p.kind)), sweep_csv(rows));
    reports[attack_name(p.kind)] = runs;
    spdlog::info("{} sweep: {} rows", attack_name(p.kind), rows.size());
  }
  run.write_json("sweep_report.json", json{{"config_hash", run.manifest.config_hash}, {"sweeps", reports}});
  run.finish();
  return 0;
}

int cmd_verify(const Options& o) {
  Run run(o, "verify-equivariance");
  run.seal();
  if (o.trials == 0) {
    spdlog::warn("trials = 0: nothing checked, vacuous pass");
    run.write_json("equivariance_report.json", json{{"trials", 0}, {"pass", true}});
    run.finish();
    return 0;
  }
  SuiteOptions opts;
  opts.trials = o.trials;
  opts.seed = o.seed.value_or(0);
  opts.sweep_configs = o.sweep_configs;
  opts.inject_cross_head = o.inject_cross_head;
  Stopwatch clock;
  const EquivarianceSuite suite = run_equivariance_suite(run.config.model, opts);
  run.manifest.stage_seconds.emplace_back("suite", clock.lap());

  const bool pass = suite.max_forward < kEquivarianceTolerance && suite.max_backward < kEquivarianceTolerance &&
                    suite.max_train_step < kEquivarianceTolerance;
  fmt::print("{:<26}{}\n", "trials", suite.trials);
  fmt::print("{:<26}{:.3e}\n", "max forward deviation", suite.max_forward);
  fmt::print("{:<26}{:.3e}\n", "max backward deviation", suite.max_backward);
  for (const auto& [group, dev] : suite.backward_by_group) fmt::print("  {:<24}{:.3e}\n", group, dev);
  fmt::print("{:<26}{:.3e}\n", "max train-step deviation", suite.max_train_step);
  fmt::print("{:<26}{:.3e}\n", "cross-head control", suite.negative_control);
  fmt::print("{:<26}{}\n", "result", pass ? "pass" : "FAIL");

  json groups = json::object();
  for (const auto& [group, dev] : suite.backward_by_group) groups[group] = dev;
  run.write_json("equivariance_report.json", json{{"trials", suite.trials},
                                                  {"max_forward", suite.max_forward},
                                                  {"max_backward", suite.max_backward},
                                                  {"max_train_step", suite.max_train_step},
                                                  {"backward_by_group", groups},
                                                  {"negative_control", suite.negative_control},
                                                  {"inject_cross_head", o.inject_cross_head},
                                                  {"tolerance", kEquivarianceTolerance},
                                                  {"pass", pass}});
  run.finish();
  if (!pass) throw ToleranceFailure(fmt::format("equivariance deviation above {}", kEquivarianceTolerance));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_st("tokenmark"));
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"TokenMark experiment runner"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  bool quiet = false;
  app.add_option("--config", o.config, "experiment config (JSON)");
  app.add_option("--seed", o.seed, "override the seed of the command's stage");
  app.add_option("--out", o.out, "output directory");
  app.add_flag("-q,--quiet", quiet, "only print warnings and errors");

  auto* train = app.add_subcommand("train", "pretrain the toy backbone on the synthetic task");
  auto* embed = app.add_subcommand("embed", "embed a watermark into a trained model");
  embed->add_option("--model", o.model, "weight container")->required();
  embed->add_option("--head", o.head, "downstream head (default: head.tkh next to the model)");
  embed->add_option("--scheme", o.scheme, "B, S or trigger_baseline");
  auto* extract = app.add_subcommand("extract", "measure WR of a model under a bundle");
  extract->add_option("--model", o.model)->required();
  extract->add_option("--bundle", o.bundle)->required();
  extract->add_option("--scheme", o.scheme, "expected scheme of the bundle");
  extract->add_option("--set-size", o.set_size, "extraction set size");
  extract->add_option("--reference", o.reference, "unwatermarked model for the false positive rate");
  auto* attack = app.add_subcommand("attack", "attack a watermarked model");
  attack->add_option("--model", o.model)->required();
  attack->add_option("--bundle", o.bundle)->required();
  attack->add_option("--head", o.head, "deployed head (default: deployed_head.tkh or head.tkh next to the model)");
  attack->add_option("--scheme", o.scheme, "expected scheme of the bundle");
  attack->add_option("--kind", o.kind, "attack kind (overrides attack.kind)");
  auto* verify_cmd = app.add_subcommand("verify-equivariance", "forward, backward and train-step equivariance suite");
  verify_cmd->add_option("--trials", o.trials, "random instances")->capture_default_str();
  verify_cmd->add_flag("--sweep-configs,!--base-config", o.sweep_configs,
                       "cycle layer count, width and head count across trials");
  verify_cmd->add_flag("--inject-cross-head", o.inject_cross_head, "use a cross-head permutation (negative control)");
  auto* sweep = app.add_subcommand("sweep", "paired finetune, prune and quantize sweeps over B, S and the trigger baseline");
  sweep->add_option("--model", o.model, "pretrained model (default: train one)");
  sweep->add_option("--head", o.head, "downstream head of --model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (quiet) spdlog::set_level(spdlog::level::warn);

  // attack looks for the deployed head first
  if (attack->parsed() && o.head.empty()) {
    const fs::path deployed = fs::path(o.model).parent_path() / "deployed_head.tkh";
    if (fs::is_regular_file(deployed)) o.head = deployed.string();
  }

  try {
    if (train->parsed()) return cmd_train(o);
    if (embed->parsed()) return cmd_embed(o);
    if (extract->parsed()) return cmd_extract(o);
    if (attack->parsed()) return cmd_attack(o);
    if (verify_cmd->parsed()) return cmd_verify(o);
    if (sweep->parsed()) return cmd_sweep(o);
  } catch (const ToleranceFailure& e) {
    spdlog::error("{}", e.what());
    return 1;
  } catch (const ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return 2;
  } catch (const InputError& e) {
    spdlog::error("input: {}", e.what());
    return 2;
  } catch (const DimensionError& e) {
    spdlog::error("input: {}", e.what());
    return 2;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("file: {}", e.what());
    return 2;
  } catch (const NumericFault& e) {
    spdlog::error("numeric fault: {}", e.what());
    return 1;
  } catch (const TrainingFault& e) {
    spdlog::error("training fault: {}", e.what());
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 2;
}
