// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <fmt/format.h>

#include "tokenmark/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using tokenmark::read_text_file;
using tokenmark::sha256_file;

namespace {

const fs::path& work() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "tokenmark_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int run(const std::string& args) {
  const std::string cmd = fmt::format("\"{}\" -q {} > \"{}\" 2>&1", TOKENMARK_CLI, args, (work() / "last.log").string());
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string path(const std::string& name) { return (work() / name).string(); }

// A config small enough for a quick end-to-end run.
const std::string& small_config() {
  static const std::string file = [] {
    const json doc{{"train_samples", 1500},
                   {"train", {{"epochs", 3}}},
                   {"embed_s", {{"steps", 20}, {"samples", 256}}},
                   {"attack", {{"epochs", 3}, {"task_samples", 400}}},
                   {"attacker_samples", 300},
                   {"probe_samples", 300},
                   {"probe", {{"epochs", 2}}}};
    tokenmark::write_text_file(work() / "small.json", doc.dump());
    return path("small.json");
  }();
  return file;
}

const std::string& trained() {
  static const std::string dir = [] {
    REQUIRE(run(fmt::format("train --config {} --out {}", small_config(), path("base"))) == 0);
    return path("base");
  }();
  return dir;
}

const std::string& embedded() {
  static const std::string dir = [] {
    REQUIRE(run(fmt::format("embed --config {} --model {}/model.tkw --scheme B --out {}", small_config(), trained(),
                            path("wm"))) == 0);
    return path("wm");
  }();
  return dir;
}

std::size_t lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("embed") == 2);
  CHECK(run("--help") == 0);
}

TEST_CASE("config errors exit with 2") {
  tokenmark::write_text_file(work() / "vocab.json", R"({"model": {"vocab_size": 40}})");
  CHECK(run(fmt::format("train --config {} --out {}", path("vocab.json"), path("x"))) == 2);
  CHECK(read_text_file(work() / "last.log").find("/dataset") != std::string::npos);
  tokenmark::write_text_file(work() / "syntax.json", R"({"model": )");
  CHECK(run(fmt::format("train --config {} --out {}", path("syntax.json"), path("x"))) == 2);
  CHECK(run(fmt::format("train --config {} --out {}", path("absent.json"), path("x"))) == 2);
}

TEST_CASE("missing model file exits with 2") {
  CHECK(run(fmt::format("embed --config {} --model {} --out {}", small_config(), path("none.tkw"), path("x"))) == 2);
}

TEST_CASE("training twice with the same seed gives identical weight files") {
  REQUIRE(run(fmt::format("train --config {} --out {}", small_config(), path("again"))) == 0);
  CHECK(sha256_file(trained() + "/model.tkw") == sha256_file(path("again") + "/model.tkw"));
  CHECK(read_text_file(trained() + "/train_report.json") == read_text_file(path("again") + "/train_report.json"));
  REQUIRE(run(fmt::format("train --config {} --seed 8 --out {}", small_config(), path("other"))) == 0);
  CHECK(sha256_file(trained() + "/model.tkw") != sha256_file(path("other") + "/model.tkw"));
  const json manifest = json::parse(read_text_file(trained() + "/manifest_train.json"));
  CHECK(manifest["artifacts"].size() == 3);
  CHECK(manifest["stages"][0]["stage"] == "train");
}

TEST_CASE("embedding twice gives identical bundle checksums") {
  REQUIRE(run(fmt::format("embed --config {} --model {}/model.tkw --scheme B --out {}", small_config(), trained(),
                          path("wm2"))) == 0);
  CHECK(sha256_file(embedded() + "/bundle.tkb") == sha256_file(path("wm2") + "/bundle.tkb"));
  CHECK(sha256_file(embedded() + "/watermarked.tkw") == sha256_file(path("wm2") + "/watermarked.tkw"));
  const json manifest = json::parse(read_text_file(embedded() + "/manifest_embed.json"));
  CHECK(manifest["stages"][0]["stage"] == "embed");
  CHECK(manifest["stages"][0]["wall_seconds"].get<double>() < 5.0);
}

TEST_CASE("extract reports WR, FPR and per-sample scores") {
  REQUIRE(run(fmt::format("extract --config {} --model {}/watermarked.tkw --bundle {}/bundle.tkb --reference "
                          "{}/model.tkw --out {}",
                          small_config(), embedded(), embedded(), trained(), path("ext"))) == 0);
  const json r = json::parse(read_text_file(path("ext") + "/extract_report.json"));
  CHECK(r["wr"].get<double>() == 1.0);
  CHECK(r["false_positive_rate"].get<double>() <= 0.17);
  CHECK(r["total"] == 200);
  CHECK(lines(read_text_file(path("ext") + "/scores.csv")) == 201);
  CHECK(lines(read_text_file(path("ext") + "/scores_histogram.csv")) == 21);

  REQUIRE(run(fmt::format("extract --config {} --model {}/model.tkw --bundle {}/bundle.tkb --out {}", small_config(),
                          trained(), embedded(), path("ext0"))) == 0);
  const json u = json::parse(read_text_file(path("ext0") + "/extract_report.json"));
  CHECK(u["wr"].get<double>() <= 0.17);
}

TEST_CASE("extract guards") {
  const std::string base = fmt::format("extract --config {} --model {}/watermarked.tkw --bundle {}/bundle.tkb --out {}",
                                       small_config(), embedded(), embedded(), path("g"));
  CHECK(run(base + " --set-size 0") == 2);
  CHECK(run(base + " --scheme S") == 2);
  CHECK(run(base + " --scheme B") == 0);
}

TEST_CASE("attack sweeps emit one CSV row per strength") {
  const std::string base = fmt::format("attack --config {} --model {}/watermarked.tkw --bundle {}/bundle.tkb",
                                       small_config(), embedded(), embedded());
  CHECK(run(base + " --kind melt --out " + path("a0")) == 2);

  tokenmark::write_text_file(work() / "prune.json",
                             json{{"train_samples", 1500},
                                  {"train", {{"epochs", 3}}},
                                  {"attacker_samples", 300},
                                  {"probe_samples", 300},
                                  {"attack", {{"kind", "prune"}}},
                                  {"strengths", {0.1, 0.2, 0.3, 0.4, 0.5}}}
                                 .dump());
  REQUIRE(run(fmt::format("attack --config {} --model {}/watermarked.tkw --bundle {}/bundle.tkb --out {}",
                          path("prune.json"), embedded(), embedded(), path("prune"))) == 0);
  const std::string csv = read_text_file(path("prune") + "/attack.csv");
  CHECK(lines(csv) == 6);
  CHECK(csv.rfind("strength,wr_tokenmark_b,wr_tokenmark_s,wr_trigger_baseline,downstream_acc\n", 0) == 0);
  const json r = json::parse(read_text_file(path("prune") + "/attack_report.json"));
  REQUIRE(r["runs"].size() == 5);
  for (const auto& one : r["runs"]) {
    for (const auto& s : one["subjects"]) {
      CHECK(s.contains("wr_before"));
      CHECK(s.contains("wr_after"));
      CHECK(s.contains("accuracy_before"));
      CHECK(s.contains("accuracy_after"));
    }
  }

  REQUIRE(run(base + " --kind finetune --out " + path("ft")) == 0);
  CHECK(lines(read_text_file(path("ft") + "/attack.csv")) == 1 + 3);
  const json f = json::parse(read_text_file(path("ft") + "/attack_report.json"));
  CHECK(f["runs"][0]["subjects"][0]["wr_per_epoch"].size() == 3);
}

TEST_CASE("verify-equivariance exit codes") {
  CHECK(run("verify-equivariance --trials 0 --out " + path("v")) == 0);
  CHECK(read_text_file(work() / "last.log").find("vacuous") != std::string::npos);
  CHECK(run("verify-equivariance --trials 12 --out " + path("v")) == 0);
  const json r = json::parse(read_text_file(path("v") + "/equivariance_report.json"));
  CHECK(r["max_forward"].get<double>() < 1e-4);
  CHECK(r["pass"] == true);
  CHECK(run("verify-equivariance --trials 12 --inject-cross-head --out " + path("v")) == 1);
}
