#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

#include "lico/app.hpp"
#include "lico/errors.hpp"
#include "lico/io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Scratch directory shared by every case; reused runs keep the suite fast.
const fs::path& work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "lico_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string at(const std::string& name) { return (work_dir() / name).string(); }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run(const std::string& args, const std::string& out_name = "stdout.txt") {
  const std::string cmd = std::string(LICO_BINARY) + " " + args + " > " + at(out_name) + " 2> " + at("stderr.txt");
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json small_config(const std::string& tag) {
  return {
      {"seed", 3},
      {"data", {{"per_class_count", 12}}},
      {"train", {{"epochs", 1}}},
      {"eval", {{"max_images", 6}, {"sanity_images", 2}}},
      {"paths",
       {{"checkpoint", at(tag + ".ckpt")},
        {"metrics", at(tag + ".jsonl")},
        {"report", at(tag + "_report.json")},
        {"sanity_dir", at(tag + "_sanity")},
        {"features", at(tag + "_features.csv")}}},
  };
}

std::string write_config(const std::string& name, const json& doc) {
  const auto path = at(name);
  std::ofstream(path) << doc.dump(2);
  return path;
}

// Trains the shared small model once.
const std::string& trained_config() {
  static const std::string path = [] {
    const auto p = write_config("base.json", small_config("base"));
    REQUIRE(run("train -c " + p) == 0);
    return p;
  }();
  return path;
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(run("") == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("train") == 2);
  CHECK(run("--help") == 0);
}

TEST_CASE("config files are parsed strictly") {
  auto doc = small_config("strict");
  SUBCASE("unknown key") {
    doc["train"]["alpah"] = 1.0;
    CHECK(run("train -c " + write_config("unknown.json", doc)) == 2);
    CHECK(slurp(at("stderr.txt")).find("train.alpah") != std::string::npos);
  }
  SUBCASE("wrong type") {
    doc["train"]["epochs"] = "many";
    CHECK(run("train -c " + write_config("type.json", doc)) == 2);
    CHECK(slurp(at("stderr.txt")).find("train.epochs") != std::string::npos);
  }
  SUBCASE("bad value") {
    doc["train"]["batch_size"] = 1;
    CHECK(run("train -c " + write_config("value.json", doc)) == 2);
  }
  SUBCASE("syntax error") {
    std::ofstream(at("syntax.json")) << "{\"seed\": 1,,}";
    CHECK(run("train -c " + at("syntax.json")) == 2);
  }
  SUBCASE("missing file") { CHECK(run("train -c " + at("nope.json")) == 2); }
  SUBCASE("unwritable output directory") {
    doc["paths"]["metrics"] = at("no_such_dir/m.jsonl");
    CHECK(run("train -c " + write_config("dir.json", doc)) == 2);
  }
}

TEST_CASE("config round trip through JSON") {
  const auto parsed = lico::app::parse_run_config(small_config("rt"));
  const auto again = lico::app::parse_run_config(lico::app::to_json(parsed));
  CHECK(lico::app::to_json(again) == lico::app::to_json(parsed));
  CHECK(parsed.seed == 3);
  CHECK(parsed.data.per_class_count == 12);
  CHECK(parsed.train.grad_clip == 2.0);
  CHECK_THROWS_AS(lico::app::parse_run_config(json{{"model", {{"prompt_mode", "fixed-template"}}}}), lico::ConfigError);
  CHECK_THROWS_AS(lico::app::parse_run_config(json{{"sinkhorn", {{"log_domain", "sometimes"}}}}), lico::ConfigError);
}

TEST_CASE("training writes sorted metrics and is reproducible") {
  const auto& cfg = trained_config();
  const auto metrics = slurp(at("base.jsonl"));
  std::istringstream lines(metrics);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = json::parse(line);
    CHECK(j["epoch"] == n);
    ++n;
  }
  CHECK(n == 2);
  const auto ckpt = slurp(at("base.ckpt"));

  REQUIRE(run("train -c " + cfg) == 0);
  CHECK(slurp(at("base.jsonl")) == metrics);
  CHECK(slurp(at("base.ckpt")) == ckpt);
}

TEST_CASE("eval reports are byte-identical across runs") {
  const auto& cfg = trained_config();
  REQUIRE(run("eval -c " + cfg + " -k " + at("base.ckpt")) == 0);
  const auto first = slurp(at("base_report.json"));
  REQUIRE(run("eval -c " + cfg + " -k " + at("base.ckpt")) == 0);
  CHECK(slurp(at("base_report.json")) == first);

  const auto report = json::parse(first);
  CHECK(report["num_images"] == 6);
  CHECK(report["images"].size() == 6);
  for (const char* key : {"insertion_auc", "deletion_auc", "overall", "pointing_game", "eval_acc"})
    CHECK(report.contains(key));
  CHECK(report["overall"].get<double>() ==
        doctest::Approx(report["insertion_auc"].get<double>() - report["deletion_auc"].get<double>()));
  CHECK(report["sanity"]["layers"].size() == 4);

  CHECK(run("eval -c " + cfg + " -k " + at("missing.ckpt")) == 2);
  std::ofstream(at("garbage.ckpt")) << "not a checkpoint";
  CHECK(run("eval -c " + cfg + " -k " + at("garbage.ckpt")) == 2);
}

TEST_CASE("sanity writes curves and per-layer maps") {
  const auto& cfg = trained_config();
  REQUIRE(run("sanity -c " + cfg + " -k " + at("base.ckpt")) == 0);
  const fs::path dir = at("base_sanity");
  const auto curves = json::parse(slurp((dir / "sanity.json").string()));
  CHECK(curves["cascading"].size() == 4);
  CHECK(curves["independent"].size() == 4);
  CHECK(fs::exists(dir / "original.pgm"));
  std::size_t pgms = 0;
  for (const auto& e : fs::directory_iterator(dir)) pgms += e.path().extension() == ".pgm" ? 1 : 0;
  CHECK(pgms == 1 + 2 * 4);
  const auto map = lico::io::read_pgm((dir / "original.pgm").string());
  CHECK(map.height == 16);
  CHECK(map.width == 16);
}

TEST_CASE("dump-features writes one pooled row per eval image") {
  const auto& cfg = trained_config();
  REQUIRE(run("dump-features -c " + cfg + " -k " + at("base.ckpt")) == 0);
  const auto [labels, rows] = lico::io::read_feature_csv(at("base_features.csv"));
  const auto parsed = lico::app::load_run_config(cfg);
  auto spec = parsed.data;
  spec.seed = parsed.seed;
  const auto data = lico::generate(spec);
  REQUIRE(rows.size() == data.eval.size());
  const auto model = lico::app::load_model(parsed, data, at("base.ckpt"));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(labels[i] == data.eval[i].label);
    REQUIRE(rows[i].size() == 16);
  }
  // The first row equals the pooled features computed in-process.
  const auto pooled = model.image.pool(model.image.encode(data.eval[0].image.to_tensor<float>()).values);
  for (std::size_t j = 0; j < 16; ++j) CHECK(rows[0][j] == pooled[j]);
}

TEST_CASE("embed-template describes the file and class order") {
  CHECK(run("embed-template", "template.txt") == 0);
  const auto text = slurp(at("template.txt"));
  CHECK(text.find("LICOEMB1") != std::string::npos);
  CHECK(text.find("0  red square") != std::string::npos);
  CHECK(text.find("5  blue triangle") != std::string::npos);
}

TEST_CASE("embedding files must match the class list") {
  auto doc = small_config("emb");
  lico::io::EmbeddingTable table;
  table.names = {"red square", "blue square", "red circle", "blue circle", "red triangle", "green triangle"};
  std::vector<float> rows(6 * 32, 0.0f);
  for (std::size_t c = 0; c < 6; ++c) rows[c * 32 + c] = 1.0f;
  table.rows = lico::Tensor({6, 32}, rows);
  lico::io::write_embeddings(at("wrong.emb"), table);
  doc["paths"]["embeddings"] = at("wrong.emb");
  CHECK(run("train -c " + write_config("emb.json", doc)) == 2);
  CHECK(slurp(at("stderr.txt")).find("green triangle") != std::string::npos);

  table.names[5] = "blue triangle";
  lico::io::write_embeddings(at("right.emb"), table);
  doc["paths"]["embeddings"] = at("right.emb");
  const auto parsed = lico::app::parse_run_config(doc);
  auto spec = parsed.data;
  spec.seed = parsed.seed;
  const auto tokens = lico::app::class_token_table(parsed, lico::generate(spec));
  CHECK(tokens.at(5, 5) == 1.0f);
}
