// End-to-end checks of the command-line surface: every stage is driven
// through the real binary against real files.
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "red/bias_audit.hpp"
#include "red/dataset_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kCli = RED_CLI_PATH;

struct TempDir {
  fs::path path;
  TempDir() : path(fs::temp_directory_path() / ("red_cli_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

int run(const std::string& args) {
  const std::string cmd = std::string(kCli) + " " + args + " >/dev/null 2>&1";
  return std::system(cmd.c_str());
}

int run_capture(const std::string& args, const fs::path& log) {
  const std::string cmd =
      std::string(kCli) + " " + args + " >" + log.string() + " 2>&1";
  return std::system(cmd.c_str());
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_config(const fs::path& path, const std::string& out_dir) {
  std::ofstream os(path);
  os << R"({
    "world": {"grid_h": 4, "grid_w": 4, "n_nouns": 4, "n_attributes": 3,
              "n_context_tokens": 8, "n_contexts": 4, "feature_dim": 8, "seed": 11},
    "embedder": {"dim": 16},
    "autoencoder": {"latent_dim": 4, "hidden": 24, "epochs": 12, "batch": 32},
    "dictionary": {"n_clusters": 4},
    "grounder": {"hidden": 16, "epochs": 5, "batch": 32},
    "data": {"n_train": 130, "n_val": 50, "n_test": 50},
    "seeds": [1],
    "modes": ["none", "red"],
    "out_dir": ")" << out_dir << R"("
  })";
}

}  // namespace

TEST_CASE("cli stage flow: gen-data, train-ae, build-dict, train, eval, audit") {
  TempDir tmp;
  const fs::path cfg = tmp.path / "cfg.json";
  write_config(cfg, (tmp.path / "runs").string());
  const std::string c = " --config " + cfg.string();

  REQUIRE(run("gen-data" + c + " --split confounded --n 130 --out " +
              (tmp.path / "train.jsonl").string()) == 0);
  REQUIRE(run("gen-data" + c + " --split shifted --n 40 --out " +
              (tmp.path / "test.jsonl").string()) == 0);
  CHECK(red::read_jsonl(tmp.path / "train.jsonl").size() == 130);

  REQUIRE(run("train-ae" + c + " --data " + (tmp.path / "train.jsonl").string() + " --out " +
              (tmp.path / "ae.redc").string()) == 0);
  REQUIRE(run("build-dict" + c + " --ae " + (tmp.path / "ae.redc").string() + " --data " +
              (tmp.path / "train.jsonl").string() + " --n 4 --metric euclidean --out " +
              (tmp.path / "dict.redc").string()) == 0);
  REQUIRE(run("train" + c + " --mode red --data " + (tmp.path / "train.jsonl").string() +
              " --dict " + (tmp.path / "dict.redc").string() + " --out " +
              (tmp.path / "model.redc").string()) == 0);
  REQUIRE(run("eval --model " + (tmp.path / "model.redc").string() + " --data " +
              (tmp.path / "test.jsonl").string() + " --report " +
              (tmp.path / "report.json").string()) == 0);

  const json report = json::parse(slurp(tmp.path / "report.json"));
  CHECK(report.contains("acc_at_05"));
  CHECK(report.contains("mean_iou"));
  CHECK(report.contains("by_confounder"));
  CHECK(report["n"] == 40);
  CHECK(report["mode"] == "red");

  REQUIRE(run("audit" + c + " --data " + (tmp.path / "train.jsonl").string() + " --out " +
              (tmp.path / "bias.csv").string() + " --format csv") == 0);
  const auto reports = red::parse_report(tmp.path / "bias.csv", red::ReportFormat::kCsv);
  CHECK(reports.size() == 4);  // one per noun
}

TEST_CASE("cli failures carry a stage tag and a nonzero exit") {
  TempDir tmp;
  const fs::path log = tmp.path / "log.txt";
  // deconfounded training without a dictionary
  CHECK(run_capture("train --mode red --data missing.jsonl --out x.redc", log) != 0);
  CHECK(slurp(log).find("[train]") != std::string::npos);

  // unknown config key fails before any compute
  const fs::path bad = tmp.path / "bad.json";
  {
    std::ofstream os(bad);
    os << R"({"world": {"grid_height": 4}})";
  }
  CHECK(run_capture("gen-data --config " + bad.string() +
                        " --split confounded --n 5 --out " + (tmp.path / "d.jsonl").string(),
                    log) != 0);
  const std::string text = slurp(log);
  CHECK(text.find("[gen-data]") != std::string::npos);
  CHECK(text.find("grid_height") != std::string::npos);
}

TEST_CASE("cli run subcommand writes config, metrics and manifest") {
  TempDir tmp;
  const fs::path cfg = tmp.path / "cfg.json";
  write_config(cfg, (tmp.path / "runs").string());
  const fs::path log = tmp.path / "run.log";
  REQUIRE(run_capture("run --config " + cfg.string(), log) == 0);

  // locate the run directory (named by the config hash)
  fs::path run_dir;
  for (const auto& entry : fs::directory_iterator(tmp.path / "runs")) {
    if (entry.is_directory() && entry.path().filename() != "cache") run_dir = entry.path();
  }
  REQUIRE_FALSE(run_dir.empty());
  CHECK(fs::exists(run_dir / "config.json"));
  CHECK(fs::exists(run_dir / "metrics.json"));
  CHECK(fs::exists(run_dir / "manifest.json"));

  const json metrics = json::parse(slurp(run_dir / "metrics.json"));
  CHECK(metrics["runs"].size() == 2);
  CHECK(metrics["summary"].contains("none"));
  CHECK(metrics["summary"].contains("red"));

  // a second run over the same config reproduces metrics.json byte for byte
  const std::string before = slurp(run_dir / "metrics.json");
  REQUIRE(run_capture("run --config " + cfg.string(), log) == 0);
  CHECK(slurp(run_dir / "metrics.json") == before);
}
