// Command-line front-end for the deconfounded grounding pipeline.
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "red/bias_audit.hpp"
#include "red/dataset_io.hpp"
#include "red/fingerprint.hpp"
#include "red/pipeline.hpp"
#include "red/rng.hpp"
#include "red/version.hpp"

namespace fs = std::filesystem;
using namespace red;

namespace {

ExperimentConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return ExperimentConfig{};
  return ExperimentConfig::load(path);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os << text;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

int run_stage(const char* stage, const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "[" << stage << "] error: " << e.what() << "\n";
    return 1;
  }
}

std::string resolved_out_dir(const ExperimentConfig& config, const std::string& flag_override) {
  if (!flag_override.empty()) return flag_override;
  if (const char* env = std::getenv("RED_OUT_DIR"); env && *env) return env;
  return config.out_dir;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"referring-expression deconfounder pipeline"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  std::string config_path, data_path, out_path, split_str = "confounded", format_str = "csv";
  std::string mode_str = "red", metric_str, ae_path, dict_path, model_path, report_path, out_dir;
  std::size_t n_samples = 1000, dict_n = 0, reps = 1000;
  std::uint64_t seed = 0;
  bool has_seed = false, joint = false;
  std::vector<std::size_t> sweep_n{5, 10, 15, 20};
  std::vector<std::string> sweep_metrics{"euclidean"};
  std::vector<std::uint64_t> sweep_seeds;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config JSON (defaults when omitted)");
  };
  auto add_seed = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "run seed (default: first of config seeds)")
        ->each([&](const std::string&) { has_seed = true; });
  };
  auto pick_seed = [&](const ExperimentConfig& cfg) { return has_seed ? seed : cfg.seeds.front(); };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic split as JSON lines");
  add_config(gen);
  add_seed(gen);
  gen->add_option("--split", split_str, "confounded | shifted")->required();
  gen->add_option("--n", n_samples, "sample count");
  gen->add_option("--out", out_path, "output .jsonl path")->required();

  auto* train_ae_cmd = app.add_subcommand("train-ae", "train the query auto-encoder");
  add_config(train_ae_cmd);
  add_seed(train_ae_cmd);
  train_ae_cmd->add_option("--data", data_path, "training split .jsonl")->required();
  train_ae_cmd->add_flag("--joint", joint, "auto-encode pooled visual features joined with the query");
  train_ae_cmd->add_option("--out", out_path, "output .redc path")->required();

  auto* build_dict_cmd = app.add_subcommand("build-dict", "cluster substitute confounders");
  add_config(build_dict_cmd);
  add_seed(build_dict_cmd);
  build_dict_cmd->add_option("--ae", ae_path, "trained auto-encoder .redc")->required();
  build_dict_cmd->add_option("--data", data_path, "training split .jsonl")->required();
  build_dict_cmd->add_option("--n", dict_n, "cluster count (default from config)");
  build_dict_cmd->add_option("--metric", metric_str, "euclidean | cosine");
  build_dict_cmd->add_option("--out", out_path, "output .redc path")->required();

  auto* train_cmd = app.add_subcommand("train", "train a grounding model");
  add_config(train_cmd);
  add_seed(train_cmd);
  train_cmd->add_option("--mode,--deconfound-mode", mode_str, "none | red | joint-ae | dual-att");
  train_cmd->add_option("--data", data_path, "training split .jsonl")->required();
  train_cmd->add_option("--dict", dict_path, "confounder dictionary .redc (modes other than none)");
  train_cmd->add_option("--out", out_path, "output model .redc")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a model bundle on a split");
  eval_cmd->add_option("--model", model_path, "model .redc")->required();
  eval_cmd->add_option("--data", data_path, "split .jsonl")->required();
  eval_cmd->add_option("--report", report_path, "output report JSON")->required();

  auto* audit_cmd = app.add_subcommand("audit", "per-token ground-truth location statistics");
  add_config(audit_cmd);
  audit_cmd->add_option("--data", data_path, "split .jsonl")->required();
  audit_cmd->add_option("--out", out_path, "output report path")->required();
  audit_cmd->add_option("--format", format_str, "csv | json");

  auto* sweep_cmd = app.add_subcommand("sweep", "cluster-count and metric sweep");
  add_config(sweep_cmd);
  sweep_cmd->add_option("--n-values", sweep_n, "cluster counts");
  sweep_cmd->add_option("--metrics", sweep_metrics, "euclidean and/or cosine");
  sweep_cmd->add_option("--seeds", sweep_seeds, "seeds (default: config seeds)");
  sweep_cmd->add_option("--out", out_path, "output CSV")->required();
  sweep_cmd->add_option("--out-dir", out_dir, "override the config output directory");

  auto* bench_cmd = app.add_subcommand("bench-speed", "per-sample inference latency, none vs red");
  add_config(bench_cmd);
  bench_cmd->add_option("--reps", reps, "repetitions (>= 100)");
  bench_cmd->add_option("--report", report_path, "optional output JSON");

  auto* run_cmd = app.add_subcommand("run", "full pipeline over all configured seeds and modes");
  add_config(run_cmd);
  run_cmd->add_option("--out-dir", out_dir, "override the config output directory");

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    return run_stage("gen-data", [&] {
      ExperimentConfig cfg = load_config_or_default(config_path);
      const std::uint64_t s = pick_seed(cfg);
      World world(world_for_run(cfg, s));
      const SplitKind split = split_from_name(split_str);
      const char* label = split == SplitKind::kShifted ? "data-test" : "data-train";
      auto samples = world.generate_split(split, n_samples,
                                          derive_seed(run_root_seed(cfg, s), label));
      write_jsonl(out_path, samples);
      std::cout << "wrote " << samples.size() << " samples to " << out_path << "\n";
    });
  }

  if (train_ae_cmd->parsed()) {
    return run_stage("train-ae", [&] {
      ExperimentConfig cfg = load_config_or_default(config_path);
      const std::uint64_t s = pick_seed(cfg);
      EmbeddingTable embedder = embedder_for_run(cfg, s);
      auto samples = read_jsonl(data_path);
      const std::string pooled_fp =
          joint ? fingerprint_string(embedder.fingerprint() + "+cell-mean-visual")
                : embedder.fingerprint();
      AutoEncoderConfig ae_cfg = cfg.ae;
      ae_cfg.seed = derive_seed(run_root_seed(cfg, s), "ae");
      AutoEncoder ae = AutoEncoder::train(pooled_ae_inputs(samples, embedder, joint), ae_cfg,
                                          pooled_fp);
      Checkpoint ckpt;
      ckpt.metadata["kind"] = "autoencoder";
      ckpt.metadata["joint"] = joint ? "1" : "0";
      ae.save(ckpt);
      ckpt.save(out_path);
      std::cout << "final reconstruction loss " << ae.final_loss() << " (baseline "
                << ae.baseline_loss() << ") -> " << out_path << "\n";
    });
  }

  if (build_dict_cmd->parsed()) {
    return run_stage("build-dict", [&] {
      ExperimentConfig cfg = load_config_or_default(config_path);
      const std::uint64_t s = pick_seed(cfg);
      if (dict_n == 0) dict_n = cfg.dict_n;
      const DictMetric metric =
          metric_str.empty() ? cfg.dict_metric : metric_from_name(metric_str);
      EmbeddingTable embedder = embedder_for_run(cfg, s);
      Checkpoint ae_ckpt = Checkpoint::load(ae_path);
      const bool was_joint = ae_ckpt.meta_or("joint", "0") == "1";
      AutoEncoder ae = AutoEncoder::load(ae_ckpt);
      if (ae.final_loss() > cfg.ae.recon_rel_threshold * ae.baseline_loss()) {
        throw std::runtime_error("auto-encoder reconstruction loss above threshold; refusing to "
                                 "extract the dictionary");
      }
      auto samples = read_jsonl(data_path);
      const std::string pooled_fp =
          was_joint ? fingerprint_string(embedder.fingerprint() + "+cell-mean-visual")
                    : embedder.fingerprint();
      Tensor latents = encode_corpus(ae, pooled_ae_inputs(samples, embedder, was_joint), pooled_fp);
      ConfounderDictionary dict =
          build_dictionary(latents, dict_n, metric, derive_seed(run_root_seed(cfg, s), "kmeans"),
                           embedder.fingerprint(), ae.fingerprint());
      Checkpoint ckpt;
      ckpt.metadata["kind"] = "confounder-dictionary";
      dict.save(ckpt);
      ckpt.save(out_path);
      std::cout << "dictionary of " << dict.size() << " centers (" << metric_name(metric)
                << ") -> " << out_path << "\n";
    });
  }

  if (train_cmd->parsed()) {
    return run_stage("train", [&] {
      ExperimentConfig cfg = load_config_or_default(config_path);
      const std::uint64_t s = pick_seed(cfg);
      const DeconfoundMode mode = mode_from_name(mode_str);
      EmbeddingTable embedder = embedder_for_run(cfg, s);
      auto samples = read_jsonl(data_path);
      std::optional<ConfounderDictionary> dict;
      if (mode != DeconfoundMode::kNone) {
        if (dict_path.empty()) {
          throw std::runtime_error("mode " + std::string(mode_name(mode)) +
                                   " requires --dict; train one with build-dict first");
        }
        dict = ConfounderDictionary::load(Checkpoint::load(dict_path));
      }
      TrainOptions options;
      options.mode = mode;
      options.config = cfg.grounder;
      options.config.seed = derive_seed(run_root_seed(cfg, s), "grounder");
      TrainLog log;
      ModelBundle bundle =
          train_grounder(samples, embedder, dict ? &*dict : nullptr, options, &log);
      bundle.save(out_path, {{"seed", std::to_string(s)}, {"config_hash", cfg.hash()}});
      std::cout << "trained " << mode_name(mode) << " model, final loss " << log.final_loss
                << " -> " << out_path << "\n";
    });
  }

  if (eval_cmd->parsed()) {
    return run_stage("eval", [&] {
      ModelBundle bundle = ModelBundle::load(model_path);
      Checkpoint raw = Checkpoint::load(model_path);
      auto samples = read_jsonl(data_path, MetaPolicy::kKeep);
      EvalResult result = evaluate(bundle, samples);
      nlohmann::json j = nlohmann::json::parse(eval_result_json(result));
      j["seed"] = std::stoull(raw.meta_or("seed", "0"));
      j["mode"] = mode_name(bundle.mode);
      write_text(report_path, j.dump(2) + "\n");
      std::cout << "acc@0.5 " << result.acc_at_05 << ", mean IoU " << result.mean_iou << " over "
                << result.n << " samples -> " << report_path << "\n";
    });
  }

  if (audit_cmd->parsed()) {
    return run_stage("audit", [&] {
      ExperimentConfig cfg = load_config_or_default(config_path);
      auto samples = read_jsonl(data_path, MetaPolicy::kKeep);
      SplitBiasSummary summary = split_bias_summary(samples, cfg.world);
      emit_report(summary.per_noun, out_path, report_format_from_name(format_str));
      std::cout << "aggregate concentration " << summary.aggregate_concentration << " nats over "
                << summary.per_noun.size() << " noun tokens -> " << out_path << "\n";
    });
  }

  if (sweep_cmd->parsed()) {
    return run_stage("sweep", [&] {
      ExperimentConfig cfg = load_config_or_default(config_path);
      cfg.out_dir = resolved_out_dir(cfg, out_dir);
      if (sweep_seeds.empty()) sweep_seeds = cfg.seeds;
      std::vector<DictMetric> metrics;
      for (const std::string& m : sweep_metrics) metrics.push_back(metric_from_name(m));
      PipelineContext ctx(fs::path(cfg.out_dir) / "cache");
      SweepResult result = sweep(cfg, sweep_n, metrics, sweep_seeds, ctx);
      write_text(out_path, result.csv());
      if (!result.note.empty()) std::cout << "note: " << result.note << "\n";
      std::cout << result.rows.size() << " sweep rows -> " << out_path << "\n";
    });
  }

  if (bench_cmd->parsed()) {
    return run_stage("bench-speed", [&] {
      ExperimentConfig cfg = load_config_or_default(config_path);
      PipelineContext ctx(fs::path(cfg.out_dir) / "cache", /*use_disk=*/false);
      SpeedReport report = bench_speed(cfg, reps, ctx);
      if (!report_path.empty()) write_text(report_path, report.json() + "\n");
      std::cout << "median none " << report.median_none_us << " us, red " << report.median_red_us
                << " us, overhead x" << report.overhead_ratio << "\n";
    });
  }

  if (run_cmd->parsed()) {
    return run_stage("run", [&] {
      ExperimentConfig cfg = load_config_or_default(config_path);
      cfg.out_dir = resolved_out_dir(cfg, out_dir);
      RunManifest manifest = run_pipeline(cfg);
      const fs::path dir = fs::path(cfg.out_dir) / manifest.config_hash;
      fs::create_directories(dir);
      write_text(dir / "config.json", cfg.to_json_text() + "\n");
      write_text(dir / "metrics.json", manifest.metrics_json() + "\n");
      write_text(dir / "manifest.json", manifest.manifest_json() + "\n");
      for (const auto& [mode, s] : manifest.summary) {
        std::cout << mode << ": confounded-val " << s.val_acc_mean << " +- " << s.val_acc_std
                  << ", shifted-test " << s.test_acc_mean << " +- " << s.test_acc_std << "\n";
      }
      std::cout << "manifest -> " << (dir / "manifest.json").string() << "\n";
    });
  }

  return 0;
}
