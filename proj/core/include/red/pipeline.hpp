#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "red/autoencoder.hpp"
#include "red/grounder.hpp"
#include "red/kmeans.hpp"
#include "red/world.hpp"

namespace red {

struct DataConfig {
  std::size_t n_train = 1000;
  std::size_t n_val = 1000;
  std::size_t n_test = 1000;
};

/// One experiment: world, embedder, deconfounder and grounder settings, the
/// modes to run and the seeds to average over. Parsed strictly: unknown keys
/// are rejected before any compute.
struct ExperimentConfig {
  WorldSpec world;
  std::size_t embed_dim = 64;
  AutoEncoderConfig ae;
  std::size_t dict_n = 10;
  DictMetric dict_metric = DictMetric::kEuclidean;
  GrounderConfig grounder;
  DataConfig data;
  std::vector<DeconfoundMode> modes = {DeconfoundMode::kNone, DeconfoundMode::kRed};
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::string out_dir = "runs";

  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string to_json_text() const;  // canonical (sorted keys)
  std::string hash() const;
};

struct StageTimings {
  double gen_data_s = 0.0;
  double train_ae_s = 0.0;
  double build_dict_s = 0.0;
  double train_s = 0.0;
  double eval_s = 0.0;
};

struct RunRecord {
  std::uint64_t seed = 0;
  DeconfoundMode mode = DeconfoundMode::kNone;
  EvalResult confounded_val;
  EvalResult shifted_test;
  double train_final_loss = 0.0;
  std::map<std::string, std::string> fingerprints;
  StageTimings timings;
  bool from_cache = false;
};

struct ModeSummary {
  double val_acc_mean = 0.0, val_acc_std = 0.0;
  double test_acc_mean = 0.0, test_acc_std = 0.0;
};

struct RunManifest {
  std::string config_hash;
  std::string tool_version;
  std::vector<RunRecord> runs;
  std::map<std::string, ModeSummary> summary;  // keyed by mode name
  double total_seconds = 0.0;

  /// Deterministic part only (no timings); bit-identical across reruns.
  std::string metrics_json() const;
  std::string manifest_json() const;
};

/// Stage cache shared between pipeline entry points. In-memory within a
/// process plus on-disk artifacts keyed by content hashes; a cached artifact
/// is only reused when the full upstream fingerprint chain matches.
class PipelineContext {
 public:
  explicit PipelineContext(std::filesystem::path cache_dir, bool use_disk = true);

  std::shared_ptr<const std::vector<Sample>> dataset(const std::string& key,
                                                     const std::function<std::vector<Sample>()>& make);
  std::shared_ptr<const AutoEncoder> autoencoder(const std::string& key,
                                                 const std::function<AutoEncoder()>& make);
  std::shared_ptr<const ConfounderDictionary> dictionary(
      const std::string& key, const std::function<ConfounderDictionary()>& make);
  std::shared_ptr<const ModelBundle> model(const std::string& key,
                                           const std::function<ModelBundle()>& make,
                                           bool* was_cached = nullptr);

  const std::filesystem::path& cache_dir() const { return cache_dir_; }

 private:
  std::filesystem::path cache_dir_;
  bool use_disk_ = true;
  std::map<std::string, std::shared_ptr<const std::vector<Sample>>> datasets_;
  std::map<std::string, std::shared_ptr<const AutoEncoder>> aes_;
  std::map<std::string, std::shared_ptr<const ConfounderDictionary>> dicts_;
  std::map<std::string, std::shared_ptr<const ModelBundle>> models_;
};

/// End-to-end pipeline per (mode, seed): generate data, train the
/// auto-encoder, build the dictionary, train the grounder, evaluate on the
/// confounded validation and shifted test splits.
RunManifest run_pipeline(const ExperimentConfig& config, PipelineContext& ctx);
RunManifest run_pipeline(const ExperimentConfig& config);  // context in config.out_dir/cache

struct SweepRow {
  std::size_t n_clusters = 0;
  DictMetric metric = DictMetric::kEuclidean;
  std::uint64_t seed = 0;
  double val_acc = 0.0;
  double test_acc = 0.0;
  double baseline_test_acc = 0.0;  // mode=none, same seed
};

struct SweepResult {
  std::vector<SweepRow> rows;  // ordered by (n, metric, seed)
  bool euclidean_beats_cosine_at_default = true;
  std::string note;
  std::string csv() const;
};

SweepResult sweep(const ExperimentConfig& config, const std::vector<std::size_t>& n_values,
                  const std::vector<DictMetric>& metrics, const std::vector<std::uint64_t>& seeds,
                  PipelineContext& ctx);

struct SpeedReport {
  double median_none_us = 0.0;
  double median_red_us = 0.0;
  double overhead_ratio = 0.0;
  std::size_t repetitions = 0;
  std::string json() const;
};

/// Median per-sample forward latency with and without the deconfounding
/// stage, on identical data and shapes.
SpeedReport bench_speed(const ExperimentConfig& config, std::size_t repetitions,
                        PipelineContext& ctx);

// stage helpers shared by the CLI
std::uint64_t run_root_seed(const ExperimentConfig& config, std::uint64_t seed);
WorldSpec world_for_run(const ExperimentConfig& config, std::uint64_t seed);
EmbeddingTable embedder_for_run(const ExperimentConfig& config, std::uint64_t seed);

/// Pooled features the auto-encoder trains on. For joint-ae the cell-mean of
/// the feature map is concatenated in front of the pooled query.
Tensor pooled_ae_inputs(const std::vector<Sample>& samples, const EmbeddingTable& embedder,
                        bool joint_with_visual);

std::string eval_result_json(const EvalResult& result);

}  // namespace red
