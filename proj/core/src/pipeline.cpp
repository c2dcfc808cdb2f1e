#include "red/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "red/fingerprint.hpp"
#include "red/rng.hpp"
#include "red/version.hpp"

namespace red {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) {
      throw std::invalid_argument("config: unknown key \"" + key + "\" in " + where);
    }
  }
}

template <typename T>
void maybe(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

json world_to_json(const WorldSpec& w) {
  return json{{"grid_h", w.grid_h},
              {"grid_w", w.grid_w},
              {"n_nouns", w.n_nouns},
              {"n_attributes", w.n_attributes},
              {"n_context_tokens", w.n_context_tokens},
              {"n_contexts", w.n_contexts},
              {"bias_strength", w.bias_strength},
              {"context_query_rate", w.context_query_rate},
              {"feature_dim", w.feature_dim},
              {"noise_sigma", w.noise_sigma},
              {"seed", w.seed},
              {"ctx_tokens_per_query", w.ctx_tokens_per_query},
              {"distractor_min", w.distractor_min},
              {"distractor_max", w.distractor_max},
              {"background_scale", w.background_scale}};
}

void world_from_json(const json& j, WorldSpec& w) {
  check_keys(j,
             {"grid_h", "grid_w", "n_nouns", "n_attributes", "n_context_tokens", "n_contexts",
              "bias_strength", "context_query_rate", "feature_dim", "noise_sigma", "seed",
              "ctx_tokens_per_query", "distractor_min", "distractor_max", "background_scale"},
             "world");
  maybe(j, "grid_h", w.grid_h);
  maybe(j, "grid_w", w.grid_w);
  maybe(j, "n_nouns", w.n_nouns);
  maybe(j, "n_attributes", w.n_attributes);
  maybe(j, "n_context_tokens", w.n_context_tokens);
  maybe(j, "n_contexts", w.n_contexts);
  maybe(j, "bias_strength", w.bias_strength);
  maybe(j, "context_query_rate", w.context_query_rate);
  maybe(j, "feature_dim", w.feature_dim);
  maybe(j, "noise_sigma", w.noise_sigma);
  maybe(j, "seed", w.seed);
  maybe(j, "ctx_tokens_per_query", w.ctx_tokens_per_query);
  maybe(j, "distractor_min", w.distractor_min);
  maybe(j, "distractor_max", w.distractor_max);
  maybe(j, "background_scale", w.background_scale);
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  check_keys(j, {"world", "embedder", "autoencoder", "dictionary", "grounder", "data", "modes",
                 "seeds", "out_dir"},
             "top level");
  ExperimentConfig cfg;
  if (j.contains("world")) world_from_json(j["world"], cfg.world);
  if (j.contains("embedder")) {
    check_keys(j["embedder"], {"dim"}, "embedder");
    maybe(j["embedder"], "dim", cfg.embed_dim);
  }
  if (j.contains("autoencoder")) {
    const json& a = j["autoencoder"];
    check_keys(a, {"latent_dim", "hidden", "epochs", "batch", "lr", "recon_rel_threshold",
                   "activation"},
               "autoencoder");
    maybe(a, "latent_dim", cfg.ae.latent_dim);
    maybe(a, "hidden", cfg.ae.hidden);
    maybe(a, "epochs", cfg.ae.epochs);
    maybe(a, "batch", cfg.ae.batch);
    maybe(a, "lr", cfg.ae.lr);
    maybe(a, "recon_rel_threshold", cfg.ae.recon_rel_threshold);
    maybe(a, "activation", cfg.ae.activation);
  }
  if (j.contains("dictionary")) {
    const json& d = j["dictionary"];
    check_keys(d, {"n_clusters", "metric"}, "dictionary");
    maybe(d, "n_clusters", cfg.dict_n);
    if (d.contains("metric")) cfg.dict_metric = metric_from_name(d["metric"].get<std::string>());
  }
  if (j.contains("grounder")) {
    const json& g = j["grounder"];
    check_keys(g, {"hidden", "epochs", "batch", "lr", "use_coords", "reg_weight", "attention_dim"},
               "grounder");
    maybe(g, "hidden", cfg.grounder.hidden);
    maybe(g, "epochs", cfg.grounder.epochs);
    maybe(g, "batch", cfg.grounder.batch);
    maybe(g, "lr", cfg.grounder.lr);
    maybe(g, "use_coords", cfg.grounder.use_coords);
    maybe(g, "reg_weight", cfg.grounder.reg_weight);
    maybe(g, "attention_dim", cfg.grounder.attention_dim);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    check_keys(d, {"n_train", "n_val", "n_test"}, "data");
    maybe(d, "n_train", cfg.data.n_train);
    maybe(d, "n_val", cfg.data.n_val);
    maybe(d, "n_test", cfg.data.n_test);
  }
  if (j.contains("modes")) {
    cfg.modes.clear();
    for (const auto& m : j["modes"]) cfg.modes.push_back(mode_from_name(m.get<std::string>()));
    if (cfg.modes.empty()) throw std::invalid_argument("config: modes must be non-empty");
  }
  if (j.contains("seeds")) {
    cfg.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (cfg.seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
  }
  maybe(j, "out_dir", cfg.out_dir);
  cfg.world.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json_text() const {
  json j;
  j["world"] = world_to_json(world);
  j["embedder"] = {{"dim", embed_dim}};
  j["autoencoder"] = {{"latent_dim", ae.latent_dim},   {"hidden", ae.hidden},
                      {"epochs", ae.epochs},           {"batch", ae.batch},
                      {"lr", ae.lr},                   {"recon_rel_threshold", ae.recon_rel_threshold},
                      {"activation", ae.activation}};
  j["dictionary"] = {{"n_clusters", dict_n}, {"metric", metric_name(dict_metric)}};
  j["grounder"] = {{"hidden", grounder.hidden},
                   {"epochs", grounder.epochs},
                   {"batch", grounder.batch},
                   {"lr", grounder.lr},
                   {"use_coords", grounder.use_coords},
                   {"reg_weight", grounder.reg_weight},
                   {"attention_dim", grounder.attention_dim}};
  j["data"] = {{"n_train", data.n_train}, {"n_val", data.n_val}, {"n_test", data.n_test}};
  json modes_json = json::array();
  for (DeconfoundMode m : modes) modes_json.push_back(mode_name(m));
  j["modes"] = modes_json;
  j["seeds"] = seeds;
  j["out_dir"] = out_dir;
  return j.dump(2);
}

std::string ExperimentConfig::hash() const { return fingerprint_string(to_json_text()); }

std::uint64_t run_root_seed(const ExperimentConfig& config, std::uint64_t seed) {
  return derive_seed(config.world.seed, "run", seed);
}

WorldSpec world_for_run(const ExperimentConfig& config, std::uint64_t seed) {
  WorldSpec w = config.world;
  w.seed = derive_seed(run_root_seed(config, seed), "world");
  return w;
}

EmbeddingTable embedder_for_run(const ExperimentConfig& config, std::uint64_t seed) {
  return EmbeddingTable(config.world.vocab_size(), config.embed_dim,
                        derive_seed(run_root_seed(config, seed), "embedder"));
}

Tensor pooled_ae_inputs(const std::vector<Sample>& samples, const EmbeddingTable& embedder,
                        bool joint_with_visual) {
  if (samples.empty()) throw std::invalid_argument("pooled_ae_inputs: empty sample list");
  const std::size_t d_r = embedder.dim();
  const std::size_t f = joint_with_visual ? samples.front().feature_map.shape().back() : 0;
  Tensor out({samples.size(), f + d_r});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    double* row = out.data() + i * (f + d_r);
    if (joint_with_visual) {
      const Tensor& fm = samples[i].feature_map;
      const std::size_t cells = fm.size() / f;
      for (std::size_t c = 0; c < cells; ++c) {
        const double* cell = fm.data() + c * f;
        for (std::size_t k = 0; k < f; ++k) row[k] += cell[k];
      }
      for (std::size_t k = 0; k < f; ++k) row[k] /= static_cast<double>(cells);
    }
    Tensor r = embedder.pool_query(samples[i].query_tokens);
    std::copy(r.data(), r.data() + d_r, row + f);
  }
  return out;
}

PipelineContext::PipelineContext(std::filesystem::path cache_dir, bool use_disk)
    : cache_dir_(std::move(cache_dir)), use_disk_(use_disk) {
  if (use_disk_) std::filesystem::create_directories(cache_dir_);
}

std::shared_ptr<const std::vector<Sample>> PipelineContext::dataset(
    const std::string& key, const std::function<std::vector<Sample>()>& make) {
  auto it = datasets_.find(key);
  if (it != datasets_.end()) return it->second;
  auto value = std::make_shared<const std::vector<Sample>>(make());
  datasets_[key] = value;
  return value;
}

std::shared_ptr<const AutoEncoder> PipelineContext::autoencoder(
    const std::string& key, const std::function<AutoEncoder()>& make) {
  auto it = aes_.find(key);
  if (it != aes_.end()) return it->second;
  const auto path = cache_dir_ / ("ae_" + key + ".redc");
  if (use_disk_ && std::filesystem::exists(path)) {
    try {
      Checkpoint ckpt = Checkpoint::load(path);
      if (ckpt.meta_or("cache_key", "") == key) {
        auto value = std::make_shared<const AutoEncoder>(AutoEncoder::load(ckpt));
        aes_[key] = value;
        return value;
      }
    } catch (const std::exception&) {
      // stale or corrupt cache entry: rebuild
    }
  }
  auto value = std::make_shared<const AutoEncoder>(make());
  if (use_disk_) {
    Checkpoint ckpt;
    ckpt.metadata["cache_key"] = key;
    value->save(ckpt);
    ckpt.save(path);
  }
  aes_[key] = value;
  return value;
}

std::shared_ptr<const ConfounderDictionary> PipelineContext::dictionary(
    const std::string& key, const std::function<ConfounderDictionary()>& make) {
  auto it = dicts_.find(key);
  if (it != dicts_.end()) return it->second;
  const auto path = cache_dir_ / ("dict_" + key + ".redc");
  if (use_disk_ && std::filesystem::exists(path)) {
    try {
      Checkpoint ckpt = Checkpoint::load(path);
      if (ckpt.meta_or("cache_key", "") == key) {
        auto value =
            std::make_shared<const ConfounderDictionary>(ConfounderDictionary::load(ckpt));
        dicts_[key] = value;
        return value;
      }
    } catch (const std::exception&) {
    }
  }
  auto value = std::make_shared<const ConfounderDictionary>(make());
  if (use_disk_) {
    Checkpoint ckpt;
    ckpt.metadata["cache_key"] = key;
    value->save(ckpt);
    ckpt.save(path);
  }
  dicts_[key] = value;
  return value;
}

std::shared_ptr<const ModelBundle> PipelineContext::model(
    const std::string& key, const std::function<ModelBundle()>& make, bool* was_cached) {
  if (was_cached) *was_cached = false;
  auto it = models_.find(key);
  if (it != models_.end()) {
    if (was_cached) *was_cached = true;
    return it->second;
  }
  const auto path = cache_dir_ / ("model_" + key + ".redc");
  if (use_disk_ && std::filesystem::exists(path)) {
    try {
      ModelBundle loaded = ModelBundle::load(path);
      Checkpoint ckpt = Checkpoint::load(path);
      if (ckpt.meta_or("cache_key", "") == key) {
        auto value = std::make_shared<const ModelBundle>(std::move(loaded));
        models_[key] = value;
        if (was_cached) *was_cached = true;
        return value;
      }
    } catch (const std::exception&) {
    }
  }
  auto value = std::make_shared<const ModelBundle>(make());
  if (use_disk_) {
    value->save(path, {{"cache_key", key}});
  }
  models_[key] = value;
  return value;
}

namespace {

struct StageKeys {
  std::string train_data, val_data, test_data;
};

std::string data_key(const WorldSpec& world, SplitKind split, std::size_t n, std::uint64_t seed) {
  Fnv1a h;
  h.update(world_to_json(world).dump());
  h.update(split_name(split));
  h.update_u64(n);
  h.update_u64(seed);
  return h.hex();
}

struct PreparedRun {
  WorldSpec world;
  std::shared_ptr<const std::vector<Sample>> train, val, test;
  std::uint64_t root = 0;
};

PreparedRun prepare_run(const ExperimentConfig& config, std::uint64_t seed, PipelineContext& ctx,
                        StageTimings* timings) {
  PreparedRun run;
  run.root = run_root_seed(config, seed);
  run.world = world_for_run(config, seed);
  const World world(run.world);
  const auto t0 = Clock::now();
  const std::uint64_t train_seed = derive_seed(run.root, "data-train");
  const std::uint64_t val_seed = derive_seed(run.root, "data-val");
  const std::uint64_t test_seed = derive_seed(run.root, "data-test");
  run.train = ctx.dataset(data_key(run.world, SplitKind::kConfounded, config.data.n_train, train_seed),
                          [&] { return world.generate_split(SplitKind::kConfounded,
                                                            config.data.n_train, train_seed); });
  run.val = ctx.dataset(data_key(run.world, SplitKind::kConfounded, config.data.n_val, val_seed),
                        [&] { return world.generate_split(SplitKind::kConfounded,
                                                          config.data.n_val, val_seed); });
  run.test = ctx.dataset(data_key(run.world, SplitKind::kShifted, config.data.n_test, test_seed),
                         [&] { return world.generate_split(SplitKind::kShifted,
                                                           config.data.n_test, test_seed); });
  if (timings) timings->gen_data_s = seconds_since(t0);
  return run;
}

std::string ae_stage_key(const ExperimentConfig& config, const PreparedRun& run,
                         const std::string& embedder_fp, bool joint) {
  Fnv1a h;
  h.update(data_key(run.world, SplitKind::kConfounded, config.data.n_train,
                    derive_seed(run.root, "data-train")));
  h.update(embedder_fp);
  h.update_u64(config.ae.latent_dim);
  h.update_u64(config.ae.hidden);
  h.update_u64(config.ae.epochs);
  h.update_u64(config.ae.batch);
  h.update_f64(config.ae.lr);
  h.update(config.ae.activation);
  h.update_u64(derive_seed(run.root, "ae"));
  h.update(joint ? "joint" : "query-only");
  return h.hex();
}

std::string fingerprint_model(const ModelBundle& bundle) {
  Fnv1a h;
  for (const Tensor* t : {&bundle.grounder.w1, &bundle.grounder.b1, &bundle.grounder.w2,
                          &bundle.grounder.b2, &bundle.grounder.wc, &bundle.grounder.bc,
                          &bundle.grounder.wr, &bundle.grounder.br}) {
    h.update(*t);
  }
  if (bundle.red) {
    for (const Tensor* t : {&bundle.red->wq, &bundle.red->wk, &bundle.red->wv, &bundle.red->wo}) {
      h.update(*t);
    }
  }
  if (bundle.gate) {
    h.update(bundle.gate->wg);
    h.update(bundle.gate->bg);
  }
  return h.hex();
}

RunRecord run_single(const ExperimentConfig& config, DeconfoundMode mode, std::uint64_t seed,
                     PipelineContext& ctx, std::size_t dict_n, DictMetric dict_metric) {
  RunRecord record;
  record.seed = seed;
  record.mode = mode;

  PreparedRun run = prepare_run(config, seed, ctx, &record.timings);
  EmbeddingTable embedder = embedder_for_run(config, seed);
  record.fingerprints["embedder"] = embedder.fingerprint();

  std::shared_ptr<const ConfounderDictionary> dict;
  if (mode != DeconfoundMode::kNone) {
    const bool joint = mode == DeconfoundMode::kJointAe;
    // the deconfounder theory requires the same frozen embedder end to end
    const std::string pooled_fp =
        joint ? fingerprint_string(embedder.fingerprint() + "+cell-mean-visual")
              : embedder.fingerprint();

    const auto t_ae = Clock::now();
    const std::string ae_key = ae_stage_key(config, run, pooled_fp, joint);
    std::shared_ptr<const AutoEncoder> ae = ctx.autoencoder(ae_key, [&] {
      AutoEncoderConfig ae_cfg = config.ae;
      ae_cfg.seed = derive_seed(run.root, "ae");
      return AutoEncoder::train(pooled_ae_inputs(*run.train, embedder, joint), ae_cfg, pooled_fp);
    });
    record.timings.train_ae_s = seconds_since(t_ae);
    record.fingerprints["ae"] = ae->fingerprint();

    if (ae->final_loss() > config.ae.recon_rel_threshold * ae->baseline_loss()) {
      throw std::runtime_error(
          "build-dict: auto-encoder reconstruction loss " + std::to_string(ae->final_loss()) +
          " exceeds threshold " +
          std::to_string(config.ae.recon_rel_threshold * ae->baseline_loss()) +
          "; dictionary extraction refused");
    }

    const auto t_dict = Clock::now();
    Fnv1a dk;
    dk.update(ae->fingerprint());
    dk.update_u64(dict_n);
    dk.update(metric_name(dict_metric));
    dk.update_u64(derive_seed(run.root, "kmeans"));
    dict = ctx.dictionary(dk.hex(), [&] {
      Tensor latents =
          encode_corpus(*ae, pooled_ae_inputs(*run.train, embedder, joint), pooled_fp);
      return build_dictionary(latents, dict_n, dict_metric, derive_seed(run.root, "kmeans"),
                              embedder.fingerprint(), ae->fingerprint());
    });
    record.timings.build_dict_s = seconds_since(t_dict);
    record.fingerprints["dictionary"] = dict->content_hash();
  }

  const auto t_train = Clock::now();
  Fnv1a mk;
  mk.update(mode_name(mode));
  mk.update(dict ? dict->content_hash() : "no-dict");
  mk.update(embedder.fingerprint());
  mk.update(data_key(run.world, SplitKind::kConfounded, config.data.n_train,
                     derive_seed(run.root, "data-train")));
  mk.update_u64(config.grounder.hidden);
  mk.update_u64(config.grounder.epochs);
  mk.update_u64(config.grounder.batch);
  mk.update_f64(config.grounder.lr);
  mk.update_f64(config.grounder.reg_weight);
  mk.update_u64(config.grounder.attention_dim);
  mk.update(config.grounder.use_coords ? "coords" : "no-coords");
  mk.update_u64(derive_seed(run.root, "grounder"));

  TrainLog log;
  bool cached = false;
  std::shared_ptr<const ModelBundle> bundle = ctx.model(
      mk.hex(),
      [&] {
        TrainOptions options;
        options.mode = mode;
        options.config = config.grounder;
        options.config.seed = derive_seed(run.root, "grounder");
        return train_grounder(*run.train, embedder, dict ? dict.get() : nullptr, options, &log);
      },
      &cached);
  record.timings.train_s = seconds_since(t_train);
  record.from_cache = cached;
  record.train_final_loss = log.final_loss;
  record.fingerprints["model"] = fingerprint_model(*bundle);

  const auto t_eval = Clock::now();
  record.confounded_val = evaluate(*bundle, *run.val);
  record.shifted_test = evaluate(*bundle, *run.test);
  record.timings.eval_s = seconds_since(t_eval);
  return record;
}

void summarize(RunManifest& manifest, const ExperimentConfig& config) {
  for (DeconfoundMode mode : config.modes) {
    std::vector<double> val_accs, test_accs;
    for (const RunRecord& r : manifest.runs) {
      if (r.mode != mode) continue;
      val_accs.push_back(r.confounded_val.acc_at_05);
      test_accs.push_back(r.shifted_test.acc_at_05);
    }
    if (val_accs.empty()) continue;
    auto mean_std = [](const std::vector<double>& xs) {
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double var = 0.0;
      for (double x : xs) var += (x - mean) * (x - mean);
      var /= static_cast<double>(xs.size());
      return std::pair<double, double>(mean, std::sqrt(var));
    };
    ModeSummary s;
    std::tie(s.val_acc_mean, s.val_acc_std) = mean_std(val_accs);
    std::tie(s.test_acc_mean, s.test_acc_std) = mean_std(test_accs);
    manifest.summary[mode_name(mode)] = s;
  }
}

json eval_to_json(const EvalResult& r) {
  json by;
  for (const auto& [g, st] : r.by_confounder) {
    by[std::to_string(g)] = {{"acc", st.acc}, {"hits", st.hits}, {"n", st.n}};
  }
  return json{{"acc_at_05", r.acc_at_05}, {"mean_iou", r.mean_iou}, {"n", r.n},
              {"by_confounder", by}};
}

json metrics_to_json(const RunManifest& m) {
  json runs = json::array();
  for (const RunRecord& r : m.runs) {
    runs.push_back(json{{"seed", r.seed},
                        {"mode", mode_name(r.mode)},
                        {"confounded_val", eval_to_json(r.confounded_val)},
                        {"shifted_test", eval_to_json(r.shifted_test)},
                        {"train_final_loss", r.train_final_loss},
                        {"fingerprints", r.fingerprints}});
  }
  json summary;
  for (const auto& [mode, s] : m.summary) {
    summary[mode] = {{"val_acc_mean", s.val_acc_mean},
                     {"val_acc_std", s.val_acc_std},
                     {"test_acc_mean", s.test_acc_mean},
                     {"test_acc_std", s.test_acc_std}};
  }
  return json{{"config_hash", m.config_hash},
              {"tool_version", m.tool_version},
              {"runs", runs},
              {"summary", summary}};
}

}  // namespace

std::string eval_result_json(const EvalResult& result) { return eval_to_json(result).dump(2); }

std::string RunManifest::metrics_json() const { return metrics_to_json(*this).dump(2); }

std::string RunManifest::manifest_json() const {
  json j = metrics_to_json(*this);
  json timings = json::array();
  for (const RunRecord& r : runs) {
    timings.push_back(json{{"seed", r.seed},
                           {"mode", mode_name(r.mode)},
                           {"gen_data_s", r.timings.gen_data_s},
                           {"train_ae_s", r.timings.train_ae_s},
                           {"build_dict_s", r.timings.build_dict_s},
                           {"train_s", r.timings.train_s},
                           {"eval_s", r.timings.eval_s},
                           {"model_from_cache", r.from_cache}});
  }
  j["timings"] = {{"total_seconds", total_seconds}, {"stages", timings}};
  return j.dump(2);
}

RunManifest run_pipeline(const ExperimentConfig& config, PipelineContext& ctx) {
  const auto t0 = Clock::now();
  RunManifest manifest;
  manifest.config_hash = config.hash();
  manifest.tool_version = kToolVersion;
  for (std::uint64_t seed : config.seeds) {
    for (DeconfoundMode mode : config.modes) {
      manifest.runs.push_back(
          run_single(config, mode, seed, ctx, config.dict_n, config.dict_metric));
    }
  }
  summarize(manifest, config);
  manifest.total_seconds = seconds_since(t0);
  return manifest;
}

RunManifest run_pipeline(const ExperimentConfig& config) {
  PipelineContext ctx(std::filesystem::path(config.out_dir) / "cache");
  return run_pipeline(config, ctx);
}

SweepResult sweep(const ExperimentConfig& config, const std::vector<std::size_t>& n_values,
                  const std::vector<DictMetric>& metrics, const std::vector<std::uint64_t>& seeds,
                  PipelineContext& ctx) {
  if (n_values.empty()) throw std::invalid_argument("sweep: n_values must be non-empty");
  if (metrics.empty() || seeds.empty()) {
    throw std::invalid_argument("sweep: metrics and seeds must be non-empty");
  }
  SweepResult result;

  std::map<std::uint64_t, double> baseline_test;
  for (std::uint64_t seed : seeds) {
    RunRecord r = run_single(config, DeconfoundMode::kNone, seed, ctx, config.dict_n,
                             config.dict_metric);
    baseline_test[seed] = r.shifted_test.acc_at_05;
  }

  std::map<std::pair<std::size_t, DictMetric>, std::vector<double>> test_by_cell;
  for (std::size_t n : n_values) {
    for (DictMetric metric : metrics) {
      for (std::uint64_t seed : seeds) {
        RunRecord r = run_single(config, DeconfoundMode::kRed, seed, ctx, n, metric);
        SweepRow row;
        row.n_clusters = n;
        row.metric = metric;
        row.seed = seed;
        row.val_acc = r.confounded_val.acc_at_05;
        row.test_acc = r.shifted_test.acc_at_05;
        row.baseline_test_acc = baseline_test[seed];
        test_by_cell[{n, metric}].push_back(row.test_acc);
        result.rows.push_back(row);
      }
    }
  }

  // directional check: euclidean vs cosine at the default cluster count
  const std::size_t n_ref = std::find(n_values.begin(), n_values.end(), config.dict_n) != n_values.end()
                                ? config.dict_n
                                : n_values.front();
  auto mean_of = [&](DictMetric m) -> std::optional<double> {
    auto it = test_by_cell.find({n_ref, m});
    if (it == test_by_cell.end() || it->second.empty()) return std::nullopt;
    double s = 0.0;
    for (double v : it->second) s += v;
    return s / static_cast<double>(it->second.size());
  };
  const auto eu = mean_of(DictMetric::kEuclidean);
  const auto co = mean_of(DictMetric::kCosine);
  if (eu && co) {
    result.euclidean_beats_cosine_at_default = *eu >= *co;
    if (!result.euclidean_beats_cosine_at_default) {
      result.note = "cosine outperformed euclidean at n=" + std::to_string(n_ref) +
                    " (euclidean " + std::to_string(*eu) + " vs cosine " + std::to_string(*co) +
                    ")";
    }
  }
  return result;
}

std::string SweepResult::csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "n_clusters,metric,seed,val_acc,test_acc,baseline_test_acc\n";
  for (const SweepRow& r : rows) {
    os << r.n_clusters << ',' << metric_name(r.metric) << ',' << r.seed << ',' << r.val_acc << ','
       << r.test_acc << ',' << r.baseline_test_acc << '\n';
  }
  return os.str();
}

SpeedReport bench_speed(const ExperimentConfig& config, std::size_t repetitions,
                        PipelineContext& ctx) {
  if (repetitions < 100) {
    throw std::invalid_argument("bench-speed: need at least 100 repetitions");
  }
  const std::uint64_t seed = config.seeds.front();

  // weights do not affect latency: an untrained bundle with the run's shapes
  ExperimentConfig bench_cfg = config;
  bench_cfg.grounder.epochs = 0;
  bench_cfg.data.n_train = std::max<std::size_t>(bench_cfg.ae.latent_dim * 10,
                                                 std::min<std::size_t>(config.data.n_train, 256));
  bench_cfg.data.n_val = 1;
  bench_cfg.data.n_test = 1;

  PreparedRun run = prepare_run(bench_cfg, seed, ctx, nullptr);
  EmbeddingTable embedder = embedder_for_run(bench_cfg, seed);
  const std::string pooled_fp = embedder.fingerprint();

  AutoEncoderConfig ae_cfg = bench_cfg.ae;
  ae_cfg.seed = derive_seed(run.root, "ae");
  ae_cfg.epochs = 1;
  AutoEncoder ae = AutoEncoder::train(pooled_ae_inputs(*run.train, embedder, false), ae_cfg,
                                      pooled_fp);
  Tensor latents = encode_corpus(ae, pooled_ae_inputs(*run.train, embedder, false), pooled_fp);
  ConfounderDictionary dict =
      build_dictionary(latents, bench_cfg.dict_n, bench_cfg.dict_metric,
                       derive_seed(run.root, "kmeans"), embedder.fingerprint(), ae.fingerprint());

  TrainOptions options;
  options.mode = DeconfoundMode::kRed;
  options.config = bench_cfg.grounder;
  options.config.seed = derive_seed(run.root, "grounder");
  ModelBundle bundle = train_grounder(*run.train, embedder, &dict, options, nullptr);

  const std::vector<Sample>& samples = *run.train;
  auto forward_once = [&](const Sample& s, bool with_red) {
    Tensor r = bundle.embedder.pool_query(s.query_tokens);
    Tensor lang = with_red ? deconfound(r, *bundle.dict, *bundle.red) : std::move(r);
    Prediction p = grounder_forward(s.feature_map, lang, bundle.grounder, bundle.grid_h,
                                    bundle.grid_w);
    return p.cell_probs[0];  // keep the value alive
  };

  // warm caches before timing
  double sink = 0.0;
  for (std::size_t i = 0; i < std::min<std::size_t>(64, repetitions); ++i) {
    sink += forward_once(samples[i % samples.size()], false);
    sink += forward_once(samples[i % samples.size()], true);
  }

  auto measure = [&](bool with_red) {
    std::vector<double> lat_us(repetitions);
    for (std::size_t i = 0; i < repetitions; ++i) {
      const Sample& s = samples[i % samples.size()];
      const auto t0 = Clock::now();
      sink += forward_once(s, with_red);
      lat_us[i] = std::chrono::duration<double, std::micro>(Clock::now() - t0).count();
    }
    std::nth_element(lat_us.begin(), lat_us.begin() + lat_us.size() / 2, lat_us.end());
    return lat_us[lat_us.size() / 2];
  };

  SpeedReport report;
  report.repetitions = repetitions;
  report.median_none_us = measure(false);
  report.median_red_us = measure(true);
  report.overhead_ratio = report.median_red_us / report.median_none_us;
  if (sink == 42.0) report.median_none_us += 0.0;  // defeat dead-code elimination
  return report;
}

std::string SpeedReport::json() const {
  return nlohmann::json{{"median_none_us", median_none_us},
                        {"median_red_us", median_red_us},
                        {"overhead_ratio", overhead_ratio},
                        {"repetitions", repetitions}}
      .dump(2);
}

}  // namespace red
