#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "red/embedding.hpp"
#include "red/kmeans.hpp"
#include "red/red_attention.hpp"
#include "red/tensor.hpp"
#include "red/world.hpp"

namespace red {

enum class DeconfoundMode { kNone, kRed, kJointAe, kDualAtt };

const char* mode_name(DeconfoundMode mode);
DeconfoundMode mode_from_name(const std::string& name);

struct GrounderConfig {
  std::size_t hidden = 48;
  std::size_t epochs = 60;
  std::size_t batch = 32;
  double lr = 1e-3;
  bool use_coords = true;  // cell-center coordinates join the fused features
  double reg_weight = 1.0;
  std::size_t attention_dim = 32;  // d_a of the RED attention
  std::uint64_t seed = 1;
};

/// Per-cell fusion MLP with shared weights, a cell-classification head and a
/// box-regression head.
struct GrounderParams {
  Tensor w1, b1, w2, b2;
  Tensor wc, bc;  // hidden -> 1 logit per cell
  Tensor wr, br;  // hidden -> 4 offsets per cell
  bool use_coords = true;

  std::size_t input_dim() const { return w1.shape()[0]; }
  std::size_t hidden_dim() const { return w1.shape()[1]; }

  static GrounderParams init(std::size_t feature_dim, std::size_t lang_dim, std::size_t hidden,
                             bool use_coords, std::uint64_t seed);

  void save(Checkpoint& ckpt, const std::string& prefix = "grounder/") const;
  static GrounderParams load(const Checkpoint& ckpt, const std::string& prefix = "grounder/");
};

/// Channel gate for the dual-attention ablation: a sigmoid over feature
/// channels driven by the attended dictionary mixture.
struct GateParams {
  Tensor wg;  // d_g x feature_dim
  Tensor bg;  // feature_dim

  static GateParams init(std::size_t latent_dim, std::size_t feature_dim, std::uint64_t seed);
  void save(Checkpoint& ckpt, const std::string& prefix = "gate/") const;
  static GateParams load(const Checkpoint& ckpt, const std::string& prefix = "gate/");
};

struct Prediction {
  Tensor cell_probs;  // length grid_h * grid_w, on the simplex
  Tensor offsets;     // cells x 4: dx, dy, log dw, log dh
};

/// Shared-weight forward over every cell. feature_map is grid_h x grid_w x F
/// (or cells x F); lang is the (deconfounded) language feature.
Prediction grounder_forward(const Tensor& feature_map, const Tensor& lang,
                            const GrounderParams& params, std::size_t grid_h, std::size_t grid_w);

/// Optional per-channel gate applied to every cell before fusion (dual-att).
Tensor apply_channel_gate(const Tensor& feature_map, const Tensor& gate);

std::array<double, 4> encode_offsets(const Box& box, std::size_t cell, std::size_t grid_h,
                                     std::size_t grid_w);
Box decode_box(std::size_t cell, const double* offsets, std::size_t grid_h, std::size_t grid_w);

/// Cross-entropy on the ground-truth cell plus smooth-L1 on that cell's
/// offsets, weighted 1 : reg_weight.
double grounding_loss(const Prediction& pred, std::size_t gt_cell, const Box& gt_box,
                      std::size_t grid_h, std::size_t grid_w, double reg_weight = 1.0);

struct ConfounderStratum {
  std::size_t hits = 0;
  std::size_t n = 0;
  double acc = 0.0;
};

struct EvalResult {
  double acc_at_05 = 0.0;
  double mean_iou = 0.0;
  std::size_t n = 0;
  std::map<std::size_t, ConfounderStratum> by_confounder;
};

/// Everything needed to run inference: the frozen embedder, the optional
/// deconfounding stage, and the grounder, with the fingerprint chain that ties
/// them together.
struct ModelBundle {
  explicit ModelBundle(EmbeddingTable embedder_table) : embedder(std::move(embedder_table)) {}

  DeconfoundMode mode = DeconfoundMode::kNone;
  EmbeddingTable embedder;
  std::optional<ConfounderDictionary> dict;
  std::optional<RedParams> red;
  std::optional<GateParams> gate;
  GrounderParams grounder;
  GrounderConfig config;
  std::size_t grid_h = 0, grid_w = 0, feature_dim = 0;
  std::string dict_hash_at_train;  // immutability audit trail

  /// Deconfounded (or raw) language feature for a query, per the mode.
  Tensor language_feature(std::span<const int> tokens) const;
  Prediction predict(const Sample& sample) const;

  void save(const std::filesystem::path& path,
            const std::map<std::string, std::string>& extra_meta = {}) const;
  static ModelBundle load(const std::filesystem::path& path);
};

struct TrainLog {
  std::vector<double> epoch_losses;
  double final_loss = 0.0;
};

struct TrainOptions {
  DeconfoundMode mode = DeconfoundMode::kNone;
  GrounderConfig config;
};

/// Algorithm: per batch, extract (x, r); deconfound r when the mode says so;
/// minimize cross-entropy + box regression. The dictionary stays frozen and is
/// hash-checked every epoch.
ModelBundle train_grounder(const std::vector<Sample>& train_set, const EmbeddingTable& embedder,
                           const ConfounderDictionary* dict, const TrainOptions& options,
                           TrainLog* log = nullptr);

EvalResult evaluate(const ModelBundle& bundle, const std::vector<Sample>& dataset);

}  // namespace red
