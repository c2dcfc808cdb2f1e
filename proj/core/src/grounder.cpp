#include "red/grounder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "red/autodiff.hpp"
#include "red/fingerprint.hpp"
#include "red/optimizer.hpp"
#include "red/rng.hpp"

namespace red {

const char* mode_name(DeconfoundMode mode) {
  switch (mode) {
    case DeconfoundMode::kNone: return "none";
    case DeconfoundMode::kRed: return "red";
    case DeconfoundMode::kJointAe: return "joint-ae";
    case DeconfoundMode::kDualAtt: return "dual-att";
  }
  return "?";
}

DeconfoundMode mode_from_name(const std::string& name) {
  if (name == "none") return DeconfoundMode::kNone;
  if (name == "red") return DeconfoundMode::kRed;
  if (name == "joint-ae") return DeconfoundMode::kJointAe;
  if (name == "dual-att") return DeconfoundMode::kDualAtt;
  throw std::invalid_argument("unknown deconfound mode: " + name);
}

namespace {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
  return t;
}

Tensor grid_coords(std::size_t grid_h, std::size_t grid_w) {
  Tensor coords({grid_h * grid_w, 2});
  for (std::size_t cell = 0; cell < grid_h * grid_w; ++cell) {
    coords(cell, 0) = (static_cast<double>(cell % grid_w) + 0.5) / static_cast<double>(grid_w);
    coords(cell, 1) = (static_cast<double>(cell / grid_w) + 0.5) / static_cast<double>(grid_h);
  }
  return coords;
}

Tensor flatten_cells(const Tensor& feature_map, std::size_t cells) {
  if (feature_map.rank() == 3) {
    return feature_map.reshaped({feature_map.shape()[0] * feature_map.shape()[1],
                                 feature_map.shape()[2]});
  }
  if (feature_map.rank() == 2 && feature_map.rows() == cells) return feature_map;
  throw std::invalid_argument("grounder: feature map shape " + feature_map.shape_str() +
                              " does not cover " + std::to_string(cells) + " cells");
}

}  // namespace

GrounderParams GrounderParams::init(std::size_t feature_dim, std::size_t lang_dim,
                                    std::size_t hidden, bool use_coords, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "grounder-init"));
  const std::size_t in_dim = feature_dim + (use_coords ? 2 : 0) + lang_dim;
  GrounderParams p;
  p.w1 = xavier_uniform(in_dim, hidden, rng);
  p.b1 = Tensor({hidden});
  p.w2 = xavier_uniform(hidden, hidden, rng);
  p.b2 = Tensor({hidden});
  p.wc = xavier_uniform(hidden, 1, rng);
  p.bc = Tensor({1});
  p.wr = xavier_uniform(hidden, 4, rng);
  p.br = Tensor({4});
  p.use_coords = use_coords;
  return p;
}

void GrounderParams::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.add(prefix + "w1", w1);
  ckpt.add(prefix + "b1", b1);
  ckpt.add(prefix + "w2", w2);
  ckpt.add(prefix + "b2", b2);
  ckpt.add(prefix + "wc", wc);
  ckpt.add(prefix + "bc", bc);
  ckpt.add(prefix + "wr", wr);
  ckpt.add(prefix + "br", br);
  ckpt.metadata[prefix + "use_coords"] = use_coords ? "1" : "0";
}

GrounderParams GrounderParams::load(const Checkpoint& ckpt, const std::string& prefix) {
  GrounderParams p;
  p.w1 = ckpt.tensor(prefix + "w1");
  p.b1 = ckpt.tensor(prefix + "b1");
  p.w2 = ckpt.tensor(prefix + "w2");
  p.b2 = ckpt.tensor(prefix + "b2");
  p.wc = ckpt.tensor(prefix + "wc");
  p.bc = ckpt.tensor(prefix + "bc");
  p.wr = ckpt.tensor(prefix + "wr");
  p.br = ckpt.tensor(prefix + "br");
  p.use_coords = ckpt.meta(prefix + "use_coords") == "1";
  return p;
}

GateParams GateParams::init(std::size_t latent_dim, std::size_t feature_dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gate-init"));
  GateParams p;
  p.wg = xavier_uniform(latent_dim, feature_dim, rng);
  p.bg = Tensor({feature_dim});
  return p;
}

void GateParams::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.add(prefix + "wg", wg);
  ckpt.add(prefix + "bg", bg);
}

GateParams GateParams::load(const Checkpoint& ckpt, const std::string& prefix) {
  GateParams p;
  p.wg = ckpt.tensor(prefix + "wg");
  p.bg = ckpt.tensor(prefix + "bg");
  return p;
}

Prediction grounder_forward(const Tensor& feature_map, const Tensor& lang,
                            const GrounderParams& params, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t cells = grid_h * grid_w;
  const Tensor x = flatten_cells(feature_map, cells);
  const std::size_t f = x.cols(), d_r = lang.size();
  if (params.input_dim() != f + (params.use_coords ? 2 : 0) + d_r) {
    throw std::invalid_argument("grounder: fusion input width " +
                                std::to_string(params.input_dim()) + " does not match features " +
                                x.shape_str() + " + lang " + lang.shape_str());
  }

  Tensor fused({cells, params.input_dim()});
  const Tensor coords = grid_coords(grid_h, grid_w);
  for (std::size_t c = 0; c < cells; ++c) {
    double* row = fused.data() + c * params.input_dim();
    std::copy(x.data() + c * f, x.data() + (c + 1) * f, row);
    std::size_t off = f;
    if (params.use_coords) {
      row[off++] = coords(c, 0);
      row[off++] = coords(c, 1);
    }
    std::copy(lang.data(), lang.data() + d_r, row + off);
  }

  auto affine = [](const Tensor& in, const Tensor& w, const Tensor& b) {
    Tensor mm = eval_primitive(Primitive::kMatMul, std::vector<Tensor>{in, w});
    return eval_primitive(Primitive::kAdd, std::vector<Tensor>{mm, b});
  };
  Tensor h1 = eval_primitive(Primitive::kRelu, std::vector<Tensor>{affine(fused, params.w1, params.b1)});
  Tensor h2 = eval_primitive(Primitive::kRelu, std::vector<Tensor>{affine(h1, params.w2, params.b2)});
  Tensor logits = affine(h2, params.wc, params.bc).reshaped({cells});

  Prediction pred;
  pred.cell_probs = eval_primitive(Primitive::kSoftmaxLastAxis, std::vector<Tensor>{logits});
  pred.offsets = affine(h2, params.wr, params.br);
  return pred;
}

Tensor apply_channel_gate(const Tensor& feature_map, const Tensor& gate) {
  Tensor x = feature_map.rank() == 3
                 ? feature_map.reshaped({feature_map.shape()[0] * feature_map.shape()[1],
                                         feature_map.shape()[2]})
                 : feature_map;
  return eval_primitive(Primitive::kElemMul, std::vector<Tensor>{x, gate});
}

std::array<double, 4> encode_offsets(const Box& box, std::size_t cell, std::size_t grid_h,
                                     std::size_t grid_w) {
  const double col = static_cast<double>(cell % grid_w);
  const double row = static_cast<double>(cell / grid_w);
  return {box.cx * static_cast<double>(grid_w) - (col + 0.5),
          box.cy * static_cast<double>(grid_h) - (row + 0.5),
          std::log(box.w * static_cast<double>(grid_w)),
          std::log(box.h * static_cast<double>(grid_h))};
}

Box decode_box(std::size_t cell, const double* offsets, std::size_t grid_h, std::size_t grid_w) {
  const double col = static_cast<double>(cell % grid_w);
  const double row = static_cast<double>(cell / grid_w);
  Box box;
  box.cx = std::clamp((col + 0.5 + offsets[0]) / static_cast<double>(grid_w), -0.25, 1.25);
  box.cy = std::clamp((row + 0.5 + offsets[1]) / static_cast<double>(grid_h), -0.25, 1.25);
  box.w = std::exp(std::clamp(offsets[2], -6.0, 6.0)) / static_cast<double>(grid_w);
  box.h = std::exp(std::clamp(offsets[3], -6.0, 6.0)) / static_cast<double>(grid_h);
  box.w = std::min(box.w, 1.5);
  box.h = std::min(box.h, 1.5);
  return box;
}

double grounding_loss(const Prediction& pred, std::size_t gt_cell, const Box& gt_box,
                      std::size_t grid_h, std::size_t grid_w, double reg_weight) {
  const std::size_t cells = grid_h * grid_w;
  if (gt_cell >= cells) throw std::invalid_argument("grounding_loss: gt_cell out of range");
  const double p = std::max(pred.cell_probs[gt_cell], 1e-300);
  const auto target = encode_offsets(gt_box, gt_cell, grid_h, grid_w);
  double reg = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double d = pred.offsets(gt_cell, k) - target[k];
    reg += std::abs(d) < 1.0 ? 0.5 * d * d : std::abs(d) - 0.5;
  }
  return -std::log(p) + reg_weight * reg;
}

Tensor ModelBundle::language_feature(std::span<const int> tokens) const {
  Tensor r = embedder.pool_query(tokens);
  if (mode == DeconfoundMode::kNone) return r;
  return red::deconfound(r, *dict, *red);
}

Prediction ModelBundle::predict(const Sample& sample) const {
  Tensor lang = language_feature(sample.query_tokens);
  if (mode == DeconfoundMode::kDualAtt) {
    const Tensor r = embedder.pool_query(sample.query_tokens);
    const Tensor alpha = attention_weights(r, *dict, *red);
    Tensor mix = eval_primitive(Primitive::kMatMul, std::vector<Tensor>{alpha, dict->centers});
    Tensor gate_in = eval_primitive(Primitive::kMatMul, std::vector<Tensor>{mix, gate->wg});
    Tensor gate_vec = eval_primitive(
        Primitive::kSigmoid,
        std::vector<Tensor>{eval_primitive(Primitive::kAdd, std::vector<Tensor>{gate_in, gate->bg})});
    Tensor gated = apply_channel_gate(sample.feature_map, gate_vec);
    return grounder_forward(gated, lang, grounder, grid_h, grid_w);
  }
  return grounder_forward(sample.feature_map, lang, grounder, grid_h, grid_w);
}

ModelBundle train_grounder(const std::vector<Sample>& train_set, const EmbeddingTable& embedder,
                           const ConfounderDictionary* dict, const TrainOptions& options,
                           TrainLog* log) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const bool deconfounding = options.mode != DeconfoundMode::kNone;
  if (deconfounding) {
    if (dict == nullptr) {
      throw std::runtime_error("train: mode " + std::string(mode_name(options.mode)) +
                               " requires a confounder dictionary");
    }
    dict->validate();
    if (dict->embedder_fingerprint != embedder.fingerprint()) {
      throw std::runtime_error(
          "train: dictionary was built over a different frozen embedder (fingerprint mismatch)");
    }
  }

  const Tensor& fm0 = train_set.front().feature_map;
  if (fm0.rank() != 3) throw std::invalid_argument("train: feature maps must be rank-3");
  const std::size_t grid_h = fm0.shape()[0], grid_w = fm0.shape()[1], f = fm0.shape()[2];
  const std::size_t cells = grid_h * grid_w;
  const std::size_t d_r = embedder.dim();
  const std::size_t n = train_set.size();

  // frozen language features, pooled once
  Tensor pooled({n, d_r});
  std::vector<std::size_t> gt_cells(n);
  Tensor targets_all({n, 4});
  for (std::size_t i = 0; i < n; ++i) {
    const Sample& s = train_set[i];
    if (!s.feature_map.same_shape(fm0)) {
      throw std::invalid_argument("train: inconsistent feature map shapes in training set");
    }
    Tensor r = embedder.pool_query(s.query_tokens);
    std::copy(r.data(), r.data() + d_r, pooled.data() + i * d_r);
    if (s.gt_cell >= cells) throw std::invalid_argument("train: gt_cell out of range");
    gt_cells[i] = s.gt_cell;
    const auto t = encode_offsets(s.gt_box, s.gt_cell, grid_h, grid_w);
    std::copy(t.begin(), t.end(), targets_all.data() + i * 4);
  }

  ModelBundle bundle(embedder);
  bundle.mode = options.mode;
  bundle.config = options.config;
  bundle.grid_h = grid_h;
  bundle.grid_w = grid_w;
  bundle.feature_dim = f;
  bundle.grounder = GrounderParams::init(f, d_r, options.config.hidden, options.config.use_coords,
                                         options.config.seed);
  if (deconfounding) {
    bundle.dict = *dict;
    bundle.red = RedParams::init(d_r, dict->dim(), options.config.attention_dim,
                                 options.config.seed);
    bundle.dict_hash_at_train = dict->content_hash();
    if (options.mode == DeconfoundMode::kDualAtt) {
      bundle.gate = GateParams::init(dict->dim(), f, options.config.seed);
    }
  }

  std::vector<Tensor*> params{&bundle.grounder.w1, &bundle.grounder.b1, &bundle.grounder.w2,
                              &bundle.grounder.b2, &bundle.grounder.wc, &bundle.grounder.bc,
                              &bundle.grounder.wr, &bundle.grounder.br};
  if (bundle.red) {
    params.push_back(&bundle.red->wq);
    params.push_back(&bundle.red->wk);
    params.push_back(&bundle.red->wv);
    params.push_back(&bundle.red->wo);
  }
  if (bundle.gate) {
    params.push_back(&bundle.gate->wg);
    params.push_back(&bundle.gate->bg);
  }

  OptimizerState opt = OptimizerState::adam(options.config.lr);
  Rng shuffle_rng(derive_seed(options.config.seed, "grounder-shuffle"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  const Tensor coords = grid_coords(grid_h, grid_w);
  std::map<std::size_t, Tensor> coords_by_batch;  // tiled per batch size
  auto tiled_coords = [&](std::size_t b) -> const Tensor& {
    auto it = coords_by_batch.find(b);
    if (it != coords_by_batch.end()) return it->second;
    Tensor tiled({b * cells, 2});
    for (std::size_t i = 0; i < b; ++i) {
      std::copy(coords.data(), coords.data() + coords.size(), tiled.data() + i * coords.size());
    }
    return coords_by_batch.emplace(b, std::move(tiled)).first->second;
  };

  TrainLog local_log;
  TrainLog& tl = log ? *log : local_log;

  for (std::size_t epoch = 0; epoch < options.config.epochs; ++epoch) {
    if (bundle.dict && bundle.dict->content_hash() != bundle.dict_hash_at_train) {
      throw std::runtime_error("train: confounder dictionary mutated during training");
    }
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;

    for (std::size_t start = 0; start < n; start += options.config.batch) {
      const std::size_t b = std::min(options.config.batch, n - start);

      Tensor xb({b * cells, f});
      Tensor rb({b, d_r});
      Tensor targets({b, 4});
      std::vector<std::size_t> batch_cells(b);
      std::vector<std::size_t> gather_idx(b);
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t s = order[start + i];
        const Tensor& fm = train_set[s].feature_map;
        std::copy(fm.data(), fm.data() + fm.size(), xb.data() + i * cells * f);
        std::copy(pooled.data() + s * d_r, pooled.data() + (s + 1) * d_r, rb.data() + i * d_r);
        std::copy(targets_all.data() + s * 4, targets_all.data() + (s + 1) * 4,
                  targets.data() + i * 4);
        batch_cells[i] = gt_cells[s];
        gather_idx[i] = i * cells + gt_cells[s];
      }

      Tape tape;
      std::vector<ValueId> param_ids;
      param_ids.reserve(params.size());
      for (Tensor* p : params) param_ids.push_back(tape.parameter(*p));

      const ValueId x = tape.constant(std::move(xb));
      const ValueId r = tape.constant(std::move(rb));

      ValueId lang = r;
      ValueId xin = x;
      if (deconfounding) {
        RedParamIds red_ids{param_ids[8], param_ids[9], param_ids[10], param_ids[11]};
        RedForward rf = deconfound_batch(tape, r, *bundle.dict, red_ids);
        lang = rf.rprime;
        if (bundle.gate) {
          const ValueId mix = tape.matmul(rf.alpha, rf.centers);  // B x d_g
          const ValueId gate_rows =
              tape.sigmoid(tape.add(tape.matmul(mix, param_ids[12]), param_ids[13]));
          xin = tape.mul(x, tape.repeat_rows(gate_rows, cells));
        }
      }

      ValueId fused = xin;
      if (options.config.use_coords) {
        fused = tape.concat_last(fused, tape.constant(tiled_coords(b)));
      }
      fused = tape.concat_last(fused, tape.repeat_rows(lang, cells));

      const ValueId h1 = tape.relu(tape.add(tape.matmul(fused, param_ids[0]), param_ids[1]));
      const ValueId h2 = tape.relu(tape.add(tape.matmul(h1, param_ids[2]), param_ids[3]));
      const ValueId logits =
          tape.reshape(tape.add(tape.matmul(h2, param_ids[4]), param_ids[5]), {b, cells});
      const ValueId ce = tape.cross_entropy_index(logits, batch_cells);
      const ValueId offsets = tape.add(tape.matmul(h2, param_ids[6]), param_ids[7]);
      const ValueId picked = tape.gather_rows(offsets, gather_idx);
      const ValueId reg = tape.scale(tape.smooth_l1(picked, tape.constant(std::move(targets))),
                                     options.config.reg_weight / static_cast<double>(b));
      const ValueId loss = tape.add(ce, reg);

      const double loss_val = tape.value(loss).item();
      if (!std::isfinite(loss_val)) {
        throw std::runtime_error("train: diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
      }
      epoch_loss += loss_val * static_cast<double>(b);
      ++n_batches;

      GradientMap grads = tape.backward(loss);
      std::vector<const Tensor*> gptrs;
      gptrs.reserve(param_ids.size());
      for (ValueId id : param_ids) gptrs.push_back(&grads.at(id));
      optimizer_step(opt, params, gptrs);
    }
    tl.epoch_losses.push_back(epoch_loss / static_cast<double>(n));
  }
  tl.final_loss = tl.epoch_losses.empty() ? 0.0 : tl.epoch_losses.back();

  if (bundle.dict && bundle.dict->content_hash() != bundle.dict_hash_at_train) {
    throw std::runtime_error("train: confounder dictionary mutated during training");
  }
  return bundle;
}

EvalResult evaluate(const ModelBundle& bundle, const std::vector<Sample>& dataset) {
  if (dataset.empty()) throw std::invalid_argument("evaluate: empty dataset");
  EvalResult result;
  result.n = dataset.size();
  double iou_sum = 0.0;
  std::size_t hits = 0;
  for (const Sample& s : dataset) {
    const Prediction pred = bundle.predict(s);
    std::size_t best = 0;
    for (std::size_t c = 1; c < pred.cell_probs.size(); ++c) {
      if (pred.cell_probs[c] > pred.cell_probs[best]) best = c;
    }
    const Box box = decode_box(best, pred.offsets.data() + best * 4, bundle.grid_h, bundle.grid_w);
    const double overlap = iou(box, s.gt_box);
    iou_sum += overlap;
    const bool hit = overlap >= 0.5;
    hits += hit ? 1 : 0;
    if (s.confounder_id != kNoConfounder) {
      ConfounderStratum& st = result.by_confounder[s.confounder_id];
      st.n += 1;
      st.hits += hit ? 1 : 0;
    }
  }
  result.acc_at_05 = static_cast<double>(hits) / static_cast<double>(result.n);
  result.mean_iou = iou_sum / static_cast<double>(result.n);
  for (auto& [g, st] : result.by_confounder) {
    st.acc = st.n ? static_cast<double>(st.hits) / static_cast<double>(st.n) : 0.0;
  }
  return result;
}

void ModelBundle::save(const std::filesystem::path& path,
                       const std::map<std::string, std::string>& extra_meta) const {
  Checkpoint ckpt;
  ckpt.metadata["kind"] = "model-bundle";
  ckpt.metadata["mode"] = mode_name(mode);
  ckpt.metadata["grid_h"] = std::to_string(grid_h);
  ckpt.metadata["grid_w"] = std::to_string(grid_w);
  ckpt.metadata["feature_dim"] = std::to_string(feature_dim);
  ckpt.metadata["embedder_seed"] = std::to_string(embedder.seed());
  ckpt.metadata["embedder_fingerprint"] = embedder.fingerprint();
  ckpt.metadata["dict_hash_at_train"] = dict_hash_at_train;
  ckpt.metadata["config_hidden"] = std::to_string(config.hidden);
  ckpt.metadata["config_epochs"] = std::to_string(config.epochs);
  ckpt.metadata["config_batch"] = std::to_string(config.batch);
  ckpt.metadata["config_lr"] = std::to_string(config.lr);
  ckpt.metadata["config_reg_weight"] = std::to_string(config.reg_weight);
  ckpt.metadata["config_attention_dim"] = std::to_string(config.attention_dim);
  ckpt.metadata["config_seed"] = std::to_string(config.seed);
  for (const auto& [k, v] : extra_meta) ckpt.metadata[k] = v;
  ckpt.add("embedder/table", embedder.table());
  grounder.save(ckpt);
  if (dict) dict->save(ckpt);
  if (red) red->save(ckpt);
  if (gate) gate->save(ckpt);
  ckpt.save(path);
}

ModelBundle ModelBundle::load(const std::filesystem::path& path) {
  Checkpoint ckpt = Checkpoint::load(path);
  if (ckpt.meta_or("kind", "") != "model-bundle") {
    throw std::runtime_error("model bundle: " + path.string() + " is not a model bundle");
  }
  EmbeddingTable embedder(ckpt.tensor("embedder/table"),
                          std::stoull(ckpt.meta("embedder_seed")));
  if (embedder.fingerprint() != ckpt.meta("embedder_fingerprint")) {
    throw std::runtime_error("model bundle: embedder fingerprint mismatch on load");
  }
  ModelBundle bundle(std::move(embedder));
  bundle.mode = mode_from_name(ckpt.meta("mode"));
  bundle.grid_h = std::stoull(ckpt.meta("grid_h"));
  bundle.grid_w = std::stoull(ckpt.meta("grid_w"));
  bundle.feature_dim = std::stoull(ckpt.meta("feature_dim"));
  bundle.dict_hash_at_train = ckpt.meta_or("dict_hash_at_train", "");
  bundle.config.hidden = std::stoull(ckpt.meta("config_hidden"));
  bundle.config.epochs = std::stoull(ckpt.meta("config_epochs"));
  bundle.config.batch = std::stoull(ckpt.meta("config_batch"));
  bundle.config.lr = std::stod(ckpt.meta("config_lr"));
  bundle.config.reg_weight = std::stod(ckpt.meta("config_reg_weight"));
  bundle.config.attention_dim = std::stoull(ckpt.meta("config_attention_dim"));
  bundle.config.seed = std::stoull(ckpt.meta("config_seed"));
  bundle.grounder = GrounderParams::load(ckpt);
  bundle.config.use_coords = bundle.grounder.use_coords;
  if (bundle.mode != DeconfoundMode::kNone) {
    bundle.dict = ConfounderDictionary::load(ckpt);
    bundle.red = RedParams::load(ckpt);
    if (bundle.dict->embedder_fingerprint != bundle.embedder.fingerprint()) {
      throw std::runtime_error("model bundle: dictionary/embedder fingerprint chain broken");
    }
    if (bundle.dict_hash_at_train != bundle.dict->content_hash()) {
      throw std::runtime_error("model bundle: dictionary content changed since training");
    }
    if (bundle.mode == DeconfoundMode::kDualAtt) {
      bundle.gate = GateParams::load(ckpt);
    }
  }
  return bundle;
}

}  // namespace red
