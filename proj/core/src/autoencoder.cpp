#include "red/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "red/autodiff.hpp"
#include "red/fingerprint.hpp"
#include "red/optimizer.hpp"
#include "red/rng.hpp"

namespace red {

namespace {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
  return t;
}

}  // namespace

AutoEncoder AutoEncoder::train(const Tensor& pooled_queries, const AutoEncoderConfig& config,
                               const std::string& embedder_fingerprint) {
  if (pooled_queries.rank() != 2) {
    throw std::invalid_argument("autoencoder: pooled queries must be rank-2");
  }
  const std::size_t m = pooled_queries.rows(), d = pooled_queries.cols();
  if (m < 10 * config.latent_dim) {
    throw std::invalid_argument("autoencoder: need at least " +
                                std::to_string(10 * config.latent_dim) + " queries, got " +
                                std::to_string(m));
  }
  if (config.activation != "tanh" && config.activation != "linear") {
    throw std::invalid_argument("autoencoder: unknown activation " + config.activation);
  }

  AutoEncoder ae;
  ae.config_ = config;
  ae.embedder_fingerprint_ = embedder_fingerprint;

  Rng init(derive_seed(config.seed, "ae-init"));
  ae.w_enc1_ = xavier_uniform(d, config.hidden, init);
  ae.b_enc1_ = Tensor({config.hidden});
  ae.w_enc2_ = xavier_uniform(config.hidden, config.latent_dim, init);
  ae.b_enc2_ = Tensor({config.latent_dim});
  ae.w_dec1_ = xavier_uniform(config.latent_dim, config.hidden, init);
  ae.b_dec1_ = Tensor({config.hidden});
  ae.w_dec2_ = xavier_uniform(config.hidden, d, init);
  ae.b_dec2_ = Tensor({d});

  // predict-the-mean baseline, the scale the relative threshold is judged on
  {
    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < d; ++c) mean[c] += pooled_queries(r, c);
    for (double& v : mean) v /= static_cast<double>(m);
    double sq = 0.0;
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = pooled_queries(r, c) - mean[c];
        sq += diff * diff;
      }
    ae.baseline_loss_ = sq / static_cast<double>(m);
  }

  std::vector<Tensor*> params{&ae.w_enc1_, &ae.b_enc1_, &ae.w_enc2_, &ae.b_enc2_,
                              &ae.w_dec1_, &ae.b_dec1_, &ae.w_dec2_, &ae.b_dec2_};
  OptimizerState opt = OptimizerState::adam(config.lr);
  Rng shuffle_rng(derive_seed(config.seed, "ae-shuffle"));
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  const bool use_tanh = config.activation == "tanh";

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < m; start += config.batch) {
      const std::size_t b = std::min(config.batch, m - start);
      Tensor xb({b, d});
      for (std::size_t i = 0; i < b; ++i) {
        const double* row = pooled_queries.data() + order[start + i] * d;
        std::copy(row, row + d, xb.data() + i * d);
      }

      Tape tape;
      std::vector<ValueId> ids;
      for (Tensor* p : params) ids.push_back(tape.parameter(*p));
      const ValueId x = tape.constant(std::move(xb));
      ValueId h1 = tape.add(tape.matmul(x, ids[0]), ids[1]);
      if (use_tanh) h1 = tape.tanh(h1);
      const ValueId z = tape.add(tape.matmul(h1, ids[2]), ids[3]);
      ValueId h2 = tape.add(tape.matmul(z, ids[4]), ids[5]);
      if (use_tanh) h2 = tape.tanh(h2);
      const ValueId xr = tape.add(tape.matmul(h2, ids[6]), ids[7]);
      // mean over rows of squared euclidean distance
      const ValueId diff = tape.add(xr, tape.scale(x, -1.0));
      const ValueId loss = tape.scale(tape.sum_all(tape.mul(diff, diff)), 1.0 / static_cast<double>(b));

      const double loss_val = tape.value(loss).item();
      if (!std::isfinite(loss_val)) {
        throw std::runtime_error("autoencoder: training diverged (non-finite loss) at epoch " +
                                 std::to_string(epoch));
      }
      epoch_loss += loss_val;
      ++n_batches;

      GradientMap grads = tape.backward(loss);
      std::vector<const Tensor*> gptrs;
      for (ValueId id : ids) gptrs.push_back(&grads.at(id));
      optimizer_step(opt, params, gptrs);
    }
    ae.loss_curve_.push_back(epoch_loss / static_cast<double>(n_batches));
  }

  ae.fingerprint_weights();
  return ae;
}

Tensor AutoEncoder::encode(const Tensor& pooled_rows) const {
  const Tensor& x = pooled_rows;
  if (x.rank() != 2 || x.cols() != input_dim()) {
    throw std::invalid_argument("autoencoder: encode expects rank-2 input of width " +
                                std::to_string(input_dim()));
  }
  Tensor h = eval_primitive(Primitive::kAdd,
                            std::vector<Tensor>{eval_primitive(Primitive::kMatMul,
                                                               std::vector<Tensor>{x, w_enc1_}),
                                                b_enc1_});
  if (config_.activation == "tanh") {
    h = eval_primitive(Primitive::kTanh, std::vector<Tensor>{h});
  }
  return eval_primitive(Primitive::kAdd,
                        std::vector<Tensor>{eval_primitive(Primitive::kMatMul,
                                                           std::vector<Tensor>{h, w_enc2_}),
                                            b_enc2_});
}

Tensor AutoEncoder::reconstruct(const Tensor& pooled_rows) const {
  Tensor z = encode(pooled_rows);
  Tensor h = eval_primitive(Primitive::kAdd,
                            std::vector<Tensor>{eval_primitive(Primitive::kMatMul,
                                                               std::vector<Tensor>{z, w_dec1_}),
                                                b_dec1_});
  if (config_.activation == "tanh") {
    h = eval_primitive(Primitive::kTanh, std::vector<Tensor>{h});
  }
  return eval_primitive(Primitive::kAdd,
                        std::vector<Tensor>{eval_primitive(Primitive::kMatMul,
                                                           std::vector<Tensor>{h, w_dec2_}),
                                            b_dec2_});
}

void AutoEncoder::fingerprint_weights() {
  Fnv1a h;
  for (const Tensor* t : {&w_enc1_, &b_enc1_, &w_enc2_, &b_enc2_, &w_dec1_, &b_dec1_, &w_dec2_,
                          &b_dec2_}) {
    h.update(*t);
  }
  h.update(embedder_fingerprint_);
  fingerprint_ = h.hex();
}

void AutoEncoder::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.add(prefix + "w_enc1", w_enc1_);
  ckpt.add(prefix + "b_enc1", b_enc1_);
  ckpt.add(prefix + "w_enc2", w_enc2_);
  ckpt.add(prefix + "b_enc2", b_enc2_);
  ckpt.add(prefix + "w_dec1", w_dec1_);
  ckpt.add(prefix + "b_dec1", b_dec1_);
  ckpt.add(prefix + "w_dec2", w_dec2_);
  ckpt.add(prefix + "b_dec2", b_dec2_);
  Tensor curve = Tensor::from_vector(loss_curve_);
  if (!loss_curve_.empty()) ckpt.add(prefix + "loss_curve", std::move(curve));
  ckpt.metadata[prefix + "latent_dim"] = std::to_string(config_.latent_dim);
  ckpt.metadata[prefix + "hidden"] = std::to_string(config_.hidden);
  ckpt.metadata[prefix + "activation"] = config_.activation;
  ckpt.metadata[prefix + "seed"] = std::to_string(config_.seed);
  ckpt.metadata[prefix + "epochs"] = std::to_string(config_.epochs);
  ckpt.metadata[prefix + "baseline_loss"] = std::to_string(baseline_loss_);
  ckpt.metadata[prefix + "fingerprint"] = fingerprint_;
  ckpt.metadata[prefix + "embedder_fingerprint"] = embedder_fingerprint_;
}

AutoEncoder AutoEncoder::load(const Checkpoint& ckpt, const std::string& prefix) {
  AutoEncoder ae;
  ae.w_enc1_ = ckpt.tensor(prefix + "w_enc1");
  ae.b_enc1_ = ckpt.tensor(prefix + "b_enc1");
  ae.w_enc2_ = ckpt.tensor(prefix + "w_enc2");
  ae.b_enc2_ = ckpt.tensor(prefix + "b_enc2");
  ae.w_dec1_ = ckpt.tensor(prefix + "w_dec1");
  ae.b_dec1_ = ckpt.tensor(prefix + "b_dec1");
  ae.w_dec2_ = ckpt.tensor(prefix + "w_dec2");
  ae.b_dec2_ = ckpt.tensor(prefix + "b_dec2");
  if (ckpt.has(prefix + "loss_curve")) {
    const Tensor& c = ckpt.tensor(prefix + "loss_curve");
    ae.loss_curve_.assign(c.data(), c.data() + c.size());
  }
  ae.config_.latent_dim = std::stoull(ckpt.meta(prefix + "latent_dim"));
  ae.config_.hidden = std::stoull(ckpt.meta(prefix + "hidden"));
  ae.config_.activation = ckpt.meta(prefix + "activation");
  ae.config_.seed = std::stoull(ckpt.meta(prefix + "seed"));
  ae.config_.epochs = std::stoull(ckpt.meta(prefix + "epochs"));
  ae.baseline_loss_ = std::stod(ckpt.meta(prefix + "baseline_loss"));
  ae.embedder_fingerprint_ = ckpt.meta(prefix + "embedder_fingerprint");
  ae.fingerprint_weights();
  if (ae.fingerprint_ != ckpt.meta(prefix + "fingerprint")) {
    throw std::runtime_error("autoencoder: fingerprint mismatch on load");
  }
  return ae;
}

Tensor encode_corpus(const AutoEncoder& ae, const Tensor& pooled_queries,
                     const std::string& embedder_fingerprint) {
  if (embedder_fingerprint != ae.embedder_fingerprint()) {
    throw std::runtime_error(
        "encode_corpus: embedder fingerprint mismatch; queries were pooled by a different "
        "embedder than the auto-encoder was trained on");
  }
  return ae.encode(pooled_queries);
}

ResidualIndependenceReport residual_independence_report(const AutoEncoder& ae,
                                                        const Tensor& pooled_queries) {
  const std::size_t m = pooled_queries.rows(), d = pooled_queries.cols();
  if (m < 30) {
    throw std::invalid_argument("residual independence: need at least 30 queries, got " +
                                std::to_string(m));
  }

  auto mean_abs_offdiag = [](const Tensor& x) {
    const std::size_t m = x.rows(), d = x.cols();
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < d; ++c) mean[c] += x(r, c);
    for (double& v : mean) v /= static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < d; ++c) {
        const double dv = x(r, c) - mean[c];
        var[c] += dv * dv;
      }
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = i + 1; j < d; ++j) {
        double cov = 0.0;
        for (std::size_t r = 0; r < m; ++r) {
          cov += (x(r, i) - mean[i]) * (x(r, j) - mean[j]);
        }
        const double denom = std::sqrt(var[i] * var[j]);
        // zero-variance columns contribute zero correlation
        const double corr = denom > 0.0 ? cov / denom : 0.0;
        total += std::abs(corr);
        ++count;
      }
    }
    return count ? total / static_cast<double>(count) : 0.0;
  };

  Tensor recon = ae.reconstruct(pooled_queries);
  Tensor residual(pooled_queries.shape());
  for (std::size_t i = 0; i < residual.size(); ++i) {
    residual[i] = pooled_queries[i] - recon[i];
  }

  ResidualIndependenceReport report;
  report.raw_mean_abs_offdiag = mean_abs_offdiag(pooled_queries);
  report.residual_mean_abs_offdiag = mean_abs_offdiag(residual);
  report.pass = report.residual_mean_abs_offdiag < report.raw_mean_abs_offdiag;
  return report;
}

}  // namespace red
