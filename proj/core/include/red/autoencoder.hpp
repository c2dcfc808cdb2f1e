#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "red/checkpoint.hpp"
#include "red/tensor.hpp"

namespace red {

struct AutoEncoderConfig {
  std::size_t latent_dim = 16;
  std::size_t hidden = 128;
  std::size_t epochs = 100;
  std::size_t batch = 64;
  double lr = 1e-3;
  // final loss must come in under this fraction of the predict-the-mean baseline
  double recon_rel_threshold = 0.5;
  std::string activation = "tanh";  // hidden activation: tanh | linear
  std::uint64_t seed = 1;
};

/// Deterministic auto-encoder over pooled query features. Encoder latents are
/// the substitute confounders; the decoder exists only to drive the
/// reconstruction loss.
class AutoEncoder {
 public:
  static AutoEncoder train(const Tensor& pooled_queries, const AutoEncoderConfig& config,
                           const std::string& embedder_fingerprint);

  Tensor encode(const Tensor& pooled_rows) const;       // M x latent_dim
  Tensor reconstruct(const Tensor& pooled_rows) const;  // M x input_dim

  std::size_t input_dim() const { return w_enc1_.shape()[0]; }
  std::size_t latent_dim() const { return config_.latent_dim; }
  const AutoEncoderConfig& config() const { return config_; }
  const std::vector<double>& loss_curve() const { return loss_curve_; }
  double final_loss() const { return loss_curve_.empty() ? 0.0 : loss_curve_.back(); }
  double baseline_loss() const { return baseline_loss_; }
  const std::string& fingerprint() const { return fingerprint_; }
  const std::string& embedder_fingerprint() const { return embedder_fingerprint_; }

  void save(Checkpoint& ckpt, const std::string& prefix = "ae/") const;
  static AutoEncoder load(const Checkpoint& ckpt, const std::string& prefix = "ae/");

 private:
  AutoEncoder() = default;
  void fingerprint_weights();

  AutoEncoderConfig config_;
  Tensor w_enc1_, b_enc1_, w_enc2_, b_enc2_;
  Tensor w_dec1_, b_dec1_, w_dec2_, b_dec2_;
  std::vector<double> loss_curve_;  // per-epoch mean reconstruction loss
  double baseline_loss_ = 0.0;
  std::string fingerprint_;
  std::string embedder_fingerprint_;
};

/// Encode every pooled query; hard error when the pooled features come from a
/// different embedder than the one the auto-encoder was trained on.
Tensor encode_corpus(const AutoEncoder& ae, const Tensor& pooled_queries,
                     const std::string& embedder_fingerprint);

struct ResidualIndependenceReport {
  double raw_mean_abs_offdiag = 0.0;
  double residual_mean_abs_offdiag = 0.0;
  bool pass = false;
};

/// Empirical check of the factor-model property: residuals after
/// reconstruction should be less cross-correlated than the raw features.
ResidualIndependenceReport residual_independence_report(const AutoEncoder& ae,
                                                        const Tensor& pooled_queries);

}  // namespace red
