#pragma once

#include <cstdint>

#include "red/autodiff.hpp"
#include "red/checkpoint.hpp"
#include "red/kmeans.hpp"
#include "red/tensor.hpp"

namespace red {

/// Top-down attention over the frozen confounder dictionary. Scores come
/// from query/key projections of r and the dictionary entries, the empirical
/// prior enters as a log-prior inside the softmax, and the attended mixture is
/// concatenated back onto r and projected, so r' is a drop-in replacement
/// for r of the same width.
struct RedParams {
  Tensor wq;  // d_r x d_a
  Tensor wk;  // d_g x d_a
  Tensor wv;  // d_g x d_a
  Tensor wo;  // (d_r + d_a) x d_r

  std::size_t query_dim() const { return wq.shape()[0]; }
  std::size_t latent_dim() const { return wk.shape()[0]; }
  std::size_t attention_dim() const { return wq.shape()[1]; }

  static RedParams init(std::size_t d_r, std::size_t d_g, std::size_t d_a, std::uint64_t seed);
  /// W_o = [I; 0]: r' reproduces r bitwise, the deconfounding path contributes zero.
  static RedParams identity_passthrough(std::size_t d_r, std::size_t d_g, std::size_t d_a);

  void save(Checkpoint& ckpt, const std::string& prefix = "red/") const;
  static RedParams load(const Checkpoint& ckpt, const std::string& prefix = "red/");
};

/// alpha over dictionary entries for a single pooled query r (length N).
Tensor attention_weights(const Tensor& r, const ConfounderDictionary& dict, const RedParams& params);

/// Deconfounded language feature r' for a single pooled query (length d_r).
Tensor deconfound(const Tensor& r, const ConfounderDictionary& dict, const RedParams& params);

/// Tape-building batched deconfound; gradient flows into the projections and
/// r_batch but never into the dictionary (entered as a constant).
struct RedParamIds {
  ValueId wq, wk, wv, wo;
};

struct RedForward {
  ValueId alpha;    // B x N
  ValueId context;  // B x d_a, the attended value mixture
  ValueId rprime;   // B x d_r
  ValueId centers;  // the dictionary constant, N x d_g
};

RedForward deconfound_batch(Tape& tape, ValueId r_batch, const ConfounderDictionary& dict,
                            const RedParamIds& ids);

}  // namespace red
