#include "red/red_attention.hpp"

#include <cmath>
#include <stdexcept>

#include "red/rng.hpp"

namespace red {

namespace {

Tensor xavier_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
  return t;
}

Tensor log_prior_row(const ConfounderDictionary& dict) {
  Tensor lp({dict.prior.size()});
  for (std::size_t i = 0; i < dict.prior.size(); ++i) lp[i] = std::log(dict.prior[i]);
  return lp;
}

}  // namespace

RedParams RedParams::init(std::size_t d_r, std::size_t d_g, std::size_t d_a, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "red-init"));
  RedParams p;
  p.wq = xavier_uniform(d_r, d_a, rng);
  p.wk = xavier_uniform(d_g, d_a, rng);
  p.wv = xavier_uniform(d_g, d_a, rng);
  p.wo = xavier_uniform(d_r + d_a, d_r, rng);
  return p;
}

RedParams RedParams::identity_passthrough(std::size_t d_r, std::size_t d_g, std::size_t d_a) {
  RedParams p;
  p.wq = Tensor({d_r, d_a});
  p.wk = Tensor({d_g, d_a});
  p.wv = Tensor({d_g, d_a});
  p.wo = Tensor({d_r + d_a, d_r});
  for (std::size_t i = 0; i < d_r; ++i) p.wo(i, i) = 1.0;
  return p;
}

void RedParams::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.add(prefix + "wq", wq);
  ckpt.add(prefix + "wk", wk);
  ckpt.add(prefix + "wv", wv);
  ckpt.add(prefix + "wo", wo);
}

RedParams RedParams::load(const Checkpoint& ckpt, const std::string& prefix) {
  RedParams p;
  p.wq = ckpt.tensor(prefix + "wq");
  p.wk = ckpt.tensor(prefix + "wk");
  p.wv = ckpt.tensor(prefix + "wv");
  p.wo = ckpt.tensor(prefix + "wo");
  return p;
}

RedForward deconfound_batch(Tape& tape, ValueId r_batch, const ConfounderDictionary& dict,
                            const RedParamIds& ids) {
  if (dict.size() == 0) throw std::invalid_argument("deconfound: empty dictionary");
  const double inv_sqrt_da = 1.0 / std::sqrt(static_cast<double>(tape.value(ids.wq).cols()));
  const ValueId centers = tape.constant(dict.centers);
  const ValueId log_prior = tape.constant(log_prior_row(dict));

  const ValueId q = tape.matmul(r_batch, ids.wq);             // B x d_a
  const ValueId k = tape.matmul(centers, ids.wk);             // N x d_a
  const ValueId scores = tape.scale(tape.matmul(q, k, /*transpose_b=*/true), inv_sqrt_da);
  const ValueId alpha = tape.softmax_last(tape.add(scores, log_prior));  // B x N
  const ValueId v = tape.matmul(centers, ids.wv);             // N x d_a
  const ValueId context = tape.matmul(alpha, v);              // B x d_a
  const ValueId rprime = tape.matmul(tape.concat_last(r_batch, context), ids.wo);
  return RedForward{alpha, context, rprime, centers};
}

Tensor attention_weights(const Tensor& r, const ConfounderDictionary& dict,
                         const RedParams& params) {
  if (r.size() != params.query_dim()) {
    throw std::invalid_argument("attention_weights: query width " + std::to_string(r.size()) +
                                " does not match W_q rows " + std::to_string(params.query_dim()));
  }
  Tape tape;
  RedParamIds ids{tape.constant(params.wq), tape.constant(params.wk), tape.constant(params.wv),
                  tape.constant(params.wo)};
  const ValueId rb = tape.constant(r.reshaped({1, r.size()}));
  RedForward fwd = deconfound_batch(tape, rb, dict, ids);
  return tape.value(fwd.alpha).reshaped({dict.size()});
}

Tensor deconfound(const Tensor& r, const ConfounderDictionary& dict, const RedParams& params) {
  if (r.size() != params.query_dim()) {
    throw std::invalid_argument("deconfound: query width " + std::to_string(r.size()) +
                                " does not match W_q rows " + std::to_string(params.query_dim()));
  }
  if (dict.dim() != params.latent_dim()) {
    throw std::invalid_argument("deconfound: dictionary latent dim " + std::to_string(dict.dim()) +
                                " does not match W_k rows " + std::to_string(params.latent_dim()));
  }
  Tape tape;
  RedParamIds ids{tape.constant(params.wq), tape.constant(params.wk), tape.constant(params.wv),
                  tape.constant(params.wo)};
  const ValueId rb = tape.constant(r.reshaped({1, r.size()}));
  RedForward fwd = deconfound_batch(tape, rb, dict, ids);
  return tape.value(fwd.rprime).reshaped({r.size()});
}

}  // namespace red
