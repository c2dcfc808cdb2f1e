#pragma once

#include <cstddef>
#include <vector>

#include "red/tensor.hpp"

namespace red {

enum class OptKind { kSgd, kAdam };

struct OptimizerState {
  OptKind kind = OptKind::kSgd;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<Tensor> m;  // adam first moments, aligned with params
  std::vector<Tensor> v;  // adam second moments

  static OptimizerState sgd(double lr) { return {OptKind::kSgd, lr}; }
  static OptimizerState adam(double lr) { return {OptKind::kAdam, lr}; }
};

/// In-place update of params from grads. sgd: p -= lr*g; adam: bias-corrected.
void optimizer_step(OptimizerState& state, const std::vector<Tensor*>& params,
                    const std::vector<const Tensor*>& grads);

}  // namespace red
