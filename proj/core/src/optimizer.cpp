#include "red/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace red {

void optimizer_step(OptimizerState& state, const std::vector<Tensor*>& params,
                    const std::vector<const Tensor*>& grads) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("optimizer_step: " + std::to_string(params.size()) +
                                " params vs " + std::to_string(grads.size()) + " grads");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i])) {
      throw std::invalid_argument("optimizer_step: param/grad shape mismatch at index " +
                                  std::to_string(i) + ": " + params[i]->shape_str() + " vs " +
                                  grads[i]->shape_str());
    }
  }

  state.step += 1;

  if (state.kind == OptKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = *grads[i];
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= state.lr * g[j];
    }
    return;
  }

  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("optimizer_step: adam state holds " +
                                std::to_string(state.m.size()) + " moments for " +
                                std::to_string(params.size()) + " params");
  }

  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace red
