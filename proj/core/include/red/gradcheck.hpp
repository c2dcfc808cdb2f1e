#pragma once

#include <functional>
#include <string>
#include <vector>

#include "red/autodiff.hpp"
#include "red/tensor.hpp"

namespace red {

/// Builds a scalar loss on the given tape from parameter value ids (one per
/// parameter tensor, in order). Must be deterministic.
using ModelClosure = std::function<ValueId(Tape&, const std::vector<ValueId>&)>;

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;  // coordinates at a kink, excluded
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> params;
  bool pass = false;
  std::string diagnostic;  // non-empty on closure failure (non-finite loss, throw)
};

struct GradCheckOptions {
  double step = 1e-5;
  // 0 = check every coordinate; otherwise an even deterministic subsample per tensor
  std::size_t max_coords_per_param = 0;
  std::vector<std::string> names;
};

/// Compare reverse-mode gradients against central finite differences.
/// Coordinates where the curvature blows up (a kink under the probe) are
/// flagged non-checkable and excluded from the pass/fail decision.
GradCheckReport gradient_check(const ModelClosure& closure, std::vector<Tensor> params,
                               double tolerance, const GradCheckOptions& options = {});

}  // namespace red
