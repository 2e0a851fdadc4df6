#pragma once

#include <string>
#include <vector>

#include "biomamba/model.hpp"

namespace biomamba {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckResult> checks;

  const GradCheckResult& worst() const;
  bool passed(double tolerance) const;
};

// Toy dimensions for the end-to-end check: batch 2, T=32, C=3, D=16,
// d_state=8, two blocks.
ModelConfig gradcheck_config();

// Runs every finite-difference check whose name contains `filter` (empty
// runs all). Each check compares reverse-mode gradients against central
// differences at step sizes 1e-5 and 1e-3 and keeps the smaller error: the
// small step is curvature-limited, the large one rounding-limited, and a
// correct adjoint must match at one of them. Step-size projection biases
// are conditioned into the well-resolved softplus range before checking.
// `model_cfg` drives the embedding and full-model checks; the per-op
// fixtures use fixed small dimensions.
GradCheckReport run_grad_checks(const std::string& filter = "",
                                const ModelConfig& model_cfg = gradcheck_config());

}  // namespace biomamba
