#pragma once

#include <functional>
#include <string>
#include <vector>

#include "readmit/tensor.hpp"

namespace readmit {

// Central finite-difference verification of reverse-mode gradients. The
// checker only ever evaluates the forward function on perturbed values; it
// never touches the tape, so it is an independent oracle for it.

struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;
  std::string worst;  // "param[12]" of the worst coordinate
};

// f evaluates a scalar loss from the current values of `inputs` (taped
// internally by the caller's op under test). Checks d(loss)/d(input) for
// every listed input against central differences.
//   rel_err = |analytic - numeric| / max(1, |analytic|, |numeric|)
// coords_per_input = 0 checks every coordinate.
GradCheckResult check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                std::vector<std::string> names, double h = 1e-5,
                                double tol = 1e-4, int coords_per_input = 0,
                                Rng* coord_rng = nullptr);

// The full verification suite behind the `gradcheck` CLI command and the
// first acceptance criterion: every differentiable op on randomized small
// shapes across `seeds` seeds, then the end-to-end toy model. Runs in f64.
// Returns true when everything passes; failures are listed on `log`.
bool run_gradcheck_suite(int seeds, std::string& log);

}  // namespace readmit
