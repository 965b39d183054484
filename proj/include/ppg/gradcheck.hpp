#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ppg/tensor.hpp"

namespace ppg {

struct GradCheckOptions {
  double eps = 1e-5;        // central-difference step
  double tolerance = 1e-4;  // max allowed relative error
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  // The floor keeps coordinates whose true gradient is ~0 from dividing
  // round-off noise by round-off noise.
  double denom_floor = 1e-3;
  // 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 1;
};

struct TensorCheck {
  std::string name;
  std::size_t coords_checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  bool finite = true;
  std::string diagnostic;  // set when the check could not run cleanly
  double tolerance = 0.0;

  double max_rel_error() const;
  bool passed() const;
  std::string summary() const;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Compares the recorded gradient of the scalar `f()` with respect to each
// tensor in `wrt` against central differences
//   (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
// `f` must be deterministic and read the tensors in `wrt` (typically module
// parameters or captured inputs); the harness perturbs them in place and
// restores them afterwards.
GradCheckReport finite_difference_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& wrt,
                                        const GradCheckOptions& options = {});

// Single-input form: checks d f(x) / d x.
GradCheckReport finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                        const GradCheckOptions& options = {});

}  // namespace ppg
