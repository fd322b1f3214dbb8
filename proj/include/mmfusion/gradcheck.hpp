#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "mmfusion/fusion.hpp"

namespace mmfusion {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_param;  // "<block>[row,col]"
  std::size_t param_count = 0;
};

/// Smallest denominator used for the relative error, so entries whose true
/// gradient is ~0 are judged by absolute error instead.
inline constexpr double kGradCheckFloor = 1e-6;

/// Random window of `steps` rows with entries uniform in [-2, 2];
/// current_face is the last face row.
AlignedWindow random_window(const ModelDims& dims, std::size_t steps, Rng& rng);

/// Xavier weights plus small random biases.
FusionParams random_params(const ModelDims& dims, FusionMode mode, Rng& rng);

/// Compares backward() with central finite differences of the cross-entropy
/// loss, one parameter at a time. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, kGradCheckFloor).
GradCheckResult gradient_check(const ModelDims& dims, FusionMode mode, std::size_t steps, std::uint64_t seed,
                               double h = 1e-5);

}  // namespace mmfusion
