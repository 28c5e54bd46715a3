#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fssam/tensor.hpp"

namespace fssam {

/// Scalar-valued function of a list of parameter tensors.
using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

struct GradcheckResult {
    double max_relative_error = 0.0;
    std::size_t checked = 0;
    /// Coordinates whose +/- eps probes changed a ReLU sign pattern.
    std::size_t skipped = 0;
    /// "param[i] coord j" of the worst coordinate, for diagnostics.
    std::string worst;
};

/// Compares reverse-mode gradients of `fn` against central differences
/// (f(p + eps) - f(p - eps)) / (2 eps) for every coordinate of every
/// parameter. The relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
///
/// Throws CheckInvalid when two evaluations at the same point differ and
/// ContractError when eps is outside (0, 1e-2].
GradcheckResult finite_difference_gradcheck(const ScalarFn& fn, std::vector<Tensor> params, double eps = 1e-5);

}  // namespace fssam
