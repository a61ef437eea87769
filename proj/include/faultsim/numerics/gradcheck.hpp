#pragma once

#include "faultsim/numerics/tape.hpp"

#include <functional>

namespace faultsim::numerics {

using LossFn = std::function<Var(Tape&)>;

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t coordinates = 0;
    std::string worst_parameter;
};

/// Compares tape gradients of a deterministic scalar loss with central
/// differences over every coordinate of params. The relative error of a
/// coordinate is |a - n| / (|a| + |n| + eps).
GradCheckResult finite_diff_check(const LossFn& loss, ParameterSet& params, double eps = 1e-5);

/// Runs the loss on a fresh tape and leaves gradients in params.
double forward_backward(const LossFn& loss, ParameterSet& params);

} // namespace faultsim::numerics
