#include "faultsim/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace faultsim::numerics {

double forward_backward(const LossFn& loss, ParameterSet& params) {
    params.zero_grad();
    Tape tape;
    Var out = loss(tape);
    tape.backward(out);
    return out.scalar();
}

GradCheckResult finite_diff_check(const LossFn& loss, ParameterSet& params, double eps) {
    forward_backward(loss, params);
    std::vector<Matrix> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p.grad);
    }

    auto evaluate = [&loss]() {
        Tape tape;
        return loss(tape).scalar();
    };

    GradCheckResult result;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        for (Index k = 0; k < p.value.size(); ++k) {
            double& x = p.value.data()[k];
            const double saved = x;
            x = saved + eps;
            const double up = evaluate();
            x = saved - eps;
            const double down = evaluate();
            x = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic[i].data()[k];
            const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + eps);
            if (err > result.max_relative_error) {
                result.max_relative_error = err;
                result.worst_parameter = p.name;
            }
            ++result.coordinates;
        }
    }
    return result;
}

} // namespace faultsim::numerics
