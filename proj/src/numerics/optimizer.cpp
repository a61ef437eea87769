#include "faultsim/numerics/optimizer.hpp"

#include <cmath>

namespace faultsim::numerics {

Adam::Adam(const ParameterSet& params, AdamConfig config) : config_(config) {
    first_.reserve(params.size());
    second_.reserve(params.size());
    for (const auto& p : params) {
        first_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
        second_.push_back(Matrix::Zero(p.value.rows(), p.value.cols()));
    }
}

void Adam::step(ParameterSet& params) {
    if (params.size() != first_.size()) {
        throw ShapeError("Adam::step: parameter count changed from " + std::to_string(first_.size()) + " to " +
                         std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Parameter& p = params[i];
        if (p.grad.rows() != first_[i].rows() || p.grad.cols() != first_[i].cols()) {
            throw ShapeError("Adam::step: shape mismatch for '" + p.name + "': " + shape_string(p.grad) +
                             " vs " + shape_string(first_[i]));
        }
    }

    double clip = 1.0;
    if (config_.clip_norm > 0.0) {
        double sq = 0.0;
        for (const auto& p : params) {
            sq += p.grad.squaredNorm();
        }
        const double norm = std::sqrt(sq);
        if (norm > config_.clip_norm) {
            clip = config_.clip_norm / norm;
        }
    }

    ++steps_;
    const double t = static_cast<double>(steps_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        const Matrix g = p.grad * clip;
        first_[i] = config_.beta1 * first_[i] + (1.0 - config_.beta1) * g;
        second_[i] = config_.beta2 * second_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
        const auto m_hat = first_[i].array() / bc1;
        const auto v_hat = second_[i].array() / bc2;
        p.value.array() -= config_.learning_rate * m_hat / (v_hat.sqrt() + config_.epsilon);
    }
}

} // namespace faultsim::numerics
