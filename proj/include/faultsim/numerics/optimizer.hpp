#pragma once

#include "faultsim/numerics/tape.hpp"

#include <cstdint>
#include <vector>

namespace faultsim::numerics {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
};

/// Adaptive-moment optimizer state. Accumulators are shaped like the
/// parameter set they were created for.
class Adam {
public:
    Adam(const ParameterSet& params, AdamConfig config);

    /// Applies one update from the gradients currently stored in params.
    void step(ParameterSet& params);

    std::int64_t step_count() const { return steps_; }
    const AdamConfig& config() const { return config_; }

private:
    AdamConfig config_;
    std::vector<Matrix> first_;
    std::vector<Matrix> second_;
    std::int64_t steps_ = 0;
};

} // namespace faultsim::numerics
