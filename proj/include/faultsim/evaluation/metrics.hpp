#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace faultsim::evaluation {

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;  // scores >= threshold count as positive; +inf at the origin
};

/// Threshold sweep over the distinct scores in descending order, starting at
/// (0, 0) and ending at (1, 1). Labels are 0/1 and must contain both classes.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

/// Trapezoidal area under roc_curve. The area is accumulated in integer pair
/// units, so it equals the Mann-Whitney statistic with ties counted as one half.
double auc(std::span<const double> scores, std::span<const int> labels);

/// 1 - sum (y - f)^2 / sum (y - mean y)^2.
double r_squared(std::span<const double> truth, std::span<const double> predicted);

struct SplitPlan {
    double train_fraction = 0.8;
    std::vector<std::vector<std::size_t>> train;  // ascending indices per split
    std::vector<std::vector<std::size_t>> test;

    std::size_t size() const { return train.size(); }
};

/// Random train/test splits, stratified by label: each class contributes
/// round(train_fraction * n_c) examples to training, kept within [1, n_c - 1]
/// whenever the class has at least two members.
SplitPlan make_split_plan(std::span<const int> labels, int n_splits, double train_fraction, std::uint64_t seed);

} // namespace faultsim::evaluation
