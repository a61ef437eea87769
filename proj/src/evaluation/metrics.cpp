#include "faultsim/evaluation/metrics.hpp"

#include "faultsim/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

namespace faultsim::evaluation {

namespace {

struct Counts {
    std::int64_t positives = 0;
    std::int64_t negatives = 0;
};

Counts check_binary(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("roc: " + std::to_string(scores.size()) + " scores for " +
                                    std::to_string(labels.size()) + " labels");
    }
    Counts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) {
            throw std::invalid_argument("roc: labels must be 0 or 1");
        }
        if (!std::isfinite(scores[i])) {
            throw std::invalid_argument("roc: non-finite score");
        }
        (labels[i] == 1 ? c.positives : c.negatives) += 1;
    }
    if (c.positives == 0 || c.negatives == 0) {
        throw std::invalid_argument("roc: labels contain a single class");
    }
    return c;
}

// Cumulative (false positive, true positive) counts after each distinct score,
// descending.
std::vector<std::pair<std::int64_t, std::int64_t>> sweep(std::span<const double> scores, std::span<const int> labels,
                                                         std::vector<double>* thresholds) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::pair<std::int64_t, std::int64_t>> steps{{0, 0}};
    std::int64_t fp = 0;
    std::int64_t tp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s) {
            (labels[order[i]] == 1 ? tp : fp) += 1;
            ++i;
        }
        steps.emplace_back(fp, tp);
        if (thresholds) {
            thresholds->push_back(s);
        }
    }
    return steps;
}

} // namespace

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
    const auto c = check_binary(scores, labels);
    std::vector<double> thresholds{std::numeric_limits<double>::infinity()};
    const auto steps = sweep(scores, labels, &thresholds);
    std::vector<RocPoint> out;
    out.reserve(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
        out.push_back({static_cast<double>(steps[i].first) / static_cast<double>(c.negatives),
                       static_cast<double>(steps[i].second) / static_cast<double>(c.positives), thresholds[i]});
    }
    return out;
}

double auc(std::span<const double> scores, std::span<const int> labels) {
    const auto c = check_binary(scores, labels);
    const auto steps = sweep(scores, labels, nullptr);
    // Twice the trapezoid area in (false positive, true positive) count units.
    std::int64_t twice = 0;
    for (std::size_t i = 1; i < steps.size(); ++i) {
        twice += (steps[i].first - steps[i - 1].first) * (steps[i].second + steps[i - 1].second);
    }
    return static_cast<double>(twice) / (2.0 * static_cast<double>(c.positives) * static_cast<double>(c.negatives));
}

double r_squared(std::span<const double> truth, std::span<const double> predicted) {
    if (truth.size() != predicted.size()) {
        throw std::invalid_argument("r_squared: size mismatch");
    }
    if (truth.size() < 2) {
        throw std::invalid_argument("r_squared: need at least 2 observations");
    }
    const double mean = std::accumulate(truth.begin(), truth.end(), 0.0) / static_cast<double>(truth.size());
    double ss_res = 0.0;
    double ss_tot = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        ss_res += (truth[i] - predicted[i]) * (truth[i] - predicted[i]);
        ss_tot += (truth[i] - mean) * (truth[i] - mean);
    }
    if (ss_tot == 0.0) {
        throw std::invalid_argument("r_squared: true values have zero variance");
    }
    return 1.0 - ss_res / ss_tot;
}

SplitPlan make_split_plan(std::span<const int> labels, int n_splits, double train_fraction, std::uint64_t seed) {
    if (n_splits < 1 || !(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw std::invalid_argument("make_split_plan: need n_splits >= 1 and train_fraction in (0, 1)");
    }
    if (labels.size() < 2) {
        throw std::invalid_argument("make_split_plan: need at least 2 examples");
    }
    std::vector<std::vector<std::size_t>> classes;
    std::vector<int> values;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto it = std::find(values.begin(), values.end(), labels[i]);
        if (it == values.end()) {
            values.push_back(labels[i]);
            classes.emplace_back();
            it = values.end() - 1;
        }
        classes[static_cast<std::size_t>(it - values.begin())].push_back(i);
    }
    // Classes in ascending label order so the draw sequence does not depend on
    // which label appears first.
    std::vector<std::size_t> class_order(values.size());
    std::iota(class_order.begin(), class_order.end(), std::size_t{0});
    std::sort(class_order.begin(), class_order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

    numerics::RandomStream root(seed);
    SplitPlan plan;
    plan.train_fraction = train_fraction;
    for (int s = 0; s < n_splits; ++s) {
        auto rng = root.child("split" + std::to_string(s));
        std::vector<std::size_t> train;
        std::vector<std::size_t> test;
        for (std::size_t ci : class_order) {
            const auto& members = classes[ci];
            const auto n = members.size();
            auto take = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
            if (n >= 2) {
                take = std::clamp<std::size_t>(take, 1, n - 1);
            }
            const auto perm = rng.permutation(n);
            for (std::size_t k = 0; k < n; ++k) {
                (k < take ? train : test).push_back(members[perm[k]]);
            }
        }
        std::sort(train.begin(), train.end());
        std::sort(test.begin(), test.end());
        plan.train.push_back(std::move(train));
        plan.test.push_back(std::move(test));
    }
    return plan;
}

} // namespace faultsim::evaluation
