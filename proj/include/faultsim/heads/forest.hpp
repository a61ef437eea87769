#pragma once

#include "faultsim/deepar/deepar.hpp"
#include "faultsim/numerics/checkpoint.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace faultsim::heads {

enum class Task { classify, regress };
std::string to_string(Task t);

struct ForestConfig {
    int n_trees = 100;
    int max_depth = 12;          // <= 0 for unlimited
    int min_leaf = 2;
    int features_per_split = 0;  // 0 for floor(sqrt(d))
    bool bootstrap = true;
};

nlohmann::json to_json(const ForestConfig& c);
ForestConfig forest_config_from_json(const nlohmann::json& j, const ForestConfig& defaults = {});

/// Flat CART tree. Internal nodes send x[feature] <= threshold left.
struct Tree {
    struct Node {
        int feature = -1;  // -1 marks a leaf
        double threshold = 0.0;
        int left = -1;
        int right = -1;
        double value = 0.0;  // leaf vote (0 or 1) or leaf mean
        int samples = 0;
    };
    std::vector<Node> nodes;

    double predict(std::span<const double> x) const;
    int depth() const;
    int leaf_count() const;
};

class ForestModel {
public:
    ForestModel() = default;
    ForestModel(Task task, ForestConfig config, Index feature_count, std::vector<Tree> trees, bool degenerate);

    Task task() const { return task_; }
    const ForestConfig& config() const { return config_; }
    Index feature_count() const { return feature_count_; }
    const std::vector<Tree>& trees() const { return trees_; }
    /// True when the classifier saw a single class and is constant.
    bool degenerate() const { return degenerate_; }

    /// Mean of the tree outputs.
    double raw_predict(std::span<const double> x) const;

    nlohmann::json to_json() const;
    static ForestModel from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static ForestModel load(const std::filesystem::path& path);

private:
    Task task_ = Task::classify;
    ForestConfig config_;
    Index feature_count_ = 0;
    std::vector<Tree> trees_;
    bool degenerate_ = false;
};

/// Rows of `x` are examples. For classification `y` holds 0/1 labels and a
/// leaf votes 1 when its positives strictly outnumber its negatives; for
/// regression leaves hold the mean target. Splits minimize weighted Gini
/// impurity or squared error over a random feature subset, widening to the
/// remaining features only when the subset admits no split. Impure nodes are
/// split while depth and min_leaf allow.
ForestModel train_forest(const Matrix& x, const std::vector<double>& y, Task task, const ForestConfig& config,
                         std::uint64_t seed);

struct LabeledExample {
    std::vector<double> features;
    int label = 0;
    std::optional<double> ttf_seconds;
};

/// Classification on labels, or regression on ttf_seconds (every example must
/// carry one).
ForestModel train_forest(const std::vector<LabeledExample>& examples, Task task, const ForestConfig& config,
                         std::uint64_t seed);

struct Classification {
    double score = 0.0;
    int label = 0;
};

Classification classify(const ForestModel& model, std::span<const double> features);
/// Mean of tree outputs clamped to [0, horizon_seconds).
double predict_ttf(const ForestModel& model, std::span<const double> features, double horizon_seconds);

/// h_tilde followed by h_hat when present.
std::vector<double> build_features(const deepar::HiddenRepresentation& h_tilde,
                                   const deepar::HiddenRepresentation* h_hat = nullptr);
/// Running sum of h_tilde's mean path: expected fault steps up to each t.
std::vector<double> regressor_features(const deepar::HiddenRepresentation& h_tilde);

/// Indicator series of length `horizon` with a single 1 at round(f * rate)
/// (clamped) when c = 1.
std::vector<std::uint8_t> assemble_zstar(int c, std::optional<double> f, Index horizon, double sample_rate);

} // namespace faultsim::heads
