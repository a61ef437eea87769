#include "faultsim/heads/forest.hpp"

#include "faultsim/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace faultsim::heads {

std::string to_string(Task t) { return t == Task::classify ? "classify" : "regress"; }

nlohmann::json to_json(const ForestConfig& c) {
    return {{"n_trees", c.n_trees},
            {"max_depth", c.max_depth},
            {"min_leaf", c.min_leaf},
            {"features_per_split", c.features_per_split},
            {"bootstrap", c.bootstrap}};
}

ForestConfig forest_config_from_json(const nlohmann::json& j, const ForestConfig& d) {
    ForestConfig c = d;
    c.n_trees = j.value("n_trees", c.n_trees);
    c.max_depth = j.value("max_depth", c.max_depth);
    c.min_leaf = j.value("min_leaf", c.min_leaf);
    c.features_per_split = j.value("features_per_split", c.features_per_split);
    c.bootstrap = j.value("bootstrap", c.bootstrap);
    return c;
}

double Tree::predict(std::span<const double> x) const {
    int i = 0;
    while (nodes[static_cast<std::size_t>(i)].feature >= 0) {
        const auto& n = nodes[static_cast<std::size_t>(i)];
        i = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].value;
}

int Tree::depth() const {
    std::vector<int> d(nodes.size(), 0);
    int deepest = 0;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        deepest = std::max(deepest, d[i]);
        if (nodes[i].feature >= 0) {
            d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
            d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
        }
    }
    return deepest;
}

int Tree::leaf_count() const {
    return static_cast<int>(std::count_if(nodes.begin(), nodes.end(), [](const Node& n) { return n.feature < 0; }));
}

ForestModel::ForestModel(Task task, ForestConfig config, Index feature_count, std::vector<Tree> trees,
                         bool degenerate)
    : task_(task), config_(config), feature_count_(feature_count), trees_(std::move(trees)), degenerate_(degenerate) {}

double ForestModel::raw_predict(std::span<const double> x) const {
    if (static_cast<Index>(x.size()) != feature_count_) {
        throw numerics::ShapeError("forest: " + std::to_string(x.size()) + " features, model expects " +
                                   std::to_string(feature_count_));
    }
    if (trees_.empty()) {
        throw std::logic_error("forest: model has no trees");
    }
    double total = 0.0;
    for (const auto& t : trees_) {
        total += t.predict(x);
    }
    return total / static_cast<double>(trees_.size());
}

nlohmann::json ForestModel::to_json() const {
    nlohmann::json j;
    j["format"] = "faultsim.forest";
    j["version"] = 1;
    j["task"] = heads::to_string(task_);
    j["config"] = heads::to_json(config_);
    j["feature_count"] = feature_count_;
    j["degenerate"] = degenerate_;
    auto& trees = j["trees"] = nlohmann::json::array();
    for (const auto& t : trees_) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& n : t.nodes) {
            if (n.feature < 0) {
                nodes.push_back({{"leaf", n.value}, {"samples", n.samples}});
            } else {
                nodes.push_back({{"feature", n.feature},
                                 {"threshold", n.threshold},
                                 {"left", n.left},
                                 {"right", n.right},
                                 {"samples", n.samples}});
            }
        }
        trees.push_back(std::move(nodes));
    }
    return j;
}

ForestModel ForestModel::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "faultsim.forest") {
        throw std::runtime_error("not a forest checkpoint");
    }
    const auto task_name = j.at("task").get<std::string>();
    if (task_name != "classify" && task_name != "regress") {
        throw std::runtime_error("forest: unknown task " + task_name);
    }
    std::vector<Tree> trees;
    for (const auto& jt : j.at("trees")) {
        Tree t;
        for (const auto& jn : jt) {
            Tree::Node n;
            n.samples = jn.at("samples").get<int>();
            if (jn.contains("leaf")) {
                n.value = jn.at("leaf").get<double>();
            } else {
                n.feature = jn.at("feature").get<int>();
                n.threshold = jn.at("threshold").get<double>();
                n.left = jn.at("left").get<int>();
                n.right = jn.at("right").get<int>();
            }
            t.nodes.push_back(n);
        }
        trees.push_back(std::move(t));
    }
    return ForestModel(task_name == "classify" ? Task::classify : Task::regress,
                       forest_config_from_json(j.at("config")), j.at("feature_count").get<Index>(), std::move(trees),
                       j.at("degenerate").get<bool>());
}

void ForestModel::save(const std::filesystem::path& path) const { numerics::write_json(to_json(), path); }

ForestModel ForestModel::load(const std::filesystem::path& path) { return from_json(numerics::read_json(path)); }

namespace {

struct Split {
    int feature = -1;
    double threshold = 0.0;
    double cost = 0.0;
};

class TreeBuilder {
public:
    TreeBuilder(const Matrix& xt, const std::vector<double>& y, Task task, const ForestConfig& config,
                numerics::RandomStream& rng)
        : xt_(xt), y_(y), task_(task), config_(config), rng_(rng) {
        const auto d = static_cast<int>(xt.rows());
        per_split_ = config.features_per_split > 0 ? std::min(config.features_per_split, d)
                                                   : std::max(1, static_cast<int>(std::floor(std::sqrt(d))));
    }

    Tree build(std::vector<Index> samples) {
        grow(std::move(samples), 0);
        return std::move(tree_);
    }

private:
    double leaf_value(const std::vector<Index>& s) const {
        double total = 0.0;
        for (Index i : s) {
            total += y_[static_cast<std::size_t>(i)];
        }
        if (task_ == Task::regress) {
            return total / static_cast<double>(s.size());
        }
        return 2.0 * total > static_cast<double>(s.size()) ? 1.0 : 0.0;
    }

    bool pure(const std::vector<Index>& s) const {
        const double first = y_[static_cast<std::size_t>(s.front())];
        return std::all_of(s.begin(), s.end(), [&](Index i) { return y_[static_cast<std::size_t>(i)] == first; });
    }

    // Weighted impurity of one side: n * gini for classification, SSE for regression.
    double side_cost(double n, double sum, double sum_sq) const {
        if (n <= 0.0) {
            return 0.0;
        }
        if (task_ == Task::classify) {
            const double ones = sum;
            const double zeros = n - ones;
            return n - (ones * ones + zeros * zeros) / n;
        }
        return std::max(0.0, sum_sq - sum * sum / n);
    }

    std::optional<Split> best_split_on(int f, const std::vector<Index>& s) {
        const Index n = static_cast<Index>(s.size());
        const auto min_leaf = static_cast<Index>(std::max(1, config_.min_leaf));
        order_.resize(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            order_[i] = {xt_(f, s[i]), y_[static_cast<std::size_t>(s[i])]};
        }
        std::sort(order_.begin(), order_.end());
        double total = 0.0;
        double total_sq = 0.0;
        for (const auto& [v, t] : order_) {
            total += t;
            total_sq += t * t;
        }
        std::optional<Split> best;
        double left = 0.0;
        double left_sq = 0.0;
        for (Index i = 0; i + 1 < n; ++i) {
            const double t = order_[static_cast<std::size_t>(i)].second;
            left += t;
            left_sq += t * t;
            const Index nl = i + 1;
            if (nl < min_leaf || n - nl < min_leaf) {
                continue;
            }
            const double a = order_[static_cast<std::size_t>(i)].first;
            const double b = order_[static_cast<std::size_t>(i + 1)].first;
            if (!(a < b)) {
                continue;
            }
            const double cost = side_cost(static_cast<double>(nl), left, left_sq) +
                                side_cost(static_cast<double>(n - nl), total - left, total_sq - left_sq);
            if (!best || cost < best->cost) {
                double mid = 0.5 * (a + b);
                if (!(mid < b)) {
                    mid = a;
                }
                best = Split{f, mid, cost};
            }
        }
        return best;
    }

    std::optional<Split> choose_split(const std::vector<Index>& s) {
        const auto perm = rng_.permutation(static_cast<std::size_t>(xt_.rows()));
        std::optional<Split> best;
        for (std::size_t k = 0; k < perm.size(); ++k) {
            if (k >= static_cast<std::size_t>(per_split_) && best) {
                break;
            }
            const auto candidate = best_split_on(static_cast<int>(perm[k]), s);
            if (candidate && (!best || candidate->cost < best->cost)) {
                best = candidate;
            }
        }
        return best;
    }

    int grow(std::vector<Index> s, int depth) {
        const int id = static_cast<int>(tree_.nodes.size());
        tree_.nodes.emplace_back();
        tree_.nodes.back().samples = static_cast<int>(s.size());
        const bool depth_ok = config_.max_depth <= 0 || depth < config_.max_depth;
        const bool size_ok = static_cast<int>(s.size()) >= 2 * std::max(1, config_.min_leaf);
        std::optional<Split> split;
        if (depth_ok && size_ok && !pure(s)) {
            split = choose_split(s);
        }
        if (!split) {
            tree_.nodes[static_cast<std::size_t>(id)].value = leaf_value(s);
            return id;
        }
        std::vector<Index> left;
        std::vector<Index> right;
        for (Index i : s) {
            (xt_(split->feature, i) <= split->threshold ? left : right).push_back(i);
        }
        s.clear();
        s.shrink_to_fit();
        const int l = grow(std::move(left), depth + 1);
        const int r = grow(std::move(right), depth + 1);
        auto& node = tree_.nodes[static_cast<std::size_t>(id)];
        node.feature = split->feature;
        node.threshold = split->threshold;
        node.left = l;
        node.right = r;
        return id;
    }

    const Matrix& xt_;
    const std::vector<double>& y_;
    Task task_;
    const ForestConfig& config_;
    numerics::RandomStream& rng_;
    int per_split_ = 1;
    Tree tree_;
    std::vector<std::pair<double, double>> order_;
};

} // namespace

ForestModel train_forest(const Matrix& x, const std::vector<double>& y, Task task, const ForestConfig& config,
                         std::uint64_t seed) {
    const Index n = x.rows();
    if (n == 0) {
        throw std::invalid_argument("train_forest: empty example set");
    }
    if (n < 2) {
        throw std::invalid_argument("train_forest: need at least 2 examples");
    }
    if (static_cast<Index>(y.size()) != n) {
        throw numerics::ShapeError("train_forest: " + std::to_string(y.size()) + " targets for " +
                                   std::to_string(n) + " examples");
    }
    if (config.n_trees < 1 || config.min_leaf < 1 || config.features_per_split < 0) {
        throw std::invalid_argument("train_forest: invalid hyperparameters");
    }
    for (double v : y) {
        if (!std::isfinite(v) || (task == Task::classify && v != 0.0 && v != 1.0)) {
            throw std::invalid_argument("train_forest: invalid target " + std::to_string(v));
        }
    }
    if (!x.allFinite()) {
        throw std::invalid_argument("train_forest: non-finite feature");
    }
    const bool degenerate =
        task == Task::classify && std::all_of(y.begin(), y.end(), [&](double v) { return v == y.front(); });

    const Matrix xt = x.transpose();
    numerics::RandomStream root(seed);
    std::vector<Tree> trees;
    trees.reserve(static_cast<std::size_t>(config.n_trees));
    for (int t = 0; t < config.n_trees; ++t) {
        auto rng = root.child("tree" + std::to_string(t));
        std::vector<Index> samples(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) {
            samples[static_cast<std::size_t>(i)] =
                config.bootstrap ? static_cast<Index>(rng.index(static_cast<std::size_t>(n))) : i;
        }
        TreeBuilder builder(xt, y, task, config, rng);
        trees.push_back(builder.build(std::move(samples)));
    }
    return ForestModel(task, config, x.cols(), std::move(trees), degenerate);
}

ForestModel train_forest(const std::vector<LabeledExample>& examples, Task task, const ForestConfig& config,
                         std::uint64_t seed) {
    if (examples.empty()) {
        throw std::invalid_argument("train_forest: empty example set");
    }
    const auto d = static_cast<Index>(examples.front().features.size());
    Matrix x(static_cast<Index>(examples.size()), d);
    std::vector<double> y;
    y.reserve(examples.size());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& e = examples[i];
        if (static_cast<Index>(e.features.size()) != d) {
            throw numerics::ShapeError("train_forest: example " + std::to_string(i) + " has " +
                                       std::to_string(e.features.size()) + " features, expected " +
                                       std::to_string(d));
        }
        x.row(static_cast<Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(e.features.data(), d);
        if (task == Task::classify) {
            y.push_back(e.label);
        } else {
            if (!e.ttf_seconds) {
                throw std::invalid_argument("train_forest: example " + std::to_string(i) +
                                            " has no time to first fault");
            }
            y.push_back(*e.ttf_seconds);
        }
    }
    return train_forest(x, y, task, config, seed);
}

Classification classify(const ForestModel& model, std::span<const double> features) {
    if (model.task() != Task::classify) {
        throw std::invalid_argument("classify: model is a regressor");
    }
    const double score = model.raw_predict(features);
    return {score, score >= 0.5 ? 1 : 0};
}

double predict_ttf(const ForestModel& model, std::span<const double> features, double horizon_seconds) {
    if (model.task() != Task::regress) {
        throw std::invalid_argument("predict_ttf: model is a classifier");
    }
    if (!(horizon_seconds > 0.0)) {
        throw std::invalid_argument("predict_ttf: horizon must be positive");
    }
    const double v = model.raw_predict(features);
    return std::clamp(v, 0.0, std::nextafter(horizon_seconds, 0.0));
}

std::vector<double> build_features(const deepar::HiddenRepresentation& h_tilde,
                                   const deepar::HiddenRepresentation* h_hat) {
    std::vector<double> out = h_tilde.features;
    if (h_hat) {
        if (h_hat->horizon() != h_tilde.horizon()) {
            throw numerics::ShapeError("build_features: horizons " + std::to_string(h_tilde.horizon()) + " and " +
                                       std::to_string(h_hat->horizon()) + " differ");
        }
        out.insert(out.end(), h_hat->features.begin(), h_hat->features.end());
    }
    return out;
}

std::vector<double> regressor_features(const deepar::HiddenRepresentation& h_tilde) {
    const auto t = static_cast<std::size_t>(h_tilde.horizon());
    std::vector<double> out(t);
    std::partial_sum(h_tilde.features.begin(), h_tilde.features.begin() + static_cast<std::ptrdiff_t>(t), out.begin());
    return out;
}

std::vector<std::uint8_t> assemble_zstar(int c, std::optional<double> f, Index horizon, double sample_rate) {
    if (horizon < 1 || !(sample_rate > 0.0)) {
        throw std::invalid_argument("assemble_zstar: horizon and sample rate must be positive");
    }
    if (c != 0 && c != 1) {
        throw std::invalid_argument("assemble_zstar: class must be 0 or 1");
    }
    if ((c == 1) != f.has_value()) {
        throw std::invalid_argument("assemble_zstar: time to first fault must be given exactly when c = 1");
    }
    std::vector<std::uint8_t> z(static_cast<std::size_t>(horizon), 0);
    if (c == 1) {
        const double seconds = static_cast<double>(horizon) / sample_rate;
        if (!std::isfinite(*f) || *f < 0.0 || *f >= seconds) {
            throw std::invalid_argument("assemble_zstar: time to first fault " + std::to_string(*f) +
                                        " outside [0, " + std::to_string(seconds) + ")");
        }
        const auto idx = std::clamp<Index>(static_cast<Index>(std::llround(*f * sample_rate)), 0, horizon - 1);
        z[static_cast<std::size_t>(idx)] = 1;
    }
    return z;
}

} // namespace faultsim::heads
