#include "faultsim/heads/forest.hpp"
#include "faultsim/numerics/random.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

using namespace faultsim;
using namespace faultsim::heads;

namespace {

ForestConfig single_tree() {
    ForestConfig c;
    c.n_trees = 1;
    c.max_depth = 0;
    c.min_leaf = 1;
    c.bootstrap = false;
    return c;
}

Tree leaf(double v) {
    Tree t;
    t.nodes.push_back({});
    t.nodes.back().value = v;
    t.nodes.back().samples = 1;
    return t;
}

// x[f] <= thr ? lo : hi
Tree stump(int f, double thr, double lo, double hi) {
    Tree t;
    Tree::Node root;
    root.feature = f;
    root.threshold = thr;
    root.left = 1;
    root.right = 2;
    t.nodes = {root, leaf(lo).nodes[0], leaf(hi).nodes[0]};
    return t;
}

// Two interleaved half circles with Gaussian noise.
void moons(std::size_t n, std::uint64_t seed, Matrix& x, std::vector<double>& y) {
    numerics::RandomStream rng(seed);
    x.resize(static_cast<Index>(n), 2);
    y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool upper = i % 2 == 0;
        const double a = M_PI * rng.uniform();
        const auto r = static_cast<Index>(i);
        x(r, 0) = upper ? std::cos(a) : 1.0 - std::cos(a);
        x(r, 1) = upper ? std::sin(a) : 0.5 - std::sin(a);
        x(r, 0) += rng.normal(0.0, 0.1);
        x(r, 1) += rng.normal(0.0, 0.1);
        y[i] = upper ? 0.0 : 1.0;
    }
}

std::vector<double> row(const Matrix& x, Index i) { return {x.row(i).data(), x.row(i).data() + x.cols()}; }

deepar::HiddenRepresentation rep(Index horizon, double base) {
    deepar::HiddenRepresentation h;
    for (Index i = 0; i < 2 * horizon; ++i) {
        h.features.push_back(base + static_cast<double>(i));
    }
    return h;
}

} // namespace

TEST_CASE("a single full tree memorizes a separable set") {
    Matrix x(40, 2);
    std::vector<double> y(40);
    numerics::RandomStream rng(3);
    for (Index i = 0; i < 40; ++i) {
        x(i, 0) = rng.uniform(-1, 1);
        x(i, 1) = rng.uniform(-1, 1);
        y[static_cast<std::size_t>(i)] = x(i, 0) + 0.5 * x(i, 1) > 0.1 ? 1.0 : 0.0;
    }
    const auto m = train_forest(x, y, Task::classify, single_tree(), 1);
    for (Index i = 0; i < 40; ++i) {
        CHECK(classify(m, row(x, i)).label == y[static_cast<std::size_t>(i)]);
    }
}

TEST_CASE("consistent labels are always fit exactly by one full tree") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        numerics::RandomStream rng(seed);
        Matrix x(60, 9);
        std::vector<double> y(60);
        for (Index i = 0; i < x.size(); ++i) {
            x.data()[i] = std::round(3.0 * rng.normal());
        }
        for (Index i = 0; i < 60; ++i) {
            x(i, 8) = static_cast<double>(i);  // rows are distinct
            y[static_cast<std::size_t>(i)] = rng.bernoulli(0.4) ? 1.0 : 0.0;
        }
        const auto m = train_forest(x, y, Task::classify, single_tree(), seed);
        for (Index i = 0; i < 60; ++i) {
            CHECK(classify(m, row(x, i)).score == y[static_cast<std::size_t>(i)]);
        }
    }
}

TEST_CASE("single-class training gives a constant classifier") {
    Matrix x = Matrix::Random(20, 3);
    for (double label : {0.0, 1.0}) {
        const std::vector<double> y(20, label);
        const auto m = train_forest(x, y, Task::classify, ForestConfig{}, 2);
        CHECK(m.degenerate());
        for (Index i = 0; i < 20; ++i) {
            CHECK(classify(m, row(x, i)).score == label);
        }
        const std::vector<double> probe{5.0, -5.0, 0.0};
        CHECK(classify(m, probe).score == label);
    }
    std::vector<double> mixed(20, 0.0);
    mixed[4] = 1.0;
    CHECK_FALSE(train_forest(x, mixed, Task::classify, ForestConfig{}, 1).degenerate());
}

TEST_CASE("moons are classified out of fold") {
    Matrix x;
    std::vector<double> y;
    moons(200, 5, x, y);
    int correct = 0;
    for (int fold = 0; fold < 5; ++fold) {
        std::vector<Index> train;
        std::vector<Index> test;
        for (Index i = 0; i < 200; ++i) {
            (i % 5 == fold ? test : train).push_back(i);
        }
        Matrix xt(static_cast<Index>(train.size()), 2);
        std::vector<double> yt;
        for (std::size_t k = 0; k < train.size(); ++k) {
            xt.row(static_cast<Index>(k)) = x.row(train[k]);
            yt.push_back(y[static_cast<std::size_t>(train[k])]);
        }
        const auto m = train_forest(xt, yt, Task::classify, ForestConfig{}, static_cast<std::uint64_t>(fold));
        for (Index i : test) {
            correct += classify(m, row(x, i)).label == y[static_cast<std::size_t>(i)] ? 1 : 0;
        }
    }
    CHECK(correct / 200.0 > 0.9);
}

TEST_CASE("scores are vote fractions") {
    std::vector<Tree> all_ones(10, leaf(1.0));
    const ForestModel unanimous(Task::classify, {}, 2, all_ones, false);
    const std::vector<double> x{0.0, 0.0};
    CHECK(classify(unanimous, x).score == 1.0);
    CHECK(classify(unanimous, x).label == 1);

    std::vector<Tree> half(50, leaf(1.0));
    half.insert(half.end(), 50, leaf(0.0));
    const ForestModel split(Task::classify, {}, 2, half, false);
    CHECK(classify(split, x).score == 0.5);
    CHECK(classify(split, x).label == 1);

    // Hand evaluation: x = (0.3, 2.0). Tree 0 sends 0.3 <= 0.5 left -> 1;
    // tree 1 sends 2.0 > 1.0 right -> 0; tree 2 sends 0.3 > 0.2 right -> 1.
    const std::vector<Tree> three{stump(0, 0.5, 1, 0), stump(1, 1.0, 1, 0), stump(0, 0.2, 0, 1)};
    const ForestModel hand(Task::classify, {}, 2, three, false);
    const std::vector<double> probe{0.3, 2.0};
    CHECK(classify(hand, probe).score == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    const std::vector<Tree> reversed(three.rbegin(), three.rend());
    CHECK(classify(ForestModel(Task::classify, {}, 2, reversed, false), probe).score ==
          classify(hand, probe).score);
}

TEST_CASE("score is invariant to tree order") {
    Matrix x;
    std::vector<double> y;
    moons(100, 2, x, y);
    const auto m = train_forest(x, y, Task::classify, ForestConfig{}, 9);
    auto trees = m.trees();
    std::reverse(trees.begin(), trees.end());
    const ForestModel flipped(Task::classify, m.config(), 2, trees, false);
    for (Index i = 0; i < 100; ++i) {
        CHECK(classify(flipped, row(x, i)).score == doctest::Approx(classify(m, row(x, i)).score).epsilon(1e-15));
    }
}

TEST_CASE("training respects depth and leaf size and is deterministic") {
    Matrix x;
    std::vector<double> y;
    moons(150, 7, x, y);
    ForestConfig cfg;
    cfg.n_trees = 20;
    cfg.max_depth = 3;
    cfg.min_leaf = 5;
    const auto m = train_forest(x, y, Task::classify, cfg, 4);
    for (const auto& t : m.trees()) {
        CHECK(t.depth() <= 3);
        for (const auto& n : t.nodes) {
            CHECK(n.samples >= 5);
        }
    }
    const auto again = train_forest(x, y, Task::classify, cfg, 4);
    CHECK(again.to_json() == m.to_json());
    CHECK(train_forest(x, y, Task::classify, cfg, 5).to_json() != m.to_json());
}

TEST_CASE("regression on a constant target") {
    Matrix x = Matrix::Random(30, 4);
    const auto m = train_forest(x, std::vector<double>(30, 10.0), Task::regress, ForestConfig{}, 1);
    const std::vector<double> probe{0.1, 0.2, 0.3, 0.4};
    CHECK(predict_ttf(m, probe, 300.0) == 10.0);
}

TEST_CASE("regression stays inside the target range") {
    numerics::RandomStream rng(4);
    Matrix x(80, 3);
    std::vector<double> y(80);
    for (Index i = 0; i < 80; ++i) {
        for (Index c = 0; c < 3; ++c) {
            x(i, c) = rng.normal();
        }
        y[static_cast<std::size_t>(i)] = 20.0 + 30.0 * x(i, 0) * x(i, 0) + rng.normal();
    }
    const auto [lo, hi] = std::minmax_element(y.begin(), y.end());
    const auto m = train_forest(x, y, Task::regress, ForestConfig{}, 3);
    for (int k = 0; k < 200; ++k) {
        const std::vector<double> probe{3.0 * rng.normal(), 3.0 * rng.normal(), 3.0 * rng.normal()};
        const double v = m.raw_predict(probe);
        CHECK(v >= *lo);
        CHECK(v <= *hi);
    }
}

TEST_CASE("time to first fault is clamped to the horizon") {
    const std::vector<double> x{0.0};
    const ForestModel high(Task::regress, {}, 1, {leaf(500.0)}, false);
    const double v = predict_ttf(high, x, 300.0);
    CHECK(v < 300.0);
    CHECK(v > 299.999);
    const ForestModel low(Task::regress, {}, 1, {leaf(-4.0)}, false);
    CHECK(predict_ttf(low, x, 300.0) == 0.0);
    CHECK_THROWS_AS(classify(high, x), std::invalid_argument);
    const ForestModel cls(Task::classify, {}, 1, {leaf(1.0)}, false);
    CHECK_THROWS_AS(predict_ttf(cls, x, 300.0), std::invalid_argument);
}

TEST_CASE("feature count mismatch and bad inputs are rejected") {
    const ForestModel m(Task::classify, {}, 3, {leaf(1.0)}, false);
    const std::vector<double> two{1.0, 2.0};
    CHECK_THROWS_AS(classify(m, two), numerics::ShapeError);
    CHECK_THROWS_AS(train_forest(std::vector<LabeledExample>{}, Task::classify, {}, 1), std::invalid_argument);
    CHECK_THROWS_AS(train_forest(Matrix::Zero(1, 2), {1.0}, Task::classify, {}, 1), std::invalid_argument);
    CHECK_THROWS_AS(train_forest(Matrix::Zero(3, 2), {1.0, 0.0, 2.0}, Task::classify, {}, 1),
                    std::invalid_argument);
    std::vector<LabeledExample> ex(3);
    for (auto& e : ex) {
        e.features = {0.0, 1.0};
    }
    ex[1].label = 1;
    ex[1].ttf_seconds = 3.0;
    CHECK_THROWS_AS(train_forest(ex, Task::regress, {}, 1), std::invalid_argument);
    CHECK_NOTHROW(train_forest(ex, Task::classify, {}, 1));
    ex[2].features.push_back(1.0);
    CHECK_THROWS_AS(train_forest(ex, Task::classify, {}, 1), numerics::ShapeError);
}

TEST_CASE("feature assembly") {
    const auto h_tilde = rep(4, 0.0);
    const auto h_hat = rep(4, 100.0);
    CHECK(build_features(h_tilde, &h_hat).size() == 16);
    CHECK(build_features(h_tilde).size() == 8);
    const auto both = build_features(h_tilde, &h_hat);
    CHECK(both[8] == 100.0);
    CHECK(regressor_features(h_tilde) == std::vector<double>{0.0, 1.0, 3.0, 6.0});
    CHECK(regressor_features(rep(1800, 0.0)).size() == 1800);
    const auto short_hat = rep(3, 0.0);
    CHECK_THROWS_AS(build_features(h_tilde, &short_hat), numerics::ShapeError);
}

TEST_CASE("z-star assembly") {
    CHECK(assemble_zstar(0, std::nullopt, 5, 1.0) == std::vector<std::uint8_t>(5, 0));
    CHECK(assemble_zstar(1, 0.0, 4, 1.0) == std::vector<std::uint8_t>{1, 0, 0, 0});
    CHECK(assemble_zstar(1, 2.4, 4, 1.0) == std::vector<std::uint8_t>{0, 0, 1, 0});
    CHECK(assemble_zstar(1, 3.6, 4, 1.0) == std::vector<std::uint8_t>{0, 0, 0, 1});
    CHECK(assemble_zstar(1, 1.0, 4, 2.0) == std::vector<std::uint8_t>{0, 0, 1, 0});
    CHECK_THROWS_AS(assemble_zstar(1, 4.0, 4, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(assemble_zstar(1, -0.5, 4, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(assemble_zstar(1, std::nullopt, 4, 1.0), std::invalid_argument);
    CHECK_THROWS_AS(assemble_zstar(0, 1.0, 4, 1.0), std::invalid_argument);
}

TEST_CASE("forest checkpoint round trip") {
    Matrix x;
    std::vector<double> y;
    moons(80, 3, x, y);
    ForestConfig cfg;
    cfg.n_trees = 15;
    const auto m = train_forest(x, y, Task::classify, cfg, 6);
    const auto path = std::filesystem::temp_directory_path() / "faultsim_forest.json";
    m.save(path);
    const auto back = ForestModel::load(path);
    CHECK(back.to_json() == m.to_json());
    for (Index i = 0; i < 80; ++i) {
        CHECK(classify(back, row(x, i)).score == classify(m, row(x, i)).score);
    }
    CHECK_THROWS(ForestModel::from_json(nlohmann::json{{"format", "faultsim.vae"}}));
}
