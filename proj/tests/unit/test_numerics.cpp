#include "faultsim/numerics/checkpoint.hpp"
#include "faultsim/numerics/gradcheck.hpp"
#include "faultsim/numerics/optimizer.hpp"
#include "faultsim/numerics/random.hpp"
#include "faultsim/numerics/tape.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace faultsim;
using namespace faultsim::numerics;

namespace {

Matrix random_matrix(RandomStream& rng, Index r, Index c, double scale = 1.0) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.normal(0.0, scale);
    }
    return m;
}

// Contract an arbitrary-shaped output with fixed random weights so that every
// output coordinate contributes to the checked gradient.
Var contract(Tape& t, Var out, std::uint64_t seed) {
    RandomStream rng(seed);
    return sum(mul(out, t.constant(random_matrix(rng, out.rows(), out.cols()))));
}

} // namespace

TEST_CASE("gradient of sum is all ones") {
    ParameterSet ps;
    ps.add("w", Matrix::Constant(2, 3, 0.7));
    forward_backward([&](Tape& t) { return sum(t.param(ps[0])); }, ps);
    CHECK(ps[0].grad.isApprox(Matrix::Ones(2, 3)));
}

TEST_CASE("gradient of sum of squares at [1,2] is [2,4]") {
    ParameterSet ps;
    Matrix w(1, 2);
    w << 1.0, 2.0;
    ps.add("w", w);
    const double v = forward_backward([&](Tape& t) { return sum(square(t.param(ps[0]))); }, ps);
    CHECK(v == doctest::Approx(5.0));
    CHECK(ps[0].grad(0, 0) == doctest::Approx(2.0));
    CHECK(ps[0].grad(0, 1) == doctest::Approx(4.0));
}

TEST_CASE("every primitive matches central differences on random shapes") {
    RandomStream shapes(11);
    for (int trial = 0; trial < 5; ++trial) {
        const Index r = 1 + static_cast<Index>(shapes.index(4));
        const Index c = 1 + static_cast<Index>(shapes.index(4));
        const Index k = 1 + static_cast<Index>(shapes.index(4));
        RandomStream rng(100 + trial);
        ParameterSet ps;
        const auto a = ps.add("a", random_matrix(rng, r, c));
        const auto b = ps.add("b", random_matrix(rng, r, c));
        const auto m = ps.add("m", random_matrix(rng, c, k));
        const auto row = ps.add("row", random_matrix(rng, 1, c));
        const auto pos = ps.add("pos", (random_matrix(rng, r, c).array().abs() + 0.5).matrix());
        const auto w = ps.add("w", random_matrix(rng, r, c));
        const auto v = ps.add("v", random_matrix(rng, r * c, k));
        Matrix targets(r, c);
        for (Index i = 0; i < targets.size(); ++i) {
            targets.data()[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        }

        struct Case {
            const char* name;
            std::function<Var(Tape&)> f;
        };
        const std::uint64_t s = 7 + static_cast<std::uint64_t>(trial);
        std::vector<Case> cases = {
            {"matmul", [&](Tape& t) { return contract(t, matmul(t.param(ps[a]), t.param(ps[m])), s); }},
            {"add", [&](Tape& t) { return contract(t, add(t.param(ps[a]), t.param(ps[b])), s); }},
            {"sub", [&](Tape& t) { return contract(t, sub(t.param(ps[a]), t.param(ps[b])), s); }},
            {"mul", [&](Tape& t) { return contract(t, mul(t.param(ps[a]), t.param(ps[b])), s); }},
            {"add_row", [&](Tape& t) { return contract(t, add_row(t.param(ps[a]), t.param(ps[row])), s); }},
            {"mul_row", [&](Tape& t) { return contract(t, mul_row(t.param(ps[a]), t.param(ps[row])), s); }},
            {"scale", [&](Tape& t) { return contract(t, scale(t.param(ps[a]), -1.7), s); }},
            {"add_scalar", [&](Tape& t) { return contract(t, add_scalar(t.param(ps[a]), 0.3), s); }},
            {"tanh", [&](Tape& t) { return contract(t, tanh(t.param(ps[a])), s); }},
            {"sigmoid", [&](Tape& t) { return contract(t, sigmoid(t.param(ps[a])), s); }},
            {"exp", [&](Tape& t) { return contract(t, exp(t.param(ps[a])), s); }},
            {"log", [&](Tape& t) { return contract(t, log(t.param(ps[pos])), s); }},
            {"square", [&](Tape& t) { return contract(t, square(t.param(ps[a])), s); }},
            {"softmax_rows", [&](Tape& t) { return contract(t, softmax_rows(t.param(ps[a])), s); }},
            {"reshape", [&](Tape& t) { return contract(t, reshape(t.param(ps[a]), c, r), s); }},
            {"concat_cols", [&](Tape& t) { return contract(t, concat_cols(t.param(ps[a]), t.param(ps[b])), s); }},
            {"concat_rows",
             [&](Tape& t) { return contract(t, concat_rows({t.param(ps[a]), t.param(ps[b]), t.param(ps[a])}), s); }},
            {"slice_rows", [&](Tape& t) { return contract(t, slice_rows(t.param(ps[a]), r - 1, 1), s); }},
            {"slice_cols", [&](Tape& t) { return contract(t, slice_cols(t.param(ps[a]), 0, c), s); }},
            {"sum", [&](Tape& t) { return scale(sum(t.param(ps[a])), 0.5); }},
            {"mean", [&](Tape& t) { return square(mean(t.param(ps[a]))); }},
            {"segment_weighted_sum",
             [&](Tape& t) { return contract(t, segment_weighted_sum(t.param(ps[w]), t.param(ps[v])), s); }},
            {"bernoulli_nll_logits", [&](Tape& t) { return bernoulli_nll_logits(t.param(ps[a]), targets); }},
        };
        for (const auto& cs : cases) {
            CAPTURE(cs.name);
            CAPTURE(trial);
            const auto res = finite_diff_check(cs.f, ps);
            CHECK(res.max_relative_error < 1e-4);
        }
    }
}

TEST_CASE("two-layer network loss matches central differences") {
    RandomStream rng(3);
    ParameterSet ps;
    const auto w1 = ps.add("w1", random_matrix(rng, 5, 8, 0.5));
    const auto b1 = ps.add("b1", random_matrix(rng, 1, 8, 0.1));
    const auto w2 = ps.add("w2", random_matrix(rng, 8, 3, 0.5));
    const Matrix x = random_matrix(rng, 6, 5);
    const Matrix y = random_matrix(rng, 6, 3);
    auto loss = [&](Tape& t) {
        Var h = tanh(add_row(matmul(t.constant(x), t.param(ps[w1])), t.param(ps[b1])));
        Var out = matmul(h, t.param(ps[w2]));
        return mean(square(sub(out, t.constant(y))));
    };
    CHECK(finite_diff_check(loss, ps).max_relative_error < 1e-4);
}

TEST_CASE("finite_diff_check on reference functions") {
    RandomStream rng(5);
    ParameterSet ps;
    ps.add("w", random_matrix(rng, 3, 3));
    SUBCASE("quadratic") {
        auto quad = [&](Tape& t) { return sum(square(t.param(ps[0]))); };
        CHECK(finite_diff_check(quad, ps).max_relative_error < 1e-8);
    }
    SUBCASE("softmax cross-entropy toy") {
        Matrix onehot = Matrix::Zero(3, 3);
        onehot(0, 1) = onehot(1, 0) = onehot(2, 2) = 1.0;
        auto ce = [&](Tape& t) {
            Var p = softmax_rows(t.param(ps[0]));
            return scale(sum(mul(t.constant(onehot), log(p))), -1.0 / 3.0);
        };
        CHECK(finite_diff_check(ce, ps).max_relative_error < 1e-4);
    }
    SUBCASE("constant function") {
        auto constant = [&](Tape& t) { return add_scalar(scale(sum(t.param(ps[0])), 0.0), 4.0); };
        const auto res = finite_diff_check(constant, ps);
        CHECK(res.max_relative_error < 1e-8);
        CHECK(ps[0].grad.cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("tape rejects non-scalar losses and traps non-finite values") {
    ParameterSet ps;
    ps.add("w", Matrix::Constant(2, 2, -1.0));
    Tape t;
    Var w = t.param(ps[0]);
    CHECK_THROWS_AS(t.backward(w), ShapeError);
    CHECK_THROWS_AS(log(w), NumericError);
    try {
        exp(scale(w, -1000.0));
        FAIL("expected overflow trap");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("exp") != std::string::npos);
    }
    CHECK_THROWS_AS(matmul(w, t.constant(Matrix::Ones(3, 1))), ShapeError);
}

TEST_CASE("adam leaves parameters unchanged under zero gradient") {
    ParameterSet ps;
    ps.add("w", Matrix::Constant(2, 2, 1.25));
    Adam opt(ps, {});
    for (int i = 0; i < 5; ++i) {
        ps.zero_grad();
        opt.step(ps);
    }
    CHECK(ps[0].value == Matrix::Constant(2, 2, 1.25));
    CHECK(opt.step_count() == 5);
}

TEST_CASE("adam converges on a 1-D quadratic") {
    // f(w) = (w - 1.5)^2, closed-form argmin 1.5.
    auto run = [] {
        ParameterSet ps;
        ps.add("w", Matrix::Zero(1, 1));
        AdamConfig cfg;
        cfg.learning_rate = 0.05;
        Adam opt(ps, cfg);
        std::vector<double> traj;
        for (int i = 0; i < 200; ++i) {
            forward_backward([&](Tape& t) { return sum(square(add_scalar(t.param(ps[0]), -1.5))); }, ps);
            opt.step(ps);
            traj.push_back(ps[0].value(0, 0));
        }
        return traj;
    };
    const auto a = run();
    CHECK(std::abs(a.back() - 1.5) < 1e-3);
    CHECK(a == run());
}

TEST_CASE("adam decreases a convex quadratic monotonically after burn-in") {
    ParameterSet ps;
    Matrix w0(1, 3);
    w0 << 4.0, -2.0, 3.0;
    ps.add("w", w0);
    Adam opt(ps, {});
    std::vector<double> losses;
    for (int i = 0; i < 400; ++i) {
        losses.push_back(forward_backward([&](Tape& t) { return sum(square(t.param(ps[0]))); }, ps));
        opt.step(ps);
    }
    for (std::size_t i = 6; i < losses.size(); ++i) {
        CHECK(losses[i] < losses[i - 1]);
    }
    CHECK_THROWS_AS(Adam(ParameterSet{}, {}).step(ps), ShapeError);
}

TEST_CASE("random streams are reproducible and splittable") {
    RandomStream a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.uniform() == b.uniform());
    }
    RandomStream root(42);
    auto ca = root.child("a");
    auto cb = root.child("b");
    int same = 0;
    for (int i = 0; i < 100; ++i) {
        same += ca.uniform() == cb.uniform();
    }
    CHECK(same == 0);
    CHECK(root.child("a").uniform() == RandomStream(42).child("a").uniform());

    RandomStream n(9);
    double total = 0.0;
    for (int i = 0; i < 100000; ++i) {
        total += n.normal();
    }
    CHECK(std::abs(total / 100000.0) < 0.02);

    auto perm = RandomStream(1).permutation(50);
    std::sort(perm.begin(), perm.end());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        CHECK(perm[i] == i);
    }
    const double weights[] = {0.0, 1.0, 0.0};
    CHECK(RandomStream(1).categorical(weights) == 1);
}

TEST_CASE("parameter checkpoints round-trip exactly") {
    RandomStream rng(8);
    ParameterSet ps;
    ps.add("a", random_matrix(rng, 3, 4));
    ps.add("b", random_matrix(rng, 1, 2));
    const auto path = std::filesystem::temp_directory_path() / "faultsim_params_test.json";
    write_json(params_to_json(ps), path);

    ParameterSet loaded;
    loaded.add("a", Matrix::Zero(3, 4));
    loaded.add("b", Matrix::Zero(1, 2));
    params_from_json(read_json(path), loaded);
    CHECK(loaded.checksum() == ps.checksum());

    ParameterSet wrong;
    wrong.add("a", Matrix::Zero(4, 3));
    wrong.add("b", Matrix::Zero(1, 2));
    CHECK_THROWS(params_from_json(read_json(path), wrong));
    std::filesystem::remove(path);
}
