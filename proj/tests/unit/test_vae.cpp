#include "faultsim/numerics/gradcheck.hpp"
#include "faultsim/numerics/random.hpp"
#include "faultsim/vae/vae.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

using namespace faultsim;
using namespace faultsim::vae;

namespace {

Matrix noise(Index rows, Index cols, std::uint64_t seed, double sd = 1.0) {
    numerics::RandomStream rng(seed);
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = sd * rng.normal();
    }
    return m;
}

VaeConfig tiny_config() {
    VaeConfig c;
    c.steps = 4;
    c.hidden = 8;
    c.epochs = 60;
    c.batch_size = 10;
    c.learning_rate = 0.01;
    c.min_windows = 10;
    return c;
}

// Two regimes: level 0 with a rising ramp, level 5 with a falling one.
std::vector<Matrix> regime_windows(std::size_t per_regime, std::uint64_t seed) {
    std::vector<Matrix> out;
    for (std::size_t i = 0; i < 2 * per_regime; ++i) {
        const bool second = i >= per_regime;
        Matrix w = noise(8, 3, seed + i, 0.3);
        for (Index t = 0; t < 8; ++t) {
            w.row(t).array() += second ? 5.0 - 0.2 * static_cast<double>(t) : 0.2 * static_cast<double>(t);
        }
        out.push_back(w);
    }
    return out;
}

double distance(const LatentPoint& a, const LatentPoint& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    return std::sqrt(s);
}

// Minimum within-cluster SSE over every partition of the rows into at most k
// nonempty groups, by restricted-growth enumeration.
double exhaustive_sse(const Matrix& pts, int k) {
    const Index n = pts.rows();
    std::vector<int> label(static_cast<std::size_t>(n), 0);
    double best = std::numeric_limits<double>::infinity();
    auto cost = [&](int groups) {
        double total = 0.0;
        for (int g = 0; g < groups; ++g) {
            Eigen::RowVectorXd centroid = Eigen::RowVectorXd::Zero(pts.cols());
            int count = 0;
            for (Index i = 0; i < n; ++i) {
                if (label[static_cast<std::size_t>(i)] == g) {
                    centroid += pts.row(i);
                    ++count;
                }
            }
            centroid /= count;
            for (Index i = 0; i < n; ++i) {
                if (label[static_cast<std::size_t>(i)] == g) {
                    total += (pts.row(i) - centroid).squaredNorm();
                }
            }
        }
        return total;
    };
    auto rec = [&](auto&& self, Index i, int used) -> void {
        if (i == n) {
            best = std::min(best, cost(used));
            return;
        }
        for (int g = 0; g <= std::min(used, k - 1); ++g) {
            label[static_cast<std::size_t>(i)] = g;
            self(self, i + 1, std::max(used, g + 1));
        }
    };
    rec(rec, 0, 0);
    return best;
}

struct DefaultRun {
    telemetry::FleetDataset fleet;
    std::vector<WindowRef> refs;
    VaeTrainResult trained;
    LatentStateModel states;
};

const DefaultRun& default_run() {
    static const DefaultRun run = [] {
        auto fleet = telemetry::generate_fleet(telemetry::GeneratorConfig{}, 1);
        auto refs = out_of_sample_windows(fleet);
        auto trained = train_vae(fleet, refs, VaeConfig{}, 1);
        auto states = build_state_model(fleet, trained.model, refs, 5, 1);
        return DefaultRun{std::move(fleet), std::move(refs), std::move(trained), std::move(states)};
    }();
    return run;
}

} // namespace

TEST_CASE("negative elbo gradients match finite differences") {
    VaeConfig cfg = tiny_config();
    cfg.steps = 2;
    cfg.hidden = 3;
    cfg.beta = 0.7;
    VaeModel model(cfg, 4, 3, 5);
    const Matrix inputs = noise(3, model.input_width(), 1);
    const Matrix eps = noise(3, kLatentDim, 2);
    const auto r = numerics::finite_diff_check(
        [&](numerics::Tape& t) { return model.batch_terms(t, inputs, eps).loss; }, model.params());
    CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("elbo terms match a direct evaluation") {
    VaeModel model(tiny_config(), 8, 3, 2);
    const Matrix x = noise(2, model.input_width(), 3);
    const Matrix zero = Matrix::Zero(2, kLatentDim);
    numerics::Tape tape;
    const auto terms = model.batch_terms(tape, x, zero);
    // With zero noise the sample is the posterior mean.
    const Matrix mu = model.encode_rows(x);
    const Matrix out = model.decode_rows(mu);
    CHECK(terms.reconstruction.scalar() == doctest::Approx(0.25 * (out - x).squaredNorm()).epsilon(1e-12));
    Matrix h = x * model.params().at("enc_w").value;
    h.rowwise() += model.params().at("enc_b").value.row(0);
    h = h.array().tanh().matrix();
    Matrix lv = h * model.params().at("lv_w").value;
    lv.rowwise() += model.params().at("lv_b").value.row(0);
    double kl = 0.0;
    for (Index i = 0; i < 2; ++i) {
        for (Index k = 0; k < kLatentDim; ++k) {
            kl += 0.5 * (std::exp(lv(i, k)) + mu(i, k) * mu(i, k) - 1.0 - lv(i, k));
        }
    }
    CHECK(terms.kl.scalar() == doctest::Approx(kl / 2.0).epsilon(1e-12));
}

TEST_CASE("strided downsampling and hold upsampling") {
    Matrix w(6, 1);
    w << 0, 1, 2, 3, 4, 5;
    const Matrix d = downsample(w, 3);
    CHECK(d == (Matrix(3, 1) << 0, 2, 4).finished());
    CHECK(upsample(d, 6) == (Matrix(6, 1) << 0, 0, 2, 2, 4, 4).finished());
    CHECK(upsample(d, 4) == (Matrix(4, 1) << 0, 0, 2, 4).finished());
    CHECK(downsample(w, 6) == w);
    CHECK_THROWS_AS(downsample(w, 7), numerics::ShapeError);
}

TEST_CASE("identical windows are reconstructed almost exactly") {
    const Matrix w = noise(8, 3, 4, 2.0);
    std::vector<Matrix> windows(40, w);
    auto cfg = tiny_config();
    cfg.epochs = 150;
    const auto trained = train_vae(windows, cfg, 3);
    CHECK(trained.history.mse.back() < 0.01);
    CHECK(trained.history.kl.back() < 0.1);
    const Matrix rec = decode_compact(trained.model, encode(trained.model, w));
    CHECK((rec - downsample(w, 4)).cwiseAbs().maxCoeff() < 0.3);
}

TEST_CASE("kl term stays nonnegative and the elbo improves") {
    const auto windows = regime_windows(30, 10);
    const auto trained = train_vae(windows, tiny_config(), 9);
    for (double kl : trained.history.kl) {
        CHECK(kl >= 0.0);
    }
    CHECK(trained.history.elbo.back() > trained.history.elbo.front());
    REQUIRE(trained.history.elbo.size() == 60);
}

TEST_CASE("training is deterministic per seed") {
    const auto windows = regime_windows(10, 2);
    const auto a = train_vae(windows, tiny_config(), 4);
    const auto b = train_vae(windows, tiny_config(), 4);
    CHECK(a.model.params().checksum() == b.model.params().checksum());
    CHECK(a.history.elbo == b.history.elbo);
}

TEST_CASE("train_vae rejects small or ragged input") {
    auto cfg = tiny_config();
    cfg.min_windows = 100;
    CHECK_THROWS_AS(train_vae(regime_windows(49, 1), cfg, 1), std::invalid_argument);
    auto windows = regime_windows(10, 1);
    windows[3] = noise(7, 3, 1);
    CHECK_THROWS_AS(train_vae(windows, tiny_config(), 1), numerics::ShapeError);
}

TEST_CASE("encoding separates regimes and is deterministic") {
    const auto windows = regime_windows(30, 20);
    const auto trained = train_vae(windows, tiny_config(), 6);
    std::vector<LatentPoint> z;
    for (const auto& w : windows) {
        z.push_back(encode(trained.model, w));
    }
    CHECK(encode(trained.model, windows[0]) == z[0]);
    std::vector<double> within;
    double across = 0.0;
    int across_n = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        for (std::size_t j = i + 1; j < z.size(); ++j) {
            const double d = distance(z[i], z[j]);
            if ((i < 30) == (j < 30)) {
                within.push_back(d);
            } else {
                across += d;
                ++across_n;
            }
        }
    }
    std::nth_element(within.begin(), within.begin() + static_cast<std::ptrdiff_t>(within.size() / 2), within.end());
    CHECK(across / across_n > within[within.size() / 2]);

    Matrix at_mean = trained.model.mean().replicate(8, 1);
    const auto center = encode(trained.model, at_mean);
    for (double v : center) {
        CHECK(std::isfinite(v));
    }
    CHECK_THROWS_AS(encode(trained.model, noise(7, 3, 1)), numerics::ShapeError);
}

TEST_CASE("decoding is deterministic and shaped like the input") {
    const auto windows = regime_windows(20, 5);
    const auto trained = train_vae(windows, tiny_config(), 2);
    const LatentPoint z{0.3, -1.0, 0.5};
    const Matrix a = decode(trained.model, z);
    CHECK(a.rows() == 8);
    CHECK(a.cols() == 3);
    CHECK(a == decode(trained.model, z));
    CHECK(a == upsample(decode_compact(trained.model, z), 8));
    for (const auto& w : windows) {
        CHECK(reconstruct_true_future(trained.model, w) == decode(trained.model, encode(trained.model, w)));
    }
}

TEST_CASE("k-means on the four-point line") {
    Matrix p(4, 1);
    p << 0, 1, 10, 11;
    const auto r = fit_kmeans(p, 2, 1);
    CHECK(r.assignments[0] == r.assignments[1]);
    CHECK(r.assignments[2] == r.assignments[3]);
    CHECK(r.assignments[0] != r.assignments[2]);
    std::vector<double> centers{r.centers(0, 0), r.centers(1, 0)};
    std::sort(centers.begin(), centers.end());
    CHECK(centers == std::vector<double>{0.5, 10.5});
    CHECK(r.sse == doctest::Approx(exhaustive_sse(p, 2)));
}

TEST_CASE("k-means with one center per point has zero error") {
    const Matrix p = noise(6, 3, 8);
    const auto r = fit_kmeans(p, 6, 2);
    CHECK(r.sse == 0.0);
    std::vector<int> a = r.assignments;
    std::sort(a.begin(), a.end());
    CHECK(a == std::vector<int>{0, 1, 2, 3, 4, 5});
    CHECK_THROWS_AS(fit_kmeans(p, 7, 1), std::invalid_argument);
}

TEST_CASE("k-means on a duplicated dataset keeps its centers") {
    Matrix p(6, 2);
    p << 0, 0, 0.5, 0.2, 5, 5, 5.2, 4.9, -4, 6, -4.3, 6.1;
    Matrix twice(12, 2);
    twice << p, p;
    auto sorted_centers = [](const Matrix& c) {
        std::vector<std::pair<double, double>> v;
        for (Index i = 0; i < c.rows(); ++i) {
            v.emplace_back(c(i, 0), c(i, 1));
        }
        std::sort(v.begin(), v.end());
        return v;
    };
    const auto a = sorted_centers(fit_kmeans(p, 3, 4).centers);
    const auto b = sorted_centers(fit_kmeans(twice, 3, 4).centers);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].first == doctest::Approx(b[i].first).epsilon(1e-12));
        CHECK(a[i].second == doctest::Approx(b[i].second).epsilon(1e-12));
    }
    CHECK(exhaustive_sse(twice, 3) == doctest::Approx(2.0 * exhaustive_sse(p, 3)));
}

TEST_CASE("k-means is within 5 percent of the exhaustive optimum") {
    numerics::RandomStream rng(77);
    for (int instance = 0; instance < 50; ++instance) {
        const auto n = static_cast<Index>(6 + rng.index(7));
        const int k = 2 + static_cast<int>(rng.index(3));
        Matrix p(n, 3);
        for (Index i = 0; i < p.size(); ++i) {
            p.data()[i] = rng.normal() + (i % n < n / 2 ? 0.0 : 3.0);
        }
        const auto r = fit_kmeans(p, k, static_cast<std::uint64_t>(instance));
        CHECK(r.sse <= 1.05 * exhaustive_sse(p, k) + 1e-12);
        CHECK(r.sse == doctest::Approx(within_cluster_sse(p, r.centers, r.assignments)).epsilon(1e-12));
    }
}

TEST_CASE("every point sits with its nearest center") {
    const Matrix p = noise(200, 3, 5);
    const auto r = fit_kmeans(p, 5, 9);
    for (Index i = 0; i < p.rows(); ++i) {
        const double own = (p.row(i) - r.centers.row(r.assignments[static_cast<std::size_t>(i)])).squaredNorm();
        for (Index j = 0; j < r.centers.rows(); ++j) {
            CHECK(own <= (p.row(i) - r.centers.row(j)).squaredNorm());
        }
    }
    CHECK(r.iterations <= 300);
    Matrix c(2, 1);
    c << -1, 1;
    Matrix origin = Matrix::Zero(1, 1);
    CHECK(nearest_center(c, origin.row(0)) == 0);
}

TEST_CASE("out-of-sample training refuses in-sample windows") {
    const auto& run = default_run();
    auto refs = run.refs;
    WindowRef leak = refs.front();
    leak.vehicle_id = run.fleet.in_sample_ids.front();
    leak.t0 = run.fleet.starts(leak.vehicle_id).front();
    refs.push_back(leak);
    CHECK_THROWS_AS(train_vae(run.fleet, refs, VaeConfig{}, 1), telemetry::DataError);
    for (const auto& r : run.refs) {
        CHECK_FALSE(run.fleet.is_in_sample(r.vehicle_id));
    }
}

TEST_CASE("default fleet training halves the reconstruction error") {
    const auto& h = default_run().trained.history;
    CHECK(h.mse.back() < 0.5 * h.mse.front());
    CHECK(h.elbo.back() > h.elbo.front());
    for (double kl : h.kl) {
        CHECK(kl >= 0.0);
    }
}

TEST_CASE("reconstruction of training windows stays under the trained bound") {
    const auto& run = default_run();
    double total = 0.0;
    for (const auto& r : run.refs) {
        const Matrix row = run.trained.model.flatten(future_window(run.fleet, r));
        const Matrix rec = run.trained.model.decode_rows(run.trained.model.encode_rows(row));
        total += (rec - row).squaredNorm() / static_cast<double>(row.size());
    }
    CHECK(total / static_cast<double>(run.refs.size()) < run.trained.history.mse.back());
}

TEST_CASE("state sampling draws only from the requested state") {
    const auto& sm = default_run().states;
    REQUIRE(sm.state_count() == 5);
    for (int s = 0; s < 5; ++s) {
        for (const auto& z : sample_latents(sm, s, 50, 3)) {
            const Eigen::RowVectorXd p = Eigen::Map<const Eigen::RowVectorXd>(z.data(), kLatentDim);
            CHECK(nearest_center(sm.clusters.centers, p) == s);
        }
    }
    CHECK(sample_from_state(sm, 2, 4, 8) == sample_from_state(sm, 2, 4, 8));
    CHECK_THROWS_AS(sample_latents(sm, 5, 1, 1), std::out_of_range);
    CHECK_THROWS_AS(sample_latents(sm, -1, 1, 1), std::out_of_range);
}

TEST_CASE("state samples stay inside the member envelope") {
    const auto& sm = default_run().states;
    const auto members = sm.members(0);
    REQUIRE_FALSE(members.empty());
    Matrix lo = Matrix::Constant(1, telemetry::kSensorCount, std::numeric_limits<double>::infinity());
    Matrix hi = -lo;
    for (auto i : members) {
        const auto r = static_cast<Index>(i);
        const Matrix w = decode(sm.model, {sm.points(r, 0), sm.points(r, 1), sm.points(r, 2)});
        const Matrix m = w.colwise().mean();
        lo = lo.cwiseMin(m);
        hi = hi.cwiseMax(m);
    }
    const auto samples = sample_from_state(sm, 0, 100, 4);
    REQUIRE(samples.size() == 100);
    for (const auto& w : samples) {
        REQUIRE(w.rows() == 300);
        const Matrix m = w.colwise().mean();
        const Matrix slack = 0.1 * (hi - lo);
        CHECK(((m - lo + slack).array() >= 0.0).all());
        CHECK(((hi + slack - m).array() >= 0.0).all());
    }
}

TEST_CASE("single-member and empty states") {
    const auto& base = default_run().states;
    LatentStateModel sm{base.model, base.points.topRows(3), {}, {base.windows.begin(), base.windows.begin() + 3}};
    sm.clusters.centers = Matrix(3, kLatentDim);
    sm.clusters.centers << base.points.row(0), base.points.row(1), Matrix::Constant(1, kLatentDim, 1e6);
    sm.clusters.assignments = {0, 1, 1};
    const auto three = sample_from_state(sm, 0, 3, 1);
    CHECK(three[0] == three[1]);
    CHECK(three[1] == three[2]);
    CHECK_THROWS_AS(sample_from_state(sm, 2, 1, 1), std::invalid_argument);
}

TEST_CASE("metadata association summaries") {
    const auto& sm = default_run().states;
    const auto states = metadata_association(sm);
    const auto global = global_summary(sm);
    std::size_t total = 0;
    bool differs = false;
    bool high_hazard_mode = false;
    for (const auto& s : states) {
        total += s.count;
        differs = differs || std::abs(s.fault_fraction - global.fault_fraction) > 0.2 * global.fault_fraction;
        high_hazard_mode = high_hazard_mode || s.modal_location == telemetry::GeneratorConfig{}.high_hazard_location;
        CHECK(s.fault_fraction >= 0.0);
        CHECK(s.fault_fraction <= 1.0);
    }
    CHECK(total == sm.windows.size());
    CHECK(differs);
    CHECK(high_hazard_mode);

    LatentStateModel one = sm;
    one.clusters.centers = sm.points.colwise().mean();
    one.clusters.assignments.assign(sm.windows.size(), 0);
    const auto only = metadata_association(one);
    REQUIRE(only.size() == 1);
    CHECK(only[0].count == global.count);
    CHECK(only[0].modal_location == global.modal_location);
    CHECK(only[0].modal_subfamily == global.modal_subfamily);
    CHECK(only[0].mean_engine_hours == global.mean_engine_hours);
    CHECK(only[0].mean_odometer_miles == global.mean_odometer_miles);
    CHECK(only[0].fault_fraction == global.fault_fraction);
}

TEST_CASE("mode ties go to the lowest value") {
    std::vector<WindowRef> w(4);
    w[0].metadata.location = 2;
    w[1].metadata.location = 1;
    w[2].metadata.location = 2;
    w[3].metadata.location = 1;
    w[1].fault_in_window = true;
    const auto s = summarize_windows(w, {0, 1, 2, 3});
    CHECK(s.modal_location == 1);
    CHECK(s.fault_fraction == 0.25);
}

TEST_CASE("latent csv export and checkpoint round trip") {
    const auto& sm = default_run().states;
    const auto dir = std::filesystem::temp_directory_path() / "faultsim_vae_test";
    std::filesystem::create_directories(dir);
    write_latent_csv(sm, dir / "latent.csv");
    std::ifstream in(dir / "latent.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "vehicle_id,t0,z1,z2,z3,state,fault_in_window,location,odometer_miles,engine_hours,subfamily");
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) {
        CHECK(std::count(line.begin(), line.end(), ',') == 10);
        ++rows;
    }
    CHECK(rows == sm.windows.size());

    const auto back = state_model_from_json(nlohmann::json::parse(to_json(sm).dump()));
    CHECK(back.model.params().checksum() == sm.model.params().checksum());
    CHECK(back.points == sm.points);
    CHECK(back.clusters.assignments == sm.clusters.assignments);
    CHECK(back.windows.size() == sm.windows.size());
    CHECK(back.windows.back().metadata == sm.windows.back().metadata);
    CHECK(sample_from_state(back, 1, 3, 2) == sample_from_state(sm, 1, 3, 2));

    sm.model.save(dir / "vae.json");
    CHECK(VaeModel::load(dir / "vae.json").params().checksum() == sm.model.params().checksum());
    CHECK_THROWS(VaeModel::from_json(nlohmann::json{{"format", "faultsim.stam"}}));
}
