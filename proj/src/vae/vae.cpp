#include "faultsim/vae/vae.hpp"

#include "faultsim/numerics/optimizer.hpp"
#include "faultsim/numerics/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <stdexcept>

namespace faultsim::vae {

using numerics::Tape;
using numerics::Var;

namespace {

Matrix uniform_init(numerics::RandomStream& rng, Index r, Index c, double bound) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.uniform(-bound, bound);
    }
    return m;
}

Matrix encoder_hidden(const numerics::ParameterSet& p, const Matrix& x) {
    Matrix h = x * p.at("enc_w").value;
    h.rowwise() += p.at("enc_b").value.row(0);
    return h.array().tanh().matrix();
}

std::string fmt(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

nlohmann::json ref_to_json(const WindowRef& r) {
    return {{"vehicle_id", r.vehicle_id},
            {"t0", r.t0},
            {"location", r.metadata.location},
            {"odometer_miles", r.metadata.odometer_miles},
            {"engine_hours", r.metadata.engine_hours},
            {"subfamily", r.metadata.subfamily},
            {"fault_in_window", r.fault_in_window}};
}

WindowRef ref_from_json(const nlohmann::json& j) {
    WindowRef r;
    r.vehicle_id = j.at("vehicle_id").get<std::string>();
    r.t0 = j.at("t0").get<Index>();
    r.metadata.location = j.at("location").get<int>();
    r.metadata.odometer_miles = j.at("odometer_miles").get<double>();
    r.metadata.engine_hours = j.at("engine_hours").get<double>();
    r.metadata.subfamily = j.at("subfamily").get<int>();
    r.fault_in_window = j.at("fault_in_window").get<bool>();
    return r;
}

} // namespace

nlohmann::json to_json(const VaeConfig& c) {
    return {{"steps", c.steps},
            {"hidden", c.hidden},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"clip_norm", c.clip_norm},
            {"beta", c.beta},
            {"min_windows", c.min_windows}};
}

VaeConfig vae_config_from_json(const nlohmann::json& j, const VaeConfig& d) {
    VaeConfig c = d;
    c.steps = j.value("steps", c.steps);
    c.hidden = j.value("hidden", c.hidden);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.beta = j.value("beta", c.beta);
    c.min_windows = j.value("min_windows", c.min_windows);
    return c;
}

Matrix downsample(const Matrix& window, Index steps) {
    const Index t = window.rows();
    if (steps < 1 || t < steps) {
        throw numerics::ShapeError("downsample: cannot take " + std::to_string(steps) + " rows from " +
                                   std::to_string(t));
    }
    Matrix out(steps, window.cols());
    for (Index i = 0; i < steps; ++i) {
        out.row(i) = window.row(i * t / steps);
    }
    return out;
}

Matrix upsample(const Matrix& compact, Index horizon) {
    const Index s = compact.rows();
    if (s < 1 || horizon < 0) {
        throw numerics::ShapeError("upsample: empty input or negative horizon");
    }
    Matrix out(horizon, compact.cols());
    for (Index t = 0; t < horizon; ++t) {
        out.row(t) = compact.row(std::min<Index>(t * s / horizon, s - 1));
    }
    return out;
}

VaeModel::VaeModel(VaeConfig config, Index horizon, Index channels, std::uint64_t init_seed)
    : config_(config), horizon_(horizon), channels_(channels) {
    if (channels < 1 || config_.steps < 1 || horizon < config_.steps || config_.hidden < 1 ||
        config_.batch_size < 1 || config_.epochs < 0 || config_.beta < 0.0) {
        throw std::invalid_argument("vae: invalid hyperparameters");
    }
    const Index d = input_width();
    const Index h = config_.hidden;
    numerics::RandomStream rng(init_seed);
    params_.add("enc_w", uniform_init(rng, d, h, 1.0 / std::sqrt(static_cast<double>(d))));
    params_.add("enc_b", Matrix::Zero(1, h));
    params_.add("mu_w", uniform_init(rng, h, kLatentDim, 1.0 / std::sqrt(static_cast<double>(h))));
    params_.add("mu_b", Matrix::Zero(1, kLatentDim));
    params_.add("lv_w", uniform_init(rng, h, kLatentDim, 0.1 / std::sqrt(static_cast<double>(h))));
    params_.add("lv_b", Matrix::Zero(1, kLatentDim));
    params_.add("dec_w", uniform_init(rng, kLatentDim, h, 1.0 / std::sqrt(static_cast<double>(kLatentDim))));
    params_.add("dec_b", Matrix::Zero(1, h));
    params_.add("out_w", uniform_init(rng, h, d, 1.0 / std::sqrt(static_cast<double>(h))));
    params_.add("out_b", Matrix::Zero(1, d));
    mean_ = Matrix::Zero(1, channels);
    std_ = Matrix::Ones(1, channels);
}

void VaeModel::set_normalization(Matrix mean, Matrix std) {
    if (mean.rows() != 1 || mean.cols() != channels_ || std.rows() != 1 || std.cols() != channels_) {
        throw numerics::ShapeError("vae: normalization statistics must be 1 x " + std::to_string(channels_));
    }
    mean_ = std::move(mean);
    std_ = std::move(std);
}

Matrix VaeModel::flatten(const Matrix& window) const {
    if (window.rows() != horizon_ || window.cols() != channels_) {
        throw numerics::ShapeError("vae: window " + numerics::shape_string(window) + ", expected " +
                                   std::to_string(horizon_) + "x" + std::to_string(channels_));
    }
    Matrix z = downsample(window, config_.steps);
    z.rowwise() -= mean_.row(0);
    z.array().rowwise() /= std_.row(0).array();
    return Eigen::Map<const Matrix>(z.data(), 1, z.size());
}

Matrix VaeModel::unflatten(const Matrix& row) const {
    if (row.rows() != 1 || row.cols() != input_width()) {
        throw numerics::ShapeError("vae: flattened row " + numerics::shape_string(row));
    }
    Matrix x = Eigen::Map<const Matrix>(row.data(), config_.steps, channels_);
    x.array().rowwise() *= std_.row(0).array();
    x.rowwise() += mean_.row(0);
    return x;
}

VaeModel::Terms VaeModel::batch_terms(Tape& tape, const Matrix& inputs, const Matrix& noise) const {
    if (inputs.cols() != input_width() || noise.rows() != inputs.rows() || noise.cols() != kLatentDim) {
        throw numerics::ShapeError("vae: batch " + numerics::shape_string(inputs) + " with noise " +
                                   numerics::shape_string(noise));
    }
    auto& ps = const_cast<numerics::ParameterSet&>(params_);
    auto p = [&](const char* name) { return tape.param(ps.at(name)); };
    const double b = static_cast<double>(inputs.rows());

    const Var x = tape.constant(inputs);
    const Var h = tanh(add_row(matmul(x, p("enc_w")), p("enc_b")));
    const Var mu = add_row(matmul(h, p("mu_w")), p("mu_b"));
    const Var lv = add_row(matmul(h, p("lv_w")), p("lv_b"));
    const Var z = add(mu, mul(exp(scale(lv, 0.5)), tape.constant(noise)));
    const Var g = tanh(add_row(matmul(z, p("dec_w")), p("dec_b")));
    const Var out = add_row(matmul(g, p("out_w")), p("out_b"));

    const Var rec = scale(sum(square(sub(out, x))), 0.5 / b);
    const Var kl = scale(sum(sub(add_scalar(sub(lv, square(mu)), 1.0), exp(lv))), -0.5 / b);
    const Var loss = add(rec, scale(kl, config_.beta));
    return {loss, rec, kl, out};
}

Matrix VaeModel::encode_rows(const Matrix& inputs) const {
    if (inputs.cols() != input_width()) {
        throw numerics::ShapeError("vae: encoder input " + numerics::shape_string(inputs));
    }
    Matrix mu = encoder_hidden(params_, inputs) * params_.at("mu_w").value;
    mu.rowwise() += params_.at("mu_b").value.row(0);
    return mu;
}

Matrix VaeModel::decode_rows(const Matrix& latents) const {
    if (latents.cols() != kLatentDim) {
        throw numerics::ShapeError("vae: latent rows " + numerics::shape_string(latents));
    }
    Matrix g = latents * params_.at("dec_w").value;
    g.rowwise() += params_.at("dec_b").value.row(0);
    Matrix out = g.array().tanh().matrix() * params_.at("out_w").value;
    out.rowwise() += params_.at("out_b").value.row(0);
    return out;
}

nlohmann::json VaeModel::to_json() const {
    nlohmann::json j;
    j["format"] = "faultsim.vae";
    j["version"] = 1;
    j["config"] = vae::to_json(config_);
    j["horizon"] = horizon_;
    j["channels"] = channels_;
    j["mean"] = numerics::matrix_to_json(mean_);
    j["std"] = numerics::matrix_to_json(std_);
    j["params"] = numerics::params_to_json(params_);
    return j;
}

VaeModel VaeModel::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "faultsim.vae") {
        throw std::runtime_error("not a vae checkpoint");
    }
    VaeModel m(vae_config_from_json(j.at("config")), j.at("horizon").get<Index>(), j.at("channels").get<Index>(), 0);
    m.set_normalization(numerics::matrix_from_json(j.at("mean")), numerics::matrix_from_json(j.at("std")));
    numerics::params_from_json(j.at("params"), m.params_);
    return m;
}

void VaeModel::save(const std::filesystem::path& path) const { numerics::write_json(to_json(), path); }

VaeModel VaeModel::load(const std::filesystem::path& path) { return from_json(numerics::read_json(path)); }

VaeTrainResult train_vae(const std::vector<Matrix>& windows, const VaeConfig& config, std::uint64_t seed) {
    if (windows.size() < config.min_windows) {
        throw std::invalid_argument("vae: " + std::to_string(windows.size()) + " training windows, need at least " +
                                    std::to_string(config.min_windows));
    }
    if (windows.empty()) {
        throw std::invalid_argument("vae: no training windows");
    }
    const Index horizon = windows.front().rows();
    const Index c = windows.front().cols();
    numerics::RandomStream rng(seed);
    VaeModel model(config, horizon, c, rng.child("init").seed());

    Matrix stacked(static_cast<Index>(windows.size()) * config.steps, c);
    for (std::size_t i = 0; i < windows.size(); ++i) {
        if (windows[i].rows() != horizon || windows[i].cols() != c) {
            throw numerics::ShapeError("vae: window " + std::to_string(i) + " is " +
                                       numerics::shape_string(windows[i]));
        }
        stacked.middleRows(static_cast<Index>(i) * config.steps, config.steps) = downsample(windows[i], config.steps);
    }
    const Matrix mu = stacked.colwise().mean();
    Matrix sd = ((stacked.rowwise() - mu.row(0)).array().square().colwise().mean()).sqrt().matrix();
    for (Index i = 0; i < c; ++i) {
        if (!(sd(0, i) > 1e-8)) {
            sd(0, i) = 1.0;
        }
    }
    model.set_normalization(mu, sd);

    const auto n = static_cast<Index>(windows.size());
    Matrix data(n, model.input_width());
    for (Index i = 0; i < n; ++i) {
        data.row(i) = model.flatten(windows[static_cast<std::size_t>(i)]);
    }

    numerics::Adam adam(model.params(), {config.learning_rate, 0.9, 0.999, 1e-8, config.clip_norm});
    auto order = rng.child("order");
    auto eps = rng.child("noise");
    VaeTrainResult result{std::move(model), {}};
    auto& m = result.model;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto perm = order.permutation(static_cast<std::size_t>(n));
        double rec = 0.0;
        double kl = 0.0;
        double sq = 0.0;
        for (std::size_t first = 0; first < perm.size(); first += static_cast<std::size_t>(config.batch_size)) {
            const auto b = static_cast<Index>(
                std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), perm.size() - first));
            Matrix inputs(b, m.input_width());
            Matrix noise(b, kLatentDim);
            for (Index i = 0; i < b; ++i) {
                inputs.row(i) = data.row(static_cast<Index>(perm[first + static_cast<std::size_t>(i)]));
                for (Index k = 0; k < kLatentDim; ++k) {
                    noise(i, k) = eps.normal();
                }
            }
            m.params().zero_grad();
            Tape tape;
            const auto terms = m.batch_terms(tape, inputs, noise);
            tape.backward(terms.loss);
            adam.step(m.params());
            rec += terms.reconstruction.scalar() * static_cast<double>(b);
            kl += terms.kl.scalar() * static_cast<double>(b);
            sq += (terms.output.value() - inputs).squaredNorm();
        }
        const double count = static_cast<double>(n);
        result.history.reconstruction.push_back(rec / count);
        result.history.kl.push_back(kl / count);
        result.history.elbo.push_back(-(rec + config.beta * kl) / count);
        result.history.mse.push_back(sq / (count * static_cast<double>(m.input_width())));
    }
    return result;
}

LatentPoint encode(const VaeModel& model, const Matrix& window) {
    const Matrix mu = model.encode_rows(model.flatten(window));
    return {mu(0, 0), mu(0, 1), mu(0, 2)};
}

Matrix decode_compact(const VaeModel& model, const LatentPoint& z) {
    Matrix row(1, kLatentDim);
    row << z[0], z[1], z[2];
    return model.unflatten(model.decode_rows(row));
}

Matrix decode(const VaeModel& model, const LatentPoint& z) { return upsample(decode_compact(model, z), model.horizon()); }

Matrix reconstruct_true_future(const VaeModel& model, const Matrix& window) { return decode(model, encode(model, window)); }

int nearest_center(const Matrix& centers, const Eigen::Ref<const Eigen::RowVectorXd>& point) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index j = 0; j < centers.rows(); ++j) {
        const double d = (centers.row(j) - point).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(j);
        }
    }
    return best;
}

double within_cluster_sse(const Matrix& points, const Matrix& centers, const std::vector<int>& assignments) {
    double sse = 0.0;
    for (Index i = 0; i < points.rows(); ++i) {
        sse += (points.row(i) - centers.row(assignments[static_cast<std::size_t>(i)])).squaredNorm();
    }
    return sse;
}

namespace {

void update_centers(const Matrix& points, const std::vector<int>& assignments, Matrix& centers) {
    const Index n = points.rows();
    const Index k = centers.rows();
    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<Index> counts(static_cast<std::size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
        const int a = assignments[static_cast<std::size_t>(i)];
        sums.row(a) += points.row(i);
        ++counts[static_cast<std::size_t>(a)];
    }
    for (Index j = 0; j < k; ++j) {
        if (counts[static_cast<std::size_t>(j)] > 0) {
            centers.row(j) = sums.row(j) / static_cast<double>(counts[static_cast<std::size_t>(j)]);
            continue;
        }
        // An emptied cluster takes the point farthest from its own center.
        Index far = 0;
        double far_d = -1.0;
        for (Index i = 0; i < n; ++i) {
            const double d = (points.row(i) - centers.row(assignments[static_cast<std::size_t>(i)])).squaredNorm();
            if (d > far_d) {
                far_d = d;
                far = i;
            }
        }
        centers.row(j) = points.row(far);
    }
}

// Applies the single-point reassignment with the largest exact SSE decrease,
// if any decreases it.
bool single_point_move(const Matrix& points, const Matrix& centers, std::vector<int>& assignments) {
    const Index k = centers.rows();
    std::vector<double> size(static_cast<std::size_t>(k), 0.0);
    for (int a : assignments) {
        size[static_cast<std::size_t>(a)] += 1.0;
    }
    double best = -1e-12;
    Index best_i = -1;
    int best_to = -1;
    for (Index i = 0; i < points.rows(); ++i) {
        const int from = assignments[static_cast<std::size_t>(i)];
        const double nf = size[static_cast<std::size_t>(from)];
        if (nf < 2.0) {
            continue;
        }
        const double removal = nf / (nf - 1.0) * (points.row(i) - centers.row(from)).squaredNorm();
        for (Index j = 0; j < k; ++j) {
            if (j == from) {
                continue;
            }
            const double nt = size[static_cast<std::size_t>(j)];
            const double delta = nt / (nt + 1.0) * (points.row(i) - centers.row(j)).squaredNorm() - removal;
            if (delta < best) {
                best = delta;
                best_i = i;
                best_to = static_cast<int>(j);
            }
        }
    }
    if (best_i < 0) {
        return false;
    }
    assignments[static_cast<std::size_t>(best_i)] = best_to;
    return true;
}

// Farthest-point seeding, or D^2-weighted draws when `weighted` is set.
KMeansResult lloyd(const Matrix& points, int k, numerics::RandomStream& rng, bool weighted, int max_iterations) {
    const Index n = points.rows();
    Matrix centers(k, points.cols());
    centers.row(0) = points.row(static_cast<Index>(rng.index(static_cast<std::size_t>(n))));
    Eigen::VectorXd nearest = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int j = 1; j < k; ++j) {
        Index far = 0;
        if (weighted && nearest.sum() > 0.0) {
            far = static_cast<Index>(rng.categorical(std::span<const double>(nearest.data(), nearest.size())));
        } else {
            nearest.maxCoeff(&far);
        }
        centers.row(j) = points.row(far);
        nearest = nearest.cwiseMin((points.rowwise() - centers.row(j)).rowwise().squaredNorm());
    }

    KMeansResult r;
    r.assignments.assign(static_cast<std::size_t>(n), -1);
    for (r.iterations = 0; r.iterations < max_iterations; ++r.iterations) {
        bool changed = false;
        for (Index i = 0; i < n; ++i) {
            const int a = nearest_center(centers, points.row(i));
            if (a != r.assignments[static_cast<std::size_t>(i)]) {
                r.assignments[static_cast<std::size_t>(i)] = a;
                changed = true;
            }
        }
        if (!changed && !single_point_move(points, centers, r.assignments)) {
            break;
        }
        update_centers(points, r.assignments, centers);
    }
    r.centers = std::move(centers);
    r.sse = within_cluster_sse(points, r.centers, r.assignments);
    return r;
}

} // namespace

KMeansResult fit_kmeans(const Matrix& points, int k, std::uint64_t seed, int restarts, int max_iterations) {
    if (k < 1 || points.rows() < k) {
        throw std::invalid_argument("fit_kmeans: " + std::to_string(points.rows()) + " points for k = " +
                                    std::to_string(k));
    }
    if (restarts < 1 || max_iterations < 1) {
        throw std::invalid_argument("fit_kmeans: restarts and max_iterations must be positive");
    }
    numerics::RandomStream rng(seed);
    KMeansResult best;
    best.sse = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        auto sub = rng.child("restart" + std::to_string(r));
        auto candidate = lloyd(points, k, sub, r > 0, max_iterations);
        if (candidate.sse < best.sse) {
            best = std::move(candidate);
        }
    }
    return best;
}

std::vector<WindowRef> out_of_sample_windows(const telemetry::FleetDataset& dataset) {
    std::vector<WindowRef> refs;
    const Index horizon = dataset.window.horizon;
    for (const auto& id : dataset.out_of_sample_ids) {
        const auto& v = dataset.vehicle(id);
        for (Index t0 : dataset.starts(id)) {
            WindowRef r;
            r.vehicle_id = id;
            r.t0 = t0;
            r.metadata = v.metadata;
            r.fault_in_window = std::any_of(v.faults.begin() + t0, v.faults.begin() + t0 + horizon,
                                            [](std::uint8_t f) { return f != 0; });
            refs.push_back(std::move(r));
        }
    }
    return refs;
}

Matrix future_window(const telemetry::FleetDataset& dataset, const WindowRef& ref) {
    const auto& v = dataset.vehicle(ref.vehicle_id);
    dataset.window.at(ref.t0).validate(v.length());
    return v.sensors.middleRows(ref.t0, dataset.window.horizon);
}

VaeTrainResult train_vae(const telemetry::FleetDataset& dataset, const std::vector<WindowRef>& refs,
                         const VaeConfig& config, std::uint64_t seed) {
    std::vector<Matrix> windows;
    windows.reserve(refs.size());
    for (const auto& r : refs) {
        if (dataset.is_in_sample(r.vehicle_id)) {
            throw telemetry::DataError("vae: window of in-sample vehicle " + r.vehicle_id +
                                       " offered for out-of-sample training");
        }
        windows.push_back(future_window(dataset, r));
    }
    return train_vae(windows, config, seed);
}

std::vector<std::size_t> LatentStateModel::members(int state) const {
    if (state < 0 || state >= state_count()) {
        throw std::out_of_range("unknown state " + std::to_string(state));
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < clusters.assignments.size(); ++i) {
        if (clusters.assignments[i] == state) {
            out.push_back(i);
        }
    }
    return out;
}

LatentStateModel build_state_model(const telemetry::FleetDataset& dataset, VaeModel model,
                                   std::vector<WindowRef> refs, int states, std::uint64_t seed) {
    Matrix points(static_cast<Index>(refs.size()), kLatentDim);
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const auto z = encode(model, future_window(dataset, refs[i]));
        for (Index k = 0; k < kLatentDim; ++k) {
            points(static_cast<Index>(i), k) = z[static_cast<std::size_t>(k)];
        }
    }
    auto clusters = fit_kmeans(points, states, seed);
    return {std::move(model), std::move(points), std::move(clusters), std::move(refs)};
}

std::vector<LatentPoint> sample_latents(const LatentStateModel& sm, int state, std::size_t n, std::uint64_t seed) {
    const auto pool = sm.members(state);
    if (pool.empty()) {
        throw std::invalid_argument("sample_from_state: state " + std::to_string(state) + " has no members");
    }
    numerics::RandomStream rng(seed);
    std::vector<LatentPoint> out(n);
    for (auto& z : out) {
        const auto i = static_cast<Index>(pool[rng.index(pool.size())]);
        z = {sm.points(i, 0), sm.points(i, 1), sm.points(i, 2)};
    }
    return out;
}

std::vector<Matrix> sample_from_state(const LatentStateModel& sm, int state, std::size_t n, std::uint64_t seed) {
    std::vector<Matrix> out;
    for (const auto& z : sample_latents(sm, state, n, seed)) {
        out.push_back(decode(sm.model, z));
    }
    return out;
}

StateSummary summarize_windows(const std::vector<WindowRef>& windows, const std::vector<std::size_t>& which) {
    StateSummary s;
    s.count = which.size();
    if (which.empty()) {
        return s;
    }
    std::map<int, std::size_t> locations;
    std::map<int, std::size_t> subfamilies;
    std::size_t faults = 0;
    for (auto i : which) {
        const auto& w = windows.at(i);
        ++locations[w.metadata.location];
        ++subfamilies[w.metadata.subfamily];
        s.mean_odometer_miles += w.metadata.odometer_miles;
        s.mean_engine_hours += w.metadata.engine_hours;
        faults += w.fault_in_window ? 1 : 0;
    }
    auto mode = [](const std::map<int, std::size_t>& counts) {
        int best = counts.begin()->first;
        std::size_t most = 0;
        for (const auto& [value, c] : counts) {
            if (c > most) {
                most = c;
                best = value;
            }
        }
        return best;
    };
    const double n = static_cast<double>(which.size());
    s.modal_location = mode(locations);
    s.modal_subfamily = mode(subfamilies);
    s.mean_odometer_miles /= n;
    s.mean_engine_hours /= n;
    s.fault_fraction = static_cast<double>(faults) / n;
    return s;
}

std::vector<StateSummary> metadata_association(const LatentStateModel& sm) {
    std::vector<StateSummary> out;
    for (int k = 0; k < sm.state_count(); ++k) {
        auto s = summarize_windows(sm.windows, sm.members(k));
        s.state = k;
        out.push_back(s);
    }
    return out;
}

StateSummary global_summary(const LatentStateModel& sm) {
    std::vector<std::size_t> all(sm.windows.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    return summarize_windows(sm.windows, all);
}

void write_latent_csv(const LatentStateModel& sm, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << "vehicle_id,t0,z1,z2,z3,state,fault_in_window,location,odometer_miles,engine_hours,subfamily\n";
    for (std::size_t i = 0; i < sm.windows.size(); ++i) {
        const auto& w = sm.windows[i];
        const auto r = static_cast<Index>(i);
        out << w.vehicle_id << ',' << w.t0 << ',' << fmt(sm.points(r, 0)) << ',' << fmt(sm.points(r, 1)) << ','
            << fmt(sm.points(r, 2)) << ',' << sm.clusters.assignments[i] << ',' << (w.fault_in_window ? 1 : 0)
            << ',' << w.metadata.location << ',' << fmt(w.metadata.odometer_miles) << ','
            << fmt(w.metadata.engine_hours) << ',' << w.metadata.subfamily << '\n';
    }
    if (!out) {
        throw std::runtime_error("write failed: " + path.string());
    }
}

nlohmann::json to_json(const LatentStateModel& sm) {
    nlohmann::json j;
    j["format"] = "faultsim.latent_states";
    j["version"] = 1;
    j["vae"] = sm.model.to_json();
    j["points"] = numerics::matrix_to_json(sm.points);
    j["centers"] = numerics::matrix_to_json(sm.clusters.centers);
    j["assignments"] = sm.clusters.assignments;
    j["sse"] = sm.clusters.sse;
    j["iterations"] = sm.clusters.iterations;
    auto& ws = j["windows"] = nlohmann::json::array();
    for (const auto& w : sm.windows) {
        ws.push_back(ref_to_json(w));
    }
    return j;
}

LatentStateModel state_model_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "faultsim.latent_states") {
        throw std::runtime_error("not a latent state checkpoint");
    }
    KMeansResult c;
    c.centers = numerics::matrix_from_json(j.at("centers"));
    c.assignments = j.at("assignments").get<std::vector<int>>();
    c.sse = j.at("sse").get<double>();
    c.iterations = j.at("iterations").get<int>();
    std::vector<WindowRef> windows;
    for (const auto& w : j.at("windows")) {
        windows.push_back(ref_from_json(w));
    }
    return {VaeModel::from_json(j.at("vae")), numerics::matrix_from_json(j.at("points")), std::move(c),
            std::move(windows)};
}

} // namespace faultsim::vae
