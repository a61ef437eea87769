#include "faultsim/deepar/deepar.hpp"

#include "faultsim/numerics/optimizer.hpp"
#include "faultsim/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace faultsim::deepar {

using numerics::Tape;
using numerics::Var;
using telemetry::kSensorCount;

namespace {

Index gate_count(CellKind k) { return k == CellKind::gru ? 3 : 4; }
Index head_width(Likelihood l) { return l == Likelihood::bernoulli ? 1 : 2; }

Matrix logistic(const Matrix& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

Matrix uniform_init(numerics::RandomStream& rng, Index r, Index c, double bound) {
    Matrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = rng.uniform(-bound, bound);
    }
    return m;
}

std::string cell_name(CellKind k) { return k == CellKind::gru ? "gru" : "lstm"; }
std::string likelihood_name(Likelihood l) { return l == Likelihood::bernoulli ? "bernoulli" : "gaussian"; }

} // namespace

nlohmann::json to_json(const DeepArConfig& c) {
    return {{"cell", cell_name(c.cell)},
            {"likelihood", likelihood_name(c.likelihood)},
            {"use_covariates", c.use_covariates},
            {"hidden", c.hidden},
            {"epochs", c.epochs},
            {"train_window", c.train_window},
            {"windows_per_epoch", c.windows_per_epoch},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"clip_norm", c.clip_norm},
            {"context", c.context},
            {"n_samples", c.n_samples},
            {"quantiles", c.quantiles}};
}

DeepArConfig deepar_config_from_json(const nlohmann::json& j, const DeepArConfig& d) {
    DeepArConfig c = d;
    if (j.contains("cell")) {
        const auto s = j.at("cell").get<std::string>();
        if (s != "gru" && s != "lstm") {
            throw std::invalid_argument("deepar.cell must be gru or lstm");
        }
        c.cell = s == "gru" ? CellKind::gru : CellKind::lstm;
    }
    if (j.contains("likelihood")) {
        const auto s = j.at("likelihood").get<std::string>();
        if (s != "bernoulli" && s != "gaussian") {
            throw std::invalid_argument("deepar.likelihood must be bernoulli or gaussian");
        }
        c.likelihood = s == "bernoulli" ? Likelihood::bernoulli : Likelihood::gaussian;
    }
    c.use_covariates = j.value("use_covariates", c.use_covariates);
    c.hidden = j.value("hidden", c.hidden);
    c.epochs = j.value("epochs", c.epochs);
    c.train_window = j.value("train_window", c.train_window);
    c.windows_per_epoch = j.value("windows_per_epoch", c.windows_per_epoch);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.context = j.value("context", c.context);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.quantiles = j.value("quantiles", c.quantiles);
    return c;
}

DeepArModel::DeepArModel(DeepArConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
    if (config_.hidden < 1 || config_.epochs < 0 || config_.train_window < 2 || config_.batch_size < 1 ||
        config_.context < 1 || config_.n_samples < 1) {
        throw std::invalid_argument("deepar: invalid hyperparameters");
    }
    for (double q : config_.quantiles) {
        if (!(q > 0.0 && q < 1.0)) {
            throw std::invalid_argument("deepar: quantile levels must lie in (0, 1)");
        }
    }
    const Index h = config_.hidden;
    const Index g = gate_count(config_.cell) * h;
    numerics::RandomStream rng(init_seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(h));
    w_x_ = params_.add("w_x", uniform_init(rng, input_width(), g, bound));
    w_h_ = params_.add("w_h", uniform_init(rng, h, g, bound));
    Matrix bias = Matrix::Zero(1, g);
    if (config_.cell == CellKind::lstm) {
        bias.middleCols(h, h).setOnes();  // forget gate
    }
    b_ = params_.add("b", bias);
    w_o_ = params_.add("w_o", uniform_init(rng, h, head_width(config_.likelihood), bound));
    b_o_ = params_.add("b_o", Matrix::Zero(1, head_width(config_.likelihood)));
    mean_ = Matrix::Zero(1, kSensorCount);
    std_ = Matrix::Ones(1, kSensorCount);
}

Index DeepArModel::input_width() const { return config_.use_covariates ? 1 + kSensorCount : 1; }

void DeepArModel::set_normalization(Matrix mean, Matrix std) {
    if (mean.rows() != 1 || mean.cols() != kSensorCount || std.rows() != 1 || std.cols() != kSensorCount) {
        throw numerics::ShapeError("deepar: normalization statistics must be 1 x 38");
    }
    mean_ = std::move(mean);
    std_ = std::move(std);
}

Matrix DeepArModel::standardize(const Matrix& sensors) const {
    if (sensors.cols() != kSensorCount) {
        throw numerics::ShapeError("deepar: expected 38 covariate columns, got " + std::to_string(sensors.cols()));
    }
    Matrix out = sensors;
    out.rowwise() -= mean_.row(0);
    out.array().rowwise() /= std_.row(0).array();
    return out;
}

Var DeepArModel::batch_loss(Tape& tape, const Matrix& inputs, const Matrix& targets, Index batch) const {
    auto& ps = const_cast<numerics::ParameterSet&>(params_);
    const Index h = config_.hidden;
    const Index steps = inputs.rows() / batch;
    if (inputs.rows() != steps * batch || targets.rows() != inputs.rows() || inputs.cols() != input_width()) {
        throw numerics::ShapeError("deepar: batch inputs " + numerics::shape_string(inputs) + " and targets " +
                                   numerics::shape_string(targets) + " do not match");
    }
    const Var wx = tape.param(ps[w_x_]);
    const Var wh = tape.param(ps[w_h_]);
    const Var xw = add_row(matmul(tape.constant(inputs), wx), tape.param(ps[b_]));
    Var hs = tape.constant(Matrix::Zero(batch, h));
    Var cs = hs;
    std::vector<Var> outputs;
    outputs.reserve(static_cast<std::size_t>(steps));
    for (Index t = 0; t < steps; ++t) {
        const Var x = slice_rows(xw, t * batch, batch);
        const Var hw = matmul(hs, wh);
        if (config_.cell == CellKind::gru) {
            const Var z = sigmoid(add(slice_cols(x, 0, h), slice_cols(hw, 0, h)));
            const Var r = sigmoid(add(slice_cols(x, h, h), slice_cols(hw, h, h)));
            const Var n = tanh(add(slice_cols(x, 2 * h, h), mul(r, slice_cols(hw, 2 * h, h))));
            hs = add(n, mul(z, sub(hs, n)));
        } else {
            const Var pre = add(x, hw);
            const Var i = sigmoid(slice_cols(pre, 0, h));
            const Var f = sigmoid(slice_cols(pre, h, h));
            const Var g = tanh(slice_cols(pre, 2 * h, h));
            const Var o = sigmoid(slice_cols(pre, 3 * h, h));
            cs = add(mul(f, cs), mul(i, g));
            hs = mul(o, tanh(cs));
        }
        outputs.push_back(hs);
    }
    const Var out = add_row(matmul(concat_rows(outputs), tape.param(ps[w_o_])), tape.param(ps[b_o_]));
    if (config_.likelihood == Likelihood::bernoulli) {
        return bernoulli_nll_logits(out, targets);
    }
    const Var mu = slice_cols(out, 0, 1);
    const Var log_sd = slice_cols(out, 1, 1);
    const Var err = square(sub(mu, tape.constant(targets)));
    const Var quad = scale(mul(err, exp(scale(log_sd, -2.0))), 0.5);
    return add_scalar(mean(add(log_sd, quad)), 0.5 * std::log(2.0 * std::numbers::pi));
}

DeepArModel::State DeepArModel::initial_state(Index rows) const {
    return {Matrix::Zero(rows, config_.hidden), Matrix::Zero(rows, config_.hidden)};
}

Matrix DeepArModel::input_projection(const Matrix& inputs) const {
    Matrix xw = inputs * params_[w_x_].value;
    xw.rowwise() += params_[b_].value.row(0);
    return xw;
}

void DeepArModel::step(State& s, const Matrix& xw) const {
    const Index h = config_.hidden;
    const Matrix hw = s.h * params_[w_h_].value;
    if (config_.cell == CellKind::gru) {
        const Matrix z = logistic(xw.leftCols(h) + hw.leftCols(h));
        const Matrix r = logistic(xw.middleCols(h, h) + hw.middleCols(h, h));
        const Matrix n = (xw.middleCols(2 * h, h).array() + r.array() * hw.middleCols(2 * h, h).array()).tanh();
        s.h = (n.array() + z.array() * (s.h - n).array()).matrix();
    } else {
        const Matrix pre = xw + hw;
        const Matrix i = logistic(pre.leftCols(h));
        const Matrix f = logistic(pre.middleCols(h, h));
        const Matrix g = pre.middleCols(2 * h, h).array().tanh();
        const Matrix o = logistic(pre.middleCols(3 * h, h));
        s.c = (f.array() * s.c.array() + i.array() * g.array()).matrix();
        s.h = (o.array() * s.c.array().tanh()).matrix();
    }
}

Matrix DeepArModel::head(const Matrix& h) const {
    Matrix out = h * params_[w_o_].value;
    out.rowwise() += params_[b_o_].value.row(0);
    return out;
}

Matrix DeepArModel::batch_outputs(const Matrix& inputs, Index batch) const {
    const Index steps = inputs.rows() / batch;
    const Matrix xw = input_projection(inputs);
    State s = initial_state(batch);
    Matrix out(inputs.rows(), head_width(config_.likelihood));
    for (Index t = 0; t < steps; ++t) {
        step(s, xw.middleRows(t * batch, batch));
        out.middleRows(t * batch, batch) = head(s.h);
    }
    return out;
}

nlohmann::json DeepArModel::to_json() const {
    nlohmann::json j;
    j["format"] = "faultsim.deepar";
    j["version"] = 1;
    j["config"] = deepar::to_json(config_);
    j["sensor_mean"] = numerics::matrix_to_json(mean_);
    j["sensor_std"] = numerics::matrix_to_json(std_);
    j["params"] = numerics::params_to_json(params_);
    return j;
}

DeepArModel DeepArModel::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "faultsim.deepar") {
        throw std::runtime_error("not a deepar checkpoint");
    }
    DeepArModel m(deepar_config_from_json(j.at("config")), 0);
    m.set_normalization(numerics::matrix_from_json(j.at("sensor_mean")), numerics::matrix_from_json(j.at("sensor_std")));
    numerics::params_from_json(j.at("params"), m.params_);
    return m;
}

void DeepArModel::save(const std::filesystem::path& path) const { numerics::write_json(to_json(), path); }

DeepArModel DeepArModel::load(const std::filesystem::path& path) { return from_json(numerics::read_json(path)); }

Matrix build_inputs(const DeepArModel& model, const telemetry::SeriesSlice& window) {
    const Index n = window.length();
    Matrix in(n, model.input_width());
    for (Index t = 0; t < n; ++t) {
        in(t, 0) = t == 0 ? 0.0 : static_cast<double>(window.faults[static_cast<std::size_t>(t - 1)]);
    }
    if (model.config().use_covariates) {
        in.rightCols(kSensorCount) = model.standardize(window.sensors);
    }
    return in;
}

TrainResult train_deepar(const telemetry::SeriesSlice& window, const DeepArConfig& config, std::uint64_t seed) {
    const Index q = window.length();
    if (q < config.train_window + 1 || q < config.context + 1) {
        throw telemetry::DataError("deepar: training window of " + std::to_string(q) +
                                   " steps is shorter than the sub-window length + 1");
    }
    if (window.sensors.rows() != q || window.sensors.cols() != kSensorCount) {
        throw numerics::ShapeError("deepar: training window sensors " + numerics::shape_string(window.sensors));
    }
    numerics::RandomStream rng(seed);
    DeepArModel model(config, rng.child("init").seed());

    Matrix mu = window.sensors.colwise().mean();
    Matrix sd = ((window.sensors.rowwise() - mu.row(0)).array().square().colwise().sum() / static_cast<double>(q))
                    .sqrt()
                    .matrix();
    for (Index c = 0; c < kSensorCount; ++c) {
        if (!(sd(0, c) > 1e-8)) {
            sd(0, c) = 1.0;
        }
    }
    model.set_normalization(mu, sd);

    double ones = 0.0;
    for (auto z : window.faults) {
        ones += z;
    }
    const double rate = std::clamp(ones / static_cast<double>(q), 1e-3, 0.5);
    if (config.likelihood == Likelihood::bernoulli) {
        model.params().at("b_o").value(0, 0) = std::log(rate / (1.0 - rate));
    } else {
        model.params().at("b_o").value(0, 0) = rate;
        model.params().at("b_o").value(0, 1) = std::log(std::sqrt(rate * (1.0 - rate)) + 1e-3);
    }

    const Matrix inputs = build_inputs(model, window);
    const Index len = config.train_window;
    const Index batch = config.batch_size;
    // Two interleaved tilings of the series, every step covered twice per
    // epoch; only the visiting order is shuffled, so epoch losses are comparable.
    std::vector<Index> tiles;
    for (Index offset : {Index{0}, len / 2}) {
        for (Index s = offset; s + len <= q; s += len) {
            tiles.push_back(s);
        }
    }
    if (config.windows_per_epoch > 0 && static_cast<std::size_t>(config.windows_per_epoch) < tiles.size()) {
        tiles.resize(static_cast<std::size_t>(config.windows_per_epoch));
    }
    numerics::Adam adam(model.params(), {config.learning_rate, 0.9, 0.999, 1e-8, config.clip_norm});
    auto order = rng.child("windows");

    TrainResult result{std::move(model), {}};
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<Index> starts;
        for (std::size_t i : order.permutation(tiles.size())) {
            starts.push_back(tiles[i]);
        }
        double total = 0.0;
        for (std::size_t first = 0; first < starts.size(); first += static_cast<std::size_t>(batch)) {
            const Index b = std::min<Index>(batch, static_cast<Index>(starts.size() - first));
            Matrix bx(len * b, inputs.cols());
            Matrix by(len * b, 1);
            for (Index t = 0; t < len; ++t) {
                for (Index k = 0; k < b; ++k) {
                    const Index src = starts[first + static_cast<std::size_t>(k)] + t;
                    bx.row(t * b + k) = inputs.row(src);
                    by(t * b + k, 0) = window.faults[static_cast<std::size_t>(src)];
                }
            }
            result.model.params().zero_grad();
            Tape tape;
            const Var loss = result.model.batch_loss(tape, bx, by, b);
            tape.backward(loss);
            adam.step(result.model.params());
            total += loss.scalar() * static_cast<double>(b);
        }
        result.history.epoch_loss.push_back(total / static_cast<double>(starts.size()));
    }
    return result;
}

double nll(const DeepArModel& model, const telemetry::SeriesSlice& window) {
    if (window.length() == 0) {
        throw telemetry::DataError("deepar: empty window");
    }
    if (model.config().use_covariates && window.sensors.rows() != window.length()) {
        throw numerics::ShapeError("deepar: window sensors " + numerics::shape_string(window.sensors) +
                                   " misaligned with " + std::to_string(window.length()) + " fault steps");
    }
    const Matrix out = model.batch_outputs(build_inputs(model, window), 1);
    double total = 0.0;
    for (Index t = 0; t < window.length(); ++t) {
        const double z = window.faults[static_cast<std::size_t>(t)];
        if (model.config().likelihood == Likelihood::bernoulli) {
            const double x = out(t, 0);
            total += std::max(x, 0.0) - x * z + std::log1p(std::exp(-std::abs(x)));
        } else {
            const double mu = out(t, 0);
            const double ls = out(t, 1);
            total += 0.5 * std::log(2.0 * std::numbers::pi) + ls + 0.5 * (z - mu) * (z - mu) * std::exp(-2.0 * ls);
        }
    }
    return total / static_cast<double>(window.length());
}

double empirical_quantile(std::vector<double> values, double level) {
    if (values.empty()) {
        throw std::invalid_argument("empirical_quantile: no values");
    }
    std::sort(values.begin(), values.end());
    const double n = static_cast<double>(values.size());
    // Smallest index i with (i + 1) / n >= level.
    auto i = static_cast<std::size_t>(std::ceil(level * n - 1e-12));
    i = i == 0 ? 0 : i - 1;
    return values[std::min(i, values.size() - 1)];
}

ForecastResult summarize_paths(Matrix paths, const std::vector<double>& levels) {
    ForecastResult r;
    const Index n = paths.rows();
    const Index horizon = paths.cols();
    r.mean.resize(static_cast<std::size_t>(horizon));
    r.quantile_levels = levels;
    r.quantiles.assign(levels.size(), std::vector<double>(static_cast<std::size_t>(horizon)));
    std::vector<double> column(static_cast<std::size_t>(n));
    for (Index t = 0; t < horizon; ++t) {
        r.mean[static_cast<std::size_t>(t)] = n > 0 ? paths.col(t).mean() : 0.0;
        if (n == 0) {
            continue;
        }
        for (Index i = 0; i < n; ++i) {
            column[static_cast<std::size_t>(i)] = paths(i, t);
        }
        for (std::size_t q = 0; q < levels.size(); ++q) {
            r.quantiles[q][static_cast<std::size_t>(t)] = empirical_quantile(column, levels[q]);
        }
    }
    r.sample_paths = std::move(paths);
    return r;
}

const std::vector<double>& ForecastResult::quantile(double level) const {
    for (std::size_t i = 0; i < quantile_levels.size(); ++i) {
        if (std::abs(quantile_levels[i] - level) < 1e-12) {
            return quantiles[i];
        }
    }
    throw std::invalid_argument("forecast: quantile level " + std::to_string(level) + " not computed");
}

ForecastResult forecast(const DeepArModel& model, const telemetry::SeriesSlice& history,
                        const Matrix& future_covariates, Index horizon, int n_samples, std::uint64_t seed) {
    const auto& cfg = model.config();
    if (n_samples < 1) {
        throw std::invalid_argument("forecast: n_samples must be >= 1");
    }
    if (horizon < 0) {
        throw std::invalid_argument("forecast: negative horizon");
    }
    if (cfg.use_covariates && (future_covariates.rows() < horizon || future_covariates.cols() != kSensorCount)) {
        throw telemetry::DataError("forecast: future covariates " + numerics::shape_string(future_covariates) +
                                   " do not cover a horizon of " + std::to_string(horizon) + " steps");
    }
    if (history.length() < 1) {
        throw telemetry::DataError("forecast: empty history");
    }
    const Index ctx = std::min(cfg.context, history.length());
    const Index first = history.length() - ctx;

    // Warm-up on the conditioning range; z_{t-1} is taken from the full history.
    Matrix warm(ctx, model.input_width());
    for (Index t = 0; t < ctx; ++t) {
        const Index src = first + t;
        warm(t, 0) = src == 0 ? 0.0 : static_cast<double>(history.faults[static_cast<std::size_t>(src - 1)]);
    }
    if (cfg.use_covariates) {
        warm.rightCols(kSensorCount) = model.standardize(history.sensors.middleRows(first, ctx));
    }
    const Matrix warm_xw = model.input_projection(warm);
    auto single = model.initial_state(1);
    for (Index t = 0; t < ctx; ++t) {
        model.step(single, warm_xw.row(t));
    }

    const Index n = n_samples;
    DeepArModel::State s{single.h.replicate(n, 1), single.c.replicate(n, 1)};
    const Matrix& wx = model.params().at("w_x").value;
    Matrix cov_xw;  // horizon x gates, covariate part plus bias
    if (cfg.use_covariates) {
        Matrix in = Matrix::Zero(horizon, model.input_width());
        in.rightCols(kSensorCount) = model.standardize(future_covariates.topRows(horizon));
        cov_xw = model.input_projection(in);
    } else {
        cov_xw = model.input_projection(Matrix::Zero(horizon, 1));
    }

    numerics::RandomStream rng(seed);
    Matrix z_prev = Matrix::Constant(n, 1, static_cast<double>(history.faults.back()));
    Matrix paths(n, horizon);
    std::vector<double> mean_p(static_cast<std::size_t>(horizon), 0.0);
    for (Index t = 0; t < horizon; ++t) {
        Matrix xw = z_prev * wx.row(0);
        xw.rowwise() += cov_xw.row(t);
        model.step(s, xw);
        const Matrix out = model.head(s.h);
        double psum = 0.0;
        for (Index i = 0; i < n; ++i) {
            double z = 0.0;
            if (cfg.likelihood == Likelihood::bernoulli) {
                const double p = 1.0 / (1.0 + std::exp(-out(i, 0)));
                psum += p;
                z = rng.uniform() < p ? 1.0 : 0.0;
            } else {
                const double mu = out(i, 0);
                psum += std::clamp(mu, 0.0, 1.0);
                z = mu + std::exp(out(i, 1)) * rng.normal();
            }
            z_prev(i, 0) = z;
            paths(i, t) = std::clamp(z, 0.0, 1.0);
        }
        mean_p[static_cast<std::size_t>(t)] = psum / static_cast<double>(n);
    }
    auto result = summarize_paths(std::move(paths), cfg.quantiles);
    result.mean_probability = std::move(mean_p);
    return result;
}

std::string to_string(Provenance p) {
    switch (p) {
    case Provenance::stam_generated:
        return "stam_generated";
    case Provenance::vae_generated:
        return "vae_generated";
    case Provenance::lstm_direct:
        return "lstm_direct";
    case Provenance::stam_direct:
        return "stam_direct";
    }
    return "unknown";
}

HiddenRepresentation hidden_representation(const ForecastResult& result, Provenance provenance) {
    HiddenRepresentation h;
    h.provenance = provenance;
    const auto& median = result.quantile(0.5);
    h.features.reserve(result.mean.size() * 2);
    h.features.insert(h.features.end(), result.mean.begin(), result.mean.end());
    h.features.insert(h.features.end(), median.begin(), median.end());
    return h;
}

} // namespace faultsim::deepar
