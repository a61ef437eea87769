#include "faultsim/stam/stam.hpp"

#include "faultsim/numerics/optimizer.hpp"
#include "faultsim/numerics/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace faultsim::stam {

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

} // namespace

nlohmann::json to_json(const StamConfig& c) {
    return {{"lookback", c.lookback},     {"chunk", c.chunk},
            {"embed", c.embed},           {"stride", c.stride},
            {"epochs", c.epochs},         {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate}, {"clip_norm", c.clip_norm},
            {"validation_fraction", c.validation_fraction}};
}

StamConfig stam_config_from_json(const nlohmann::json& j, const StamConfig& d) {
    StamConfig c = d;
    c.lookback = j.value("lookback", c.lookback);
    c.chunk = j.value("chunk", c.chunk);
    c.embed = j.value("embed", c.embed);
    c.stride = j.value("stride", c.stride);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    return c;
}

StamModel::StamModel(StamConfig config, Index channels, std::uint64_t init_seed)
    : config_(config), channels_(channels) {
    if (channels < 1 || config_.lookback < 1 || config_.chunk < 1 || config_.embed < 1 || config_.stride < 1 ||
        config_.batch_size < 1 || config_.epochs < 0) {
        throw std::invalid_argument("stam: invalid hyperparameters");
    }
    const Index l = config_.lookback;
    const Index e = config_.embed;
    const Index out = config_.chunk * channels;
    numerics::RandomStream rng(init_seed);
    params_.add("w_s", uniform_init(rng, l, e, 1.0 / std::sqrt(static_cast<double>(l))));
    params_.add("b_s", Matrix::Zero(1, e));
    params_.add("v_s", uniform_init(rng, e, 1, 1.0 / std::sqrt(static_cast<double>(e))));
    params_.add("beta_s", Matrix::Zero(1, channels));
    params_.add("w_t", uniform_init(rng, channels, e, 1.0 / std::sqrt(static_cast<double>(channels))));
    params_.add("b_t", Matrix::Zero(1, e));
    params_.add("v_t", uniform_init(rng, e, 1, 1.0 / std::sqrt(static_cast<double>(e))));
    params_.add("beta_t", Matrix::Zero(1, l));
    params_.add("w_o", uniform_init(rng, 2 * e, out, 0.01));
    params_.add("b_o", Matrix::Zero(1, out));
    params_.add("g_last", Matrix::Ones(1, out));
    params_.add("g_level", Matrix::Zero(1, out));
    mean_ = Matrix::Zero(1, channels);
    std_ = Matrix::Ones(1, channels);
    spread_ = Matrix::Zero(channels, out);
    for (Index k = 0; k < config_.chunk; ++k) {
        for (Index i = 0; i < channels; ++i) {
            spread_(i, k * channels + i) = 1.0;
        }
    }
}

void StamModel::set_normalization(Matrix mean, Matrix std) {
    if (mean.rows() != 1 || mean.cols() != channels_ || std.rows() != 1 || std.cols() != channels_) {
        throw numerics::ShapeError("stam: normalization statistics must be 1 x " + std::to_string(channels_));
    }
    mean_ = std::move(mean);
    std_ = std::move(std);
}

Matrix StamModel::standardize(const Matrix& x) const {
    Matrix z = x;
    z.rowwise() -= mean_.row(0);
    z.array().rowwise() /= std_.row(0).array();
    return z;
}

Matrix StamModel::destandardize(const Matrix& z) const {
    Matrix x = z;
    x.array().rowwise() *= std_.row(0).array();
    x.rowwise() += mean_.row(0);
    return x;
}

StamForward StamModel::forward(Tape& tape, const Matrix& windows, bool trainable) const {
    const Index l = config_.lookback;
    const Index c = channels_;
    if (windows.cols() != c || windows.rows() % l != 0 || windows.rows() == 0) {
        throw numerics::ShapeError("stam: windows " + numerics::shape_string(windows) + " are not a stack of " +
                                   std::to_string(l) + " x " + std::to_string(c) + " lookbacks");
    }
    const Index batch = windows.rows() / l;
    auto& ps = const_cast<numerics::ParameterSet&>(params_);
    auto p = [&](const char* name) { return trainable ? tape.param(ps.at(name)) : tape.constant(ps.at(name).value); };

    // Spatial head: one row per (window, channel) holding that channel's lookback series.
    Matrix spatial_in(batch * c, l);
    Matrix last(batch, c);
    for (Index b = 0; b < batch; ++b) {
        spatial_in.middleRows(b * c, c) = windows.middleRows(b * l, l).transpose();
        last.row(b) = windows.row(b * l + l - 1);
    }
    const Var e_s = tanh(add_row(matmul(tape.constant(std::move(spatial_in)), p("w_s")), p("b_s")));
    const Var score_s = add_row(reshape(matmul(e_s, p("v_s")), batch, c), p("beta_s"));
    const Var alpha = softmax_rows(score_s);
    const Var ctx_s = segment_weighted_sum(alpha, e_s);

    // Temporal head: one row per (window, step).
    const Var u_t = tanh(add_row(matmul(tape.constant(windows), p("w_t")), p("b_t")));
    const Var score_t = add_row(reshape(matmul(u_t, p("v_t")), batch, l), p("beta_t"));
    const Var omega = softmax_rows(score_t);
    const Var ctx_t = segment_weighted_sum(omega, u_t);

    // Per-channel terms: the last value and the temporally attended level,
    // each weighted separately for every (step, channel) output.
    const Var level = segment_weighted_sum(omega, tape.constant(windows));
    const Var spread = tape.constant(spread_);
    const Var skip = add(mul_row(matmul(tape.constant(std::move(last)), spread), p("g_last")),
                         mul_row(matmul(level, spread), p("g_level")));
    const Var delta = add_row(matmul(concat_cols(ctx_s, ctx_t), p("w_o")), p("b_o"));
    return {add(delta, skip), alpha, omega};
}

Var StamModel::batch_loss(Tape& tape, const Matrix& windows, const Matrix& targets) const {
    const auto f = forward(tape, windows, true);
    if (targets.rows() != f.output.rows() || targets.cols() != f.output.cols()) {
        throw numerics::ShapeError("stam: targets " + numerics::shape_string(targets) + " vs forecast " +
                                   numerics::shape_string(f.output.value()));
    }
    return numerics::mean(square(sub(f.output, tape.constant(targets))));
}

nlohmann::json StamModel::to_json() const {
    nlohmann::json j;
    j["format"] = "faultsim.stam";
    j["version"] = 1;
    j["config"] = stam::to_json(config_);
    j["channels"] = channels_;
    j["mean"] = numerics::matrix_to_json(mean_);
    j["std"] = numerics::matrix_to_json(std_);
    j["params"] = numerics::params_to_json(params_);
    return j;
}

StamModel StamModel::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "faultsim.stam") {
        throw std::runtime_error("not a stam checkpoint");
    }
    StamModel m(stam_config_from_json(j.at("config")), j.at("channels").get<Index>(), 0);
    m.set_normalization(numerics::matrix_from_json(j.at("mean")), numerics::matrix_from_json(j.at("std")));
    numerics::params_from_json(j.at("params"), m.params_);
    return m;
}

StamTrainResult train_stam(const Matrix& recent, const StamConfig& config, std::uint64_t seed) {
    const Index n = recent.rows();
    const Index c = recent.cols();
    const Index l = config.lookback;
    const Index k = config.chunk;
    if (n < l + k) {
        throw std::invalid_argument("stam: training window of " + std::to_string(n) + " steps is shorter than lookback " +
                                    std::to_string(l) + " + chunk " + std::to_string(k));
    }
    numerics::RandomStream rng(seed);
    StamModel model(config, c, rng.child("init").seed());
    Matrix mu = recent.colwise().mean();
    Matrix sd = ((recent.rowwise() - mu.row(0)).array().square().colwise().sum() / static_cast<double>(n))
                    .sqrt()
                    .matrix();
    for (Index i = 0; i < c; ++i) {
        if (!(sd(0, i) > 1e-8)) {
            sd(0, i) = 1.0;
        }
    }
    model.set_normalization(mu, sd);
    const Matrix z = model.standardize(recent);

    std::vector<Index> starts;
    for (Index s = n - l - k; s >= 0; s -= config.stride) {
        starts.push_back(s);
    }
    std::reverse(starts.begin(), starts.end());

    // The latest sub-windows are held out; the epoch with the lowest held-out
    // error (the untrained model included) is kept.
    const auto held = static_cast<std::size_t>(std::floor(config.validation_fraction * static_cast<double>(starts.size())));
    std::vector<Index> val(starts.end() - static_cast<std::ptrdiff_t>(held), starts.end());
    std::vector<Index> fit;
    for (Index s : starts) {
        if (held == 0 || s + k <= val.front()) {
            fit.push_back(s);
        }
    }
    if (fit.empty()) {
        fit = starts;
        val.clear();
    }

    auto gather = [&](const std::vector<Index>& src, const std::vector<std::size_t>& idx, std::size_t first,
                      Index b, Matrix& windows, Matrix& targets) {
        windows.resize(b * l, c);
        targets.resize(b, k * c);
        for (Index i = 0; i < b; ++i) {
            const Index s = src[idx[first + static_cast<std::size_t>(i)]];
            windows.middleRows(i * l, l) = z.middleRows(s, l);
            const Matrix next = z.middleRows(s + l, k);
            targets.row(i) = Eigen::Map<const Eigen::RowVectorXd>(next.data(), k * c);
        }
    };
    auto held_out_error = [&](const StamModel& m) {
        if (val.empty()) {
            return 0.0;
        }
        std::vector<std::size_t> idx(val.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Matrix windows;
        Matrix targets;
        gather(val, idx, 0, static_cast<Index>(val.size()), windows, targets);
        Tape tape;
        const Var out = m.forward(tape, windows, false).output;
        return (out.value() - targets).array().square().mean();
    };

    numerics::Adam adam(model.params(), {config.learning_rate, 0.9, 0.999, 1e-8, config.clip_norm});
    auto order = rng.child("order");
    StamTrainResult result{model, {}, {}, 0};
    double best = held_out_error(model);
    result.held_out_loss.push_back(best);
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto perm = order.permutation(fit.size());
        double total = 0.0;
        for (std::size_t first = 0; first < perm.size(); first += static_cast<std::size_t>(config.batch_size)) {
            const auto b = static_cast<Index>(std::min<std::size_t>(static_cast<std::size_t>(config.batch_size),
                                                                    perm.size() - first));
            Matrix windows;
            Matrix targets;
            gather(fit, perm, first, b, windows, targets);
            model.params().zero_grad();
            Tape tape;
            const Var loss = model.batch_loss(tape, windows, targets);
            tape.backward(loss);
            adam.step(model.params());
            total += loss.scalar() * static_cast<double>(b);
        }
        result.epoch_loss.push_back(total / static_cast<double>(fit.size()));
        const double err = held_out_error(model);
        result.held_out_loss.push_back(err);
        if (val.empty() || err < best) {
            best = err;
            result.model = model;
            result.best_epoch = epoch + 1;
        }
    }
    return result;
}

Matrix predict_chunk(const StamModel& model, const Matrix& lookback) {
    const Index l = model.config().lookback;
    if (lookback.rows() != l || lookback.cols() != model.channels()) {
        throw numerics::ShapeError("stam: lookback window " + numerics::shape_string(lookback) + ", expected " +
                                   std::to_string(l) + "x" + std::to_string(model.channels()));
    }
    Tape tape;
    const auto f = model.forward(tape, model.standardize(lookback), false);
    const Matrix flat = f.output.value();
    const Matrix chunk = Eigen::Map<const Matrix>(flat.data(), model.config().chunk, model.channels());
    return model.destandardize(chunk);
}

Matrix generate_covariates(const StamModel& model, const Matrix& lookback, Index horizon) {
    const Index l = model.config().lookback;
    if (lookback.rows() != l || lookback.cols() != model.channels()) {
        throw numerics::ShapeError("stam: lookback window " + numerics::shape_string(lookback) + ", expected " +
                                   std::to_string(l) + "x" + std::to_string(model.channels()));
    }
    if (horizon < 0) {
        throw std::invalid_argument("stam: negative horizon");
    }
    Matrix out(horizon, model.channels());
    Matrix window = lookback;
    Index filled = 0;
    while (filled < horizon) {
        const Matrix chunk = predict_chunk(model, window);
        const Index take = std::min<Index>(chunk.rows(), horizon - filled);
        out.middleRows(filled, take) = chunk.topRows(take);
        filled += take;
        if (filled < horizon) {
            Matrix next(l, model.channels());
            const Index k = chunk.rows();
            if (k >= l) {
                next = chunk.bottomRows(l);
            } else {
                next.topRows(l - k) = window.bottomRows(l - k);
                next.bottomRows(k) = chunk;
            }
            window = std::move(next);
        }
    }
    return out;
}

std::string to_string(AttentionContext c) { return c == AttentionContext::no_fault ? "no_fault" : "fault_observed"; }

AttentionProfile attention_profile(const StamModel& model, const Matrix& lookback, AttentionContext context) {
    if (lookback.rows() != model.config().lookback || lookback.cols() != model.channels()) {
        throw numerics::ShapeError("stam: lookback window " + numerics::shape_string(lookback));
    }
    Tape tape;
    const auto f = model.forward(tape, model.standardize(lookback), false);
    AttentionProfile p;
    p.context = context;
    const Matrix& a = f.spatial.value();
    const Matrix& w = f.temporal.value();
    p.spatial.assign(a.data(), a.data() + a.size());
    p.temporal.assign(w.data(), w.data() + w.size());
    return p;
}

AttentionTable aggregate_attention(const std::vector<AttentionProfile>& profiles,
                                   const std::vector<std::string>& subsystem_of) {
    AttentionTable table;
    for (const auto& s : subsystem_of) {
        if (std::find(table.subsystems.begin(), table.subsystems.end(), s) == table.subsystems.end()) {
            table.subsystems.push_back(s);
        }
    }
    for (auto ctx : {AttentionContext::no_fault, AttentionContext::fault_observed}) {
        std::vector<double> mass(table.subsystems.size(), 0.0);
        std::size_t count = 0;
        for (const auto& p : profiles) {
            if (p.context != ctx) {
                continue;
            }
            if (p.spatial.size() != subsystem_of.size()) {
                throw std::invalid_argument("aggregate_attention: profile has " + std::to_string(p.spatial.size()) +
                                            " channels, subsystem map has " + std::to_string(subsystem_of.size()));
            }
            for (std::size_t i = 0; i < p.spatial.size(); ++i) {
                const auto col = std::find(table.subsystems.begin(), table.subsystems.end(), subsystem_of[i]) -
                                 table.subsystems.begin();
                mass[static_cast<std::size_t>(col)] += p.spatial[i];
            }
            ++count;
        }
        if (count == 0) {
            throw std::invalid_argument("aggregate_attention: no profiles with context " + to_string(ctx));
        }
        for (auto& m : mass) {
            m /= static_cast<double>(count);
        }
        table.rows[to_string(ctx)] = std::move(mass);
    }
    return table;
}

} // namespace faultsim::stam
