#include "faultsim/evaluation/experiment.hpp"

#include "faultsim/numerics/checkpoint.hpp"
#include "faultsim/numerics/random.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace faultsim::evaluation {

namespace {

using telemetry::kSensorCount;

bool has_mode(const std::vector<Mode>& modes, Mode m) { return std::find(modes.begin(), modes.end(), m) != modes.end(); }

void say(const Logger& log, const std::string& msg) {
    if (log) {
        log(msg);
    }
}

std::string window_label(const std::string& id, Index t0) { return "window/" + id + "/" + std::to_string(t0); }

telemetry::SeriesSlice forecast_history(const telemetry::VehicleRecord& v, Index t0, Index context) {
    const Index len = std::min(context + 1, t0);
    return telemetry::slice_window(v, t0 - len, len);
}

Matrix feature_matrix(const std::vector<WindowResult>& windows, Mode mode) {
    if (windows.empty()) {
        return {};
    }
    const auto first = mode_features(windows.front(), mode);
    Matrix x(static_cast<Index>(windows.size()), static_cast<Index>(first.size()));
    for (std::size_t i = 0; i < windows.size(); ++i) {
        const auto f = mode_features(windows[i], mode);
        if (f.size() != first.size()) {
            throw numerics::ShapeError("evaluation: ragged features under mode " + to_string(mode));
        }
        for (std::size_t j = 0; j < f.size(); ++j) {
            x(static_cast<Index>(i), static_cast<Index>(j)) = f[j];
        }
    }
    return x;
}

Matrix take_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
    Matrix out(static_cast<Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Index>(i)) = x.row(static_cast<Index>(rows[i]));
    }
    return out;
}

// AUC (and optionally ROC) of a classifier trained on each split of `plan`.
std::vector<double> split_aucs(const Matrix& x, const std::vector<int>& labels, const SplitPlan& plan,
                               const heads::ForestConfig& forest, std::uint64_t seed, int jobs,
                               std::vector<std::vector<RocPoint>>* roc) {
    const numerics::RandomStream root = numerics::RandomStream(seed).child("forest");
    std::vector<double> out(plan.size());
    if (roc) {
        roc->assign(plan.size(), {});
    }
    parallel_for(plan.size(), jobs, [&](std::size_t s) {
        std::vector<double> y;
        for (auto i : plan.train[s]) {
            y.push_back(labels[i]);
        }
        const auto model = heads::train_forest(take_rows(x, plan.train[s]), y, heads::Task::classify, forest,
                                               root.child(std::to_string(s)).seed());
        std::vector<double> scores;
        std::vector<int> truth;
        for (auto i : plan.test[s]) {
            const auto row = x.row(static_cast<Index>(i));
            scores.push_back(heads::classify(model, std::span<const double>(row.data(), row.size())).score);
            truth.push_back(labels[i]);
        }
        out[s] = auc(scores, truth);
        if (roc) {
            (*roc)[s] = roc_curve(scores, truth);
        }
    });
    return out;
}

double mean_of(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::vector<int> labels_of(const std::vector<WindowResult>& windows) {
    std::vector<int> y;
    y.reserve(windows.size());
    for (const auto& w : windows) {
        y.push_back(w.label);
    }
    return y;
}

void require_both_classes(const std::vector<int>& labels, const std::string& what) {
    const auto pos = std::count(labels.begin(), labels.end(), 1);
    const auto neg = static_cast<std::ptrdiff_t>(labels.size()) - pos;
    if (pos < 2 || neg < 2) {
        throw telemetry::DataError(what + ": need at least 2 windows of each class, have " + std::to_string(pos) +
                                   " positive and " + std::to_string(neg) + " negative");
    }
}

} // namespace

std::string to_string(Mode m) {
    switch (m) {
    case Mode::stam_only: return "stam_only";
    case Mode::stam_plus_vae: return "stam_plus_vae";
    case Mode::lstm_direct: return "lstm_direct";
    case Mode::stam_direct: return "stam_direct";
    }
    return "unknown";
}

Mode mode_from_string(const std::string& s) {
    for (auto m : kAllModes) {
        if (to_string(m) == s) {
            return m;
        }
    }
    throw std::invalid_argument("unknown mode '" + s + "' (expected stam_only, stam_plus_vae, lstm_direct or stam_direct)");
}

// ---------------------------------------------------------------------------
// Configuration.

ExperimentConfig::ExperimentConfig() {
    lstm_direct.cell = deepar::CellKind::lstm;
    lstm_direct.use_covariates = false;
    stam.lookback = generator.window.lookback;
}

void ExperimentConfig::validate() const {
    generator.validate();
    const auto& w = generator.window;
    w.validate_geometry();
    if (scale != "desk" && scale != "paper") {
        throw std::invalid_argument("scale must be desk or paper");
    }
    if (stam.lookback != w.lookback) {
        throw std::invalid_argument("stam.lookback (" + std::to_string(stam.lookback) +
                                    ") must equal generator.window.lookback (" + std::to_string(w.lookback) + ")");
    }
    if (w.stam_train_len < stam.lookback + stam.chunk) {
        throw std::invalid_argument("generator.window.stam_train_len must be at least stam.lookback + stam.chunk");
    }
    if (!deepar.use_covariates) {
        throw std::invalid_argument("deepar.use_covariates must be true");
    }
    if (lstm_direct.use_covariates) {
        throw std::invalid_argument("lstm_direct.use_covariates must be false");
    }
    for (const auto* d : {&deepar, &lstm_direct}) {
        if (d->train_window + 1 > w.train_len || d->context + 1 > w.train_len || d->n_samples < 1) {
            throw std::invalid_argument("deepar/lstm_direct: train_window and context must fit in the training length");
        }
    }
    if (n_splits < 1) {
        throw std::invalid_argument("n_splits must be >= 1");
    }
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw std::invalid_argument("train_fraction must be in (0, 1)");
    }
    if (states < 1 || samples_per_state < 1) {
        throw std::invalid_argument("states and samples_per_state must be >= 1");
    }
    if (min_regression_positives < 2) {
        throw std::invalid_argument("min_regression_positives must be >= 2");
    }
    if (modes.empty()) {
        throw std::invalid_argument("modes must not be empty");
    }
    for (std::size_t i = 0; i < modes.size(); ++i) {
        if (std::count(modes.begin(), modes.end(), modes[i]) > 1) {
            throw std::invalid_argument("modes lists " + to_string(modes[i]) + " twice");
        }
    }
    if (forest.n_trees < 1 || forest.min_leaf < 1 || forest.features_per_split < 0) {
        throw std::invalid_argument("forest: n_trees and min_leaf must be >= 1, features_per_split >= 0");
    }
}

ExperimentConfig desk_preset() { return ExperimentConfig{}; }

ExperimentConfig paper_preset() {
    ExperimentConfig c;
    c.scale = "paper";
    c.generator.vehicle_count = 240;
    c.generator.out_of_sample_count = 40;
    c.generator.length = 172800;
    c.generator.window.train_len = 129600;
    c.generator.window.stam_train_len = 10800;
    c.generator.window.lookback = 1200;
    c.generator.window.horizon = 1800;
    c.deepar.epochs = 100;
    c.deepar.context = 1200;
    c.lstm_direct.epochs = 100;
    c.lstm_direct.context = 1200;
    c.stam.lookback = 1200;
    c.stam.chunk = 300;
    c.stam.stride = 100;
    c.stam.epochs = 100;
    c.vae.steps = 60;
    return c;
}

ExperimentConfig preset(const std::string& scale) {
    if (scale == "desk") {
        return desk_preset();
    }
    if (scale == "paper") {
        return paper_preset();
    }
    throw std::invalid_argument("unknown scale '" + scale + "' (expected desk or paper)");
}

nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["scale"] = c.scale;
    j["generator"] = telemetry::to_json(c.generator);
    j["deepar"] = deepar::to_json(c.deepar);
    j["lstm_direct"] = deepar::to_json(c.lstm_direct);
    j["stam"] = stam::to_json(c.stam);
    j["vae"] = vae::to_json(c.vae);
    j["forest"] = heads::to_json(c.forest);
    j["n_splits"] = c.n_splits;
    j["train_fraction"] = c.train_fraction;
    j["states"] = c.states;
    j["samples_per_state"] = c.samples_per_state;
    j["min_regression_positives"] = c.min_regression_positives;
    auto& modes = j["modes"] = nlohmann::json::array();
    for (auto m : c.modes) {
        modes.push_back(to_string(m));
    }
    return j;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw std::invalid_argument("experiment config must be a JSON object");
    }
    static const char* known[] = {"scale", "generator", "deepar", "lstm_direct", "stam", "vae", "forest",
                                  "n_splits", "train_fraction", "states", "samples_per_state",
                                  "min_regression_positives", "modes"};
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(std::begin(known), std::end(known), [&](const char* k) { return key == k; })) {
            throw std::invalid_argument("unknown config key '" + key + "'");
        }
    }
    ExperimentConfig c = preset(j.value("scale", std::string("desk")));
    nlohmann::json merged = to_json(c);
    merged.merge_patch(j);
    // A window lookback given without a STAM lookback carries over to STAM.
    const bool window_lookback = j.contains("generator") && j["generator"].contains("window") &&
                                 j["generator"]["window"].contains("lookback");
    const bool stam_lookback = j.contains("stam") && j["stam"].contains("lookback");
    if (window_lookback && !stam_lookback) {
        merged["stam"]["lookback"] = merged["generator"]["window"]["lookback"];
    }
    c.generator = telemetry::generator_config_from_json(merged.at("generator"));
    c.deepar = deepar::deepar_config_from_json(merged.at("deepar"), c.deepar);
    c.lstm_direct = deepar::deepar_config_from_json(merged.at("lstm_direct"), c.lstm_direct);
    c.stam = stam::stam_config_from_json(merged.at("stam"), c.stam);
    c.vae = vae::vae_config_from_json(merged.at("vae"), c.vae);
    c.forest = heads::forest_config_from_json(merged.at("forest"), c.forest);
    c.n_splits = merged.at("n_splits").get<int>();
    c.train_fraction = merged.at("train_fraction").get<double>();
    c.states = merged.at("states").get<int>();
    c.samples_per_state = merged.at("samples_per_state").get<int>();
    c.min_regression_positives = merged.at("min_regression_positives").get<std::size_t>();
    c.modes.clear();
    for (const auto& m : merged.at("modes")) {
        c.modes.push_back(mode_from_string(m.get<std::string>()));
    }
    c.validate();
    return c;
}

std::string config_hash(const ExperimentConfig& c) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(numerics::fnv1a(to_json(c).dump())));
    return buf;
}

// ---------------------------------------------------------------------------
// Worker pool.

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    const auto workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

// ---------------------------------------------------------------------------
// Per-vehicle models.

VehicleModels train_vehicle_models(const telemetry::FleetDataset& dataset, const ExperimentConfig& config,
                                   std::uint64_t seed, int jobs, bool need_deepar, bool need_lstm, const Logger& log) {
    const numerics::RandomStream root(seed);
    struct Job {
        std::string id;
        bool lstm;
    };
    std::vector<Job> todo;
    for (const auto& id : dataset.in_sample_ids) {
        if (need_deepar) {
            todo.push_back({id, false});
        }
        if (need_lstm) {
            todo.push_back({id, true});
        }
    }
    std::vector<std::optional<deepar::TrainResult>> out(todo.size());
    std::mutex log_mutex;
    parallel_for(todo.size(), jobs, [&](std::size_t i) {
        const auto& job = todo[i];
        const auto& v = dataset.vehicle(job.id);
        const auto window = telemetry::slice_window(v, 0, dataset.window.train_len);
        const auto& cfg = job.lstm ? config.lstm_direct : config.deepar;
        out[i] = deepar::train_deepar(window, cfg, root.child((job.lstm ? "lstm/" : "deepar/") + job.id).seed());
        std::lock_guard lock(log_mutex);
        const auto& loss = out[i]->history.epoch_loss;
        say(log, std::string(job.lstm ? "lstm_direct " : "deepar ") + job.id + ": loss " +
                     std::to_string(loss.front()) + " -> " + std::to_string(loss.back()));
    });
    VehicleModels models;
    for (std::size_t i = 0; i < todo.size(); ++i) {
        (todo[i].lstm ? models.lstm_direct : models.deepar).emplace(todo[i].id, std::move(*out[i]));
    }
    return models;
}

void save_vehicle_models(const VehicleModels& models, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    auto save = [&](const std::map<std::string, deepar::TrainResult>& m, const std::string& prefix) {
        for (const auto& [id, r] : m) {
            numerics::Json j;
            j["format"] = "faultsim.vehicle_model";
            j["vehicle_id"] = id;
            j["kind"] = prefix;
            j["epoch_loss"] = r.history.epoch_loss;
            j["model"] = r.model.to_json();
            numerics::write_json(j, dir / (prefix + "_" + id + ".json"));
        }
    };
    save(models.deepar, "deepar");
    save(models.lstm_direct, "lstm_direct");
}

VehicleModels load_vehicle_models(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) {
        throw telemetry::DataError("model directory " + dir.string() + " does not exist");
    }
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.path().extension() == ".json") {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    VehicleModels models;
    for (const auto& f : files) {
        const auto j = numerics::read_json(f);
        if (j.value("format", std::string()) != "faultsim.vehicle_model") {
            continue;
        }
        deepar::TrainResult r{deepar::DeepArModel::from_json(j.at("model")), {}};
        r.history.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
        const auto kind = j.at("kind").get<std::string>();
        (kind == "lstm_direct" ? models.lstm_direct : models.deepar).emplace(j.at("vehicle_id").get<std::string>(),
                                                                            std::move(r));
    }
    return models;
}

vae::LatentStateModel train_state_model(const telemetry::FleetDataset& dataset, const ExperimentConfig& config,
                                        std::uint64_t seed, vae::VaeHistory* history) {
    const numerics::RandomStream root(seed);
    auto refs = vae::out_of_sample_windows(dataset);
    auto trained = vae::train_vae(dataset, refs, config.vae, root.child("vae").seed());
    if (history) {
        *history = trained.history;
    }
    return vae::build_state_model(dataset, std::move(trained.model), std::move(refs), config.states,
                                  root.child("kmeans").seed());
}

// ---------------------------------------------------------------------------
// Window stage.

std::vector<WindowResult> build_window_results(const telemetry::FleetDataset& dataset, const ExperimentConfig& config,
                                               const VehicleModels& models, const vae::LatentStateModel* states,
                                               const std::vector<Mode>& modes, std::uint64_t seed, int jobs,
                                               const Logger& log) {
    const bool need_stam = has_mode(modes, Mode::stam_only) || has_mode(modes, Mode::stam_plus_vae);
    const bool need_vae = has_mode(modes, Mode::stam_plus_vae);
    const bool need_lstm = has_mode(modes, Mode::lstm_direct);
    const bool need_direct = has_mode(modes, Mode::stam_direct);
    if (need_vae && !states) {
        throw std::invalid_argument("stam_plus_vae requires a latent state model");
    }
    const auto& spec = dataset.window;
    if (config.stam.lookback != spec.lookback) {
        throw std::invalid_argument("stam.lookback does not match the dataset window lookback");
    }

    std::vector<WindowResult> out;
    for (const auto& id : dataset.in_sample_ids) {
        const auto& v = dataset.vehicle(id);
        for (Index t0 : dataset.starts(id)) {
            WindowResult w;
            w.vehicle_id = id;
            w.t0 = t0;
            w.metadata = v.metadata;
            w.sample_rate = v.sample_rate;
            out.push_back(std::move(w));
        }
    }
    for (const auto& id : dataset.in_sample_ids) {
        if ((need_stam && !models.deepar.count(id)) || (need_lstm && !models.lstm_direct.count(id))) {
            throw telemetry::DataError("no trained model for in-sample vehicle " + id);
        }
    }

    const numerics::RandomStream root(seed);
    const Index horizon = spec.horizon;
    std::atomic<std::size_t> done{0};
    std::mutex log_mutex;
    parallel_for(out.size(), jobs, [&](std::size_t i) {
        auto& w = out[i];
        const auto& v = dataset.vehicle(w.vehicle_id);
        spec.at(w.t0).validate(v.length());
        const auto rs = root.child(window_label(w.vehicle_id, w.t0));
        const std::span<const std::uint8_t> future(v.faults.data() + w.t0, static_cast<std::size_t>(horizon));
        w.ttf_seconds = telemetry::extract_time_to_first_fault(future, v.sample_rate);
        w.label = w.ttf_seconds ? 1 : 0;
        const Matrix truth = v.sensors.middleRows(w.t0, horizon);

        if (need_stam) {
            const Matrix recent = v.sensors.middleRows(w.t0 - spec.stam_train_len, spec.stam_train_len);
            const auto trained = stam::train_stam(recent, config.stam, rs.child("stam").seed());
            const Matrix lookback = recent.bottomRows(spec.lookback);
            const Matrix generated = stam::generate_covariates(trained.model, lookback, horizon);
            const auto& sd = trained.model.stddev();
            const Matrix err = ((generated - truth).array().rowwise() / sd.row(0).array()).matrix();
            const Matrix lvcf = ((truth.rowwise() - lookback.row(spec.lookback - 1)).array().rowwise() /
                                 sd.row(0).array())
                                    .matrix();
            w.stam_mse = err.array().square().mean();
            w.lvcf_mse = lvcf.array().square().mean();
            w.stam_best_epoch = trained.best_epoch;
            w.attention = stam::attention_profile(
                trained.model, lookback,
                w.label ? stam::AttentionContext::fault_observed : stam::AttentionContext::no_fault);

            const auto& q = models.deepar.at(w.vehicle_id).model;
            const auto history = forecast_history(v, w.t0, q.config().context);
            const auto fr = deepar::forecast(q, history, generated, horizon, q.config().n_samples,
                                             rs.child("forecast_stam").seed());
            w.stam = deepar::hidden_representation(fr, deepar::Provenance::stam_generated);
            if (need_vae) {
                const Matrix xhat = vae::reconstruct_true_future(states->model, truth);
                const auto fv = deepar::forecast(q, history, xhat, horizon, q.config().n_samples,
                                                 rs.child("forecast_vae").seed());
                w.vae = deepar::hidden_representation(fv, deepar::Provenance::vae_generated);
            }
        }
        if (need_lstm) {
            const auto& l = models.lstm_direct.at(w.vehicle_id).model;
            const auto history = forecast_history(v, w.t0, l.config().context);
            const auto fl = deepar::forecast(l, history, Matrix(0, kSensorCount), horizon, l.config().n_samples,
                                             rs.child("forecast_lstm").seed());
            w.lstm_direct = deepar::hidden_representation(fl, deepar::Provenance::lstm_direct);
        }
        if (need_direct) {
            // Fault indicator as channel 0 next to the sensors; its rollout is
            // the direct forecast.
            Matrix recent(spec.stam_train_len, kSensorCount + 1);
            const Index start = w.t0 - spec.stam_train_len;
            for (Index t = 0; t < spec.stam_train_len; ++t) {
                recent(t, 0) = v.faults[static_cast<std::size_t>(start + t)];
            }
            recent.rightCols(kSensorCount) = v.sensors.middleRows(start, spec.stam_train_len);
            const auto trained = stam::train_stam(recent, config.stam, rs.child("stam_direct").seed());
            const Matrix generated = stam::generate_covariates(trained.model, recent.bottomRows(spec.lookback), horizon);
            std::vector<double> path(static_cast<std::size_t>(horizon));
            for (Index t = 0; t < horizon; ++t) {
                path[static_cast<std::size_t>(t)] = std::clamp(generated(t, 0), 0.0, 1.0);
            }
            w.stam_direct.provenance = deepar::Provenance::stam_direct;
            w.stam_direct.features = path;
            w.stam_direct.features.insert(w.stam_direct.features.end(), path.begin(), path.end());
        }
        const auto n = ++done;
        if (n % 20 == 0 || n == out.size()) {
            std::lock_guard lock(log_mutex);
            say(log, "windows: " + std::to_string(n) + "/" + std::to_string(out.size()));
        }
    });
    return out;
}

std::vector<double> mode_features(const WindowResult& w, Mode mode) {
    switch (mode) {
    case Mode::stam_only: return heads::build_features(w.stam);
    case Mode::stam_plus_vae: return heads::build_features(w.stam, &w.vae);
    case Mode::lstm_direct: return heads::build_features(w.lstm_direct);
    case Mode::stam_direct: return heads::build_features(w.stam_direct);
    }
    throw std::invalid_argument("mode_features: unknown mode");
}

// ---------------------------------------------------------------------------
// Classification protocol.

std::vector<double> permutation_null(const std::vector<WindowResult>& windows, Mode mode,
                                     const ExperimentConfig& config, std::uint64_t seed, int jobs) {
    const numerics::RandomStream root(seed);
    const auto labels = labels_of(windows);
    const auto x = feature_matrix(windows, mode);
    const auto perm_root = root.child("permutation");
    const auto split_root = root.child("permutation_splits");
    const auto forest_root = root.child("permutation_forest");
    std::vector<double> out(static_cast<std::size_t>(config.n_splits));
    parallel_for(out.size(), jobs, [&](std::size_t s) {
        const auto tag = std::to_string(s);
        auto rng = perm_root.child(tag);
        const auto perm = rng.permutation(labels.size());
        std::vector<int> permuted(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            permuted[i] = labels[perm[i]];
        }
        const auto plan = make_split_plan(permuted, 1, config.train_fraction, split_root.child(tag).seed());
        out[s] = split_aucs(x, permuted, plan, config.forest, forest_root.child(tag).seed(), 1, nullptr).front();
    });
    return out;
}

ModeResult evaluate_mode(const std::vector<WindowResult>& windows, Mode mode, const SplitPlan& plan,
                         const ExperimentConfig& config, std::uint64_t seed, int jobs) {
    const auto labels = labels_of(windows);
    require_both_classes(labels, "evaluate_mode");
    ModeResult r;
    r.mode = mode;
    r.split_auc = split_aucs(feature_matrix(windows, mode), labels, plan, config.forest, seed, jobs, &r.roc);
    r.mean_auc = mean_of(r.split_auc);
    r.permutation_split_auc = permutation_null(windows, mode, config, seed, jobs);
    r.permutation_mean_auc = mean_of(r.permutation_split_auc);
    return r;
}

// ---------------------------------------------------------------------------
// Time to first fault.

TtfResult evaluate_ttf(const std::vector<WindowResult>& windows, const ExperimentConfig& config, std::uint64_t seed,
                       int jobs) {
    TtfResult r;
    std::vector<const WindowResult*> pos;
    for (const auto& w : windows) {
        if (w.label == 1 && w.ttf_seconds) {
            pos.push_back(&w);
        }
    }
    r.positives = pos.size();
    if (pos.size() < config.min_regression_positives) {
        r.notice = "time-to-first-fault regression skipped: " + std::to_string(pos.size()) +
                   " fault-positive windows, need " + std::to_string(config.min_regression_positives);
        return r;
    }
    std::vector<double> truth;
    for (const auto* w : pos) {
        truth.push_back(*w->ttf_seconds);
    }
    if (std::all_of(truth.begin(), truth.end(), [&](double t) { return t == truth.front(); })) {
        r.notice = "time-to-first-fault regression skipped: all positive windows share one time to first fault";
        return r;
    }
    const double horizon_seconds = static_cast<double>(pos.front()->stam.horizon()) / pos.front()->sample_rate;
    const std::size_t folds = std::min<std::size_t>(5, pos.size());
    auto rng = numerics::RandomStream(seed).child("ttf");
    const auto perm = rng.permutation(pos.size());
    std::vector<std::size_t> fold_of(pos.size());
    for (std::size_t k = 0; k < perm.size(); ++k) {
        fold_of[perm[k]] = k % folds;
    }
    std::vector<double> predicted(pos.size());
    std::vector<double> baseline(pos.size());
    const numerics::RandomStream forest_root = rng.child("forest");
    parallel_for(folds, jobs, [&](std::size_t f) {
        std::vector<heads::LabeledExample> train;
        double sum = 0.0;
        for (std::size_t i = 0; i < pos.size(); ++i) {
            if (fold_of[i] != f) {
                train.push_back({heads::regressor_features(pos[i]->stam), 1, pos[i]->ttf_seconds});
                sum += *pos[i]->ttf_seconds;
            }
        }
        const double mean = sum / static_cast<double>(train.size());
        const auto model = heads::train_forest(train, heads::Task::regress, config.forest,
                                               forest_root.child(std::to_string(f)).seed());
        for (std::size_t i = 0; i < pos.size(); ++i) {
            if (fold_of[i] == f) {
                predicted[i] = heads::predict_ttf(model, heads::regressor_features(pos[i]->stam), horizon_seconds);
                baseline[i] = mean;
            }
        }
    });
    r.evaluated = true;
    r.r_squared = r_squared(truth, predicted);
    r.mean_baseline_r_squared = r_squared(truth, baseline);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double e = std::abs(truth[i] - predicted[i]);
        r.max_abs_error_seconds = std::max(r.max_abs_error_seconds, e);
        r.mean_abs_error_seconds += e / static_cast<double>(truth.size());
    }
    return r;
}

// ---------------------------------------------------------------------------
// State-conditioned simulation.

heads::ForestModel train_state_classifier(const std::vector<WindowResult>& windows, const ExperimentConfig& config,
                                          std::uint64_t seed) {
    std::vector<heads::LabeledExample> examples;
    examples.reserve(windows.size());
    for (const auto& w : windows) {
        examples.push_back({mode_features(w, Mode::stam_plus_vae), w.label, w.ttf_seconds});
    }
    return heads::train_forest(examples, heads::Task::classify, config.forest,
                               numerics::RandomStream(seed).child("state_classifier").seed());
}

std::vector<StateRate> simulate_state_fault_rates(
    const telemetry::FleetDataset& dataset, const vae::LatentStateModel& states, const VehicleModels& models,
    const std::vector<WindowResult>& windows, const std::function<int(const std::vector<double>&)>& classifier,
    int n_per_state, const ExperimentConfig& config, std::uint64_t seed, int jobs) {
    if (n_per_state < 1) {
        throw std::invalid_argument("simulate_state_fault_rates: n_per_state must be >= 1");
    }
    if (windows.empty()) {
        throw std::invalid_argument("simulate_state_fault_rates: no base windows");
    }
    (void)config;
    const int k = states.state_count();
    for (int s = 0; s < k; ++s) {
        if (states.members(s).empty()) {
            throw std::invalid_argument("simulate_state_fault_rates: state " + std::to_string(s) + " is empty");
        }
    }
    const numerics::RandomStream root = numerics::RandomStream(seed).child("states");
    std::vector<std::vector<Matrix>> samples(static_cast<std::size_t>(k));
    for (int s = 0; s < k; ++s) {
        samples[static_cast<std::size_t>(s)] = vae::sample_from_state(
            states, s, static_cast<std::size_t>(n_per_state), root.child("sample" + std::to_string(s)).seed());
    }
    const auto n = static_cast<std::size_t>(n_per_state);
    const Index horizon = dataset.window.horizon;
    std::vector<int> decisions(static_cast<std::size_t>(k) * n);
    parallel_for(decisions.size(), jobs, [&](std::size_t job) {
        const auto s = job / n;
        const auto i = job % n;
        const auto& base = windows[job % windows.size()];
        const auto& q = models.deepar.at(base.vehicle_id).model;
        const auto history = forecast_history(dataset.vehicle(base.vehicle_id), base.t0, q.config().context);
        const auto fr = deepar::forecast(q, history, samples[s][i], horizon, q.config().n_samples,
                                         root.child(std::to_string(s) + "/" + std::to_string(i)).seed());
        const auto h = deepar::hidden_representation(fr, deepar::Provenance::vae_generated);
        decisions[job] = classifier(heads::build_features(h, &h)) ? 1 : 0;
    });
    const auto summaries = vae::metadata_association(states);
    std::vector<StateRate> rates;
    for (int s = 0; s < k; ++s) {
        StateRate r;
        r.state = s;
        r.samples = n;
        r.positives = static_cast<std::size_t>(
            std::accumulate(decisions.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(s) * n),
                            decisions.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(s + 1) * n), 0));
        r.rate = static_cast<double>(r.positives) / static_cast<double>(n);
        r.summary = summaries[static_cast<std::size_t>(s)];
        rates.push_back(r);
    }
    return rates;
}

// ---------------------------------------------------------------------------
// Full protocol.

const ModeResult* ExperimentReport::result(Mode m) const {
    for (const auto& r : results) {
        if (r.mode == m) {
            return &r;
        }
    }
    return nullptr;
}

ExperimentReport run_experiment(const telemetry::FleetDataset& dataset, const ExperimentConfig& config,
                                std::uint64_t seed, int jobs, const Logger& log, const VehicleModels* models,
                                ExperimentArtifacts* keep) {
    config.validate();
    const auto& w = dataset.window;
    const auto& cw = config.generator.window;
    if (w.train_len != cw.train_len || w.stam_train_len != cw.stam_train_len || w.lookback != cw.lookback ||
        w.horizon != cw.horizon) {
        throw std::invalid_argument("dataset window geometry differs from generator.window in the config");
    }
    const auto& modes = config.modes;
    const bool need_stam = has_mode(modes, Mode::stam_only) || has_mode(modes, Mode::stam_plus_vae);
    const bool need_vae = has_mode(modes, Mode::stam_plus_vae);
    const bool need_lstm = has_mode(modes, Mode::lstm_direct);

    ExperimentReport report;
    report.seed = seed;
    report.config_hash = config_hash(config);
    report.scale = config.scale;
    report.modes = modes;

    VehicleModels trained;
    if (!models) {
        say(log, "training per-vehicle forecasters");
        trained = train_vehicle_models(dataset, config, seed, jobs, need_stam || need_vae, need_lstm, log);
        models = &trained;
    }
    for (const auto& [id, r] : models->deepar) {
        report.deepar_loss[id] = r.history.epoch_loss;
    }
    for (const auto& [id, r] : models->lstm_direct) {
        report.lstm_loss[id] = r.history.epoch_loss;
    }
    if (need_vae) {
        say(log, "training latent state model");
        report.latent = train_state_model(dataset, config, seed, &report.vae_history);
    }

    say(log, "building window representations");
    const auto windows = build_window_results(dataset, config, *models, report.latent ? &*report.latent : nullptr,
                                              modes, seed, jobs, log);
    const auto labels = labels_of(windows);
    report.windows = windows.size();
    report.positive_windows = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    require_both_classes(labels, "run_experiment");

    const auto plan = make_split_plan(labels, config.n_splits, config.train_fraction,
                                      numerics::RandomStream(seed).child("splits").seed());
    for (auto m : modes) {
        say(log, "evaluating " + to_string(m));
        report.results.push_back(evaluate_mode(windows, m, plan, config, seed, jobs));
    }

    if (need_stam) {
        report.ttf = evaluate_ttf(windows, config, seed, jobs);
        for (const auto& wr : windows) {
            report.stam_mse += wr.stam_mse / static_cast<double>(windows.size());
            report.lvcf_mse += wr.lvcf_mse / static_cast<double>(windows.size());
        }
        std::vector<stam::AttentionProfile> profiles;
        for (const auto& wr : windows) {
            profiles.push_back(wr.attention);
        }
        const auto& subs = telemetry::default_subsystems();
        try {
            report.attention = stam::aggregate_attention(profiles, std::vector<std::string>(subs.begin(), subs.end()));
        } catch (const std::invalid_argument& e) {
            report.attention_notice = e.what();
        }
    } else {
        report.ttf.notice = "time-to-first-fault regression needs a STAM pipeline mode";
    }

    if (need_vae) {
        say(log, "simulating state-conditioned fault rates");
        const auto classifier = train_state_classifier(windows, config, seed);
        report.state_rates = simulate_state_fault_rates(
            dataset, *report.latent, *models, windows,
            [&](const std::vector<double>& f) { return heads::classify(classifier, f).label; },
            config.samples_per_state, config, seed, jobs);
    }
    if (keep) {
        keep->models = models == &trained ? std::move(trained) : *models;
        keep->windows = windows;
    }
    return report;
}

} // namespace faultsim::evaluation
