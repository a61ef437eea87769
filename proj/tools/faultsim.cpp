#include "faultsim/evaluation/experiment.hpp"
#include "faultsim/numerics/random.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

using namespace faultsim;
namespace fs = std::filesystem;

namespace {

enum Exit { ok = 0, failure = 1, usage = 2, bad_config = 3, bad_input = 4 };

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string scale;
    std::string mode;
    int jobs = 1;
    std::string out;
    std::string data;
    std::string models;
    std::string in;
    std::string vehicle;
    std::optional<long long> t0;
};

void log_line(const std::string& msg) { std::cerr << "[faultsim] " << msg << '\n'; }

nlohmann::json read_json_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw InputError("cannot read " + p.string());
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw InputError("malformed JSON in " + p.string() + ": " + e.what());
    }
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text)) {
        throw std::runtime_error("cannot write " + p.string());
    }
}

evaluation::ExperimentConfig resolve_config(const Options& o) {
    nlohmann::json j = nlohmann::json::object();
    if (!o.config_path.empty()) {
        try {
            j = read_json_file(o.config_path);
        } catch (const InputError& e) {
            throw ConfigError(e.what());
        }
    }
    if (!o.scale.empty()) {
        j["scale"] = o.scale;
    }
    if (!o.mode.empty()) {
        j["modes"] = {o.mode};
    }
    try {
        return evaluation::experiment_config_from_json(j);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
}

std::uint64_t require_seed(const Options& o) {
    if (!o.seed) {
        throw ConfigError("--seed is required");
    }
    return *o.seed;
}

fs::path require_dir(const std::string& path, const std::string& flag) {
    if (path.empty()) {
        throw ConfigError(flag + " is required");
    }
    return path;
}

fs::path prepare_out(const Options& o) {
    const auto out = require_dir(o.out, "--out");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec || !fs::is_directory(out)) {
        throw std::runtime_error("cannot create output directory " + out.string());
    }
    return out;
}

void write_manifest(const fs::path& out, const std::string& command, const Options& o,
                    const evaluation::ExperimentConfig& cfg, std::optional<std::uint64_t> seed) {
    nlohmann::json m;
    m["command"] = command;
    m["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
    m["config_hash"] = evaluation::config_hash(cfg);
    m["config"] = evaluation::to_json(cfg);
    m["jobs"] = o.jobs;
    nlohmann::json inputs = nlohmann::json::object();
    if (!o.data.empty()) {
        inputs["data"] = o.data;
    }
    if (!o.models.empty()) {
        inputs["models"] = o.models;
    }
    if (!o.vehicle.empty()) {
        inputs["vehicle"] = o.vehicle;
    }
    if (o.t0) {
        inputs["t0"] = *o.t0;
    }
    m["inputs"] = inputs;
    // The resolved config is stored next to the manifest; this argument list
    // reproduces the run.
    write_text(out / "config.json", evaluation::to_json(cfg).dump(2) + "\n");
    std::vector<std::string> argv{"faultsim", command, "--config", (out / "config.json").string()};
    if (seed) {
        argv.insert(argv.end(), {"--seed", std::to_string(*seed)});
    }
    for (const auto& [flag, value] : inputs.items()) {
        argv.insert(argv.end(), {"--" + flag, value.is_string() ? value.get<std::string>() : value.dump()});
    }
    m["argv"] = argv;
    write_text(out / "run_manifest.json", m.dump(2) + "\n");
}

telemetry::FleetDataset load_data(const Options& o) {
    const auto dir = require_dir(o.data, "--data");
    if (!fs::is_directory(dir)) {
        throw InputError("data directory " + dir.string() + " does not exist");
    }
    return telemetry::load_fleet(dir);
}

void check_geometry(const telemetry::FleetDataset& ds, const evaluation::ExperimentConfig& cfg) {
    const auto& a = ds.window;
    const auto& b = cfg.generator.window;
    if (a.train_len != b.train_len || a.stam_train_len != b.stam_train_len || a.lookback != b.lookback ||
        a.horizon != b.horizon) {
        throw ConfigError("dataset window geometry " + telemetry::to_json(a).dump() +
                          " differs from the config's generator.window " + telemetry::to_json(b).dump());
    }
}

bool uses(const evaluation::ExperimentConfig& cfg, evaluation::Mode m) {
    return std::find(cfg.modes.begin(), cfg.modes.end(), m) != cfg.modes.end();
}

// ---------------------------------------------------------------------------

int cmd_validate_config(const Options& o) {
    const auto cfg = resolve_config(o);
    std::cout << nlohmann::json{{"valid", true}, {"config_hash", evaluation::config_hash(cfg)}, {"scale", cfg.scale}}.dump()
              << '\n';
    if (!o.out.empty()) {
        const auto out = prepare_out(o);
        write_manifest(out, "validate-config", o, cfg, o.seed);
    }
    return ok;
}

int cmd_gen_data(const Options& o) {
    const auto cfg = resolve_config(o);
    const auto seed = require_seed(o);
    const auto out = prepare_out(o);
    log_line("generating fleet (seed " + std::to_string(seed) + ")");
    const auto ds = telemetry::generate_fleet(cfg.generator, seed);
    telemetry::save_fleet(ds, out,
                          {{"seed", seed},
                           {"config_hash", evaluation::config_hash(cfg)},
                           {"generator", telemetry::to_json(cfg.generator)}});
    write_manifest(out, "gen-data", o, cfg, seed);
    log_line("wrote " + std::to_string(ds.vehicles.size()) + " vehicles to " + out.string());
    return ok;
}

int cmd_train(const Options& o) {
    const auto cfg = resolve_config(o);
    const auto seed = require_seed(o);
    const auto ds = load_data(o);
    check_geometry(ds, cfg);
    const auto out = prepare_out(o);
    const bool pipeline = uses(cfg, evaluation::Mode::stam_only) || uses(cfg, evaluation::Mode::stam_plus_vae);
    const auto models = evaluation::train_vehicle_models(ds, cfg, seed, o.jobs, pipeline,
                                                         uses(cfg, evaluation::Mode::lstm_direct), log_line);
    evaluation::save_vehicle_models(models, out);
    if (uses(cfg, evaluation::Mode::stam_plus_vae)) {
        log_line("training latent state model");
        vae::VaeHistory history;
        const auto states = evaluation::train_state_model(ds, cfg, seed, &history);
        numerics::write_json(vae::to_json(states), out / "latent_states.json");
        log_line("VAE ELBO " + std::to_string(history.elbo.front()) + " -> " + std::to_string(history.elbo.back()));
    }
    write_manifest(out, "train", o, cfg, seed);
    return ok;
}

int cmd_forecast(const Options& o) {
    const auto cfg = resolve_config(o);
    const auto seed = require_seed(o);
    const auto ds = load_data(o);
    check_geometry(ds, cfg);
    if (o.vehicle.empty()) {
        throw ConfigError("--vehicle is required");
    }
    if (!ds.is_in_sample(o.vehicle)) {
        throw InputError("vehicle " + o.vehicle + " is not an in-sample vehicle of the dataset");
    }
    const auto models = evaluation::load_vehicle_models(require_dir(o.models, "--models"));
    if (!models.deepar.count(o.vehicle)) {
        throw InputError("no trained forecaster for " + o.vehicle + " in " + o.models);
    }
    const auto& v = ds.vehicle(o.vehicle);
    const auto& w = ds.window;
    const Index t0 = o.t0 ? static_cast<Index>(*o.t0) : ds.starts(o.vehicle).front();
    try {
        w.at(t0).validate(v.length());
    } catch (const telemetry::DataError& e) {
        throw InputError(e.what());
    }
    const auto out = prepare_out(o);
    const auto rs = numerics::RandomStream(seed).child("window/" + o.vehicle + "/" + std::to_string(t0));
    const Matrix recent = v.sensors.middleRows(t0 - w.stam_train_len, w.stam_train_len);
    const auto stam_fit = stam::train_stam(recent, cfg.stam, rs.child("stam").seed());
    const Matrix generated = stam::generate_covariates(stam_fit.model, recent.bottomRows(w.lookback), w.horizon);
    const auto& q = models.deepar.at(o.vehicle).model;
    const Index ctx = std::min(q.config().context + 1, t0);
    const auto fr = deepar::forecast(q, telemetry::slice_window(v, t0 - ctx, ctx), generated, w.horizon,
                                     q.config().n_samples, rs.child("forecast_stam").seed());
    const std::span<const std::uint8_t> future(v.faults.data() + t0, static_cast<std::size_t>(w.horizon));
    const auto ttf = telemetry::extract_time_to_first_fault(future, v.sample_rate);

    nlohmann::json j;
    j["vehicle_id"] = o.vehicle;
    j["t0"] = t0;
    j["horizon"] = w.horizon;
    j["mean"] = fr.mean;
    j["mean_probability"] = fr.mean_probability;
    for (std::size_t i = 0; i < fr.quantile_levels.size(); ++i) {
        std::ostringstream key;
        key << "q" << fr.quantile_levels[i];
        j["quantiles"][key.str()] = fr.quantiles[i];
    }
    j["observed_fault_in_window"] = ttf.has_value();
    j["observed_ttf_seconds"] = ttf ? nlohmann::json(*ttf) : nlohmann::json(nullptr);
    write_text(out / "forecast.json", j.dump(2) + "\n");
    {
        std::ofstream csv(out / "covariates.csv", std::ios::binary | std::ios::trunc);
        csv << std::setprecision(17) << "t";
        for (const auto& name : telemetry::sensor_names()) {
            csv << ',' << name;
        }
        csv << '\n';
        for (Index t = 0; t < generated.rows(); ++t) {
            csv << t0 + t;
            for (Index c = 0; c < generated.cols(); ++c) {
                csv << ',' << generated(t, c);
            }
            csv << '\n';
        }
    }
    write_manifest(out, "forecast", o, cfg, seed);
    return ok;
}

int cmd_simulate_states(const Options& o) {
    auto cfg = resolve_config(o);
    const auto seed = require_seed(o);
    const auto ds = load_data(o);
    check_geometry(ds, cfg);
    const auto out = prepare_out(o);
    evaluation::VehicleModels models;
    if (!o.models.empty()) {
        models = evaluation::load_vehicle_models(o.models);
    } else {
        models = evaluation::train_vehicle_models(ds, cfg, seed, o.jobs, true, false, log_line);
    }
    std::optional<vae::LatentStateModel> states;
    if (!o.models.empty() && fs::exists(fs::path(o.models) / "latent_states.json")) {
        states = vae::state_model_from_json(numerics::read_json(fs::path(o.models) / "latent_states.json"));
    } else {
        states = evaluation::train_state_model(ds, cfg, seed);
    }
    const auto windows = evaluation::build_window_results(ds, cfg, models, &*states,
                                                          {evaluation::Mode::stam_plus_vae}, seed, o.jobs, log_line);
    const auto classifier = evaluation::train_state_classifier(windows, cfg, seed);
    const auto rates = evaluation::simulate_state_fault_rates(
        ds, *states, models, windows,
        [&](const std::vector<double>& f) { return heads::classify(classifier, f).label; }, cfg.samples_per_state,
        cfg, seed, o.jobs);
    evaluation::ExperimentReport r;
    r.seed = seed;
    r.config_hash = evaluation::config_hash(cfg);
    r.scale = cfg.scale;
    r.state_rates = rates;
    r.latent = states;
    emit_report(r, out);
    for (const auto& s : rates) {
        std::cout << "state " << s.state << ": rate " << s.rate << " (" << s.positives << "/" << s.samples
                  << "), modal location " << s.summary.modal_location << '\n';
    }
    write_manifest(out, "simulate-states", o, cfg, seed);
    return ok;
}

int cmd_evaluate(const Options& o) {
    const auto cfg = resolve_config(o);
    const auto seed = require_seed(o);
    const auto ds = o.data.empty() ? telemetry::generate_fleet(cfg.generator, seed) : load_data(o);
    check_geometry(ds, cfg);
    const auto out = prepare_out(o);
    std::optional<evaluation::VehicleModels> models;
    if (!o.models.empty()) {
        models = evaluation::load_vehicle_models(o.models);
    }
    const auto report = evaluation::run_experiment(ds, cfg, seed, o.jobs, log_line, models ? &*models : nullptr);
    evaluation::emit_report(report, out);
    write_manifest(out, "evaluate", o, cfg, seed);
    for (const auto& m : report.results) {
        std::cout << std::left << std::setw(14) << evaluation::to_string(m.mode) << " mean AUC " << std::fixed
                  << std::setprecision(4) << m.mean_auc << "  (permuted labels " << m.permutation_mean_auc << ")\n";
    }
    return ok;
}

int cmd_report(const Options& o) {
    const auto dir = require_dir(o.in.empty() ? o.out : o.in, "--in");
    const auto j = read_json_file(dir / "report.json");
    const auto errors = evaluation::validate_json(j, evaluation::report_schema());
    if (!errors.empty()) {
        for (const auto& e : errors) {
            std::cerr << "schema: " << e << '\n';
        }
        throw InputError(std::to_string(errors.size()) + " schema violations in " + (dir / "report.json").string());
    }
    std::cout << "report " << (dir / "report.json").string() << " (seed " << j["seed"] << ", config "
              << j["config_hash"].get<std::string>() << ")\n";
    std::cout << std::fixed << std::setprecision(4);
    for (const auto& [mode, m] : j["modes"].items()) {
        std::cout << "  " << std::left << std::setw(14) << mode << " mean AUC " << m["mean_auc"].get<double>()
                  << "  permuted " << m["permutation_mean_auc"].get<double>() << '\n';
    }
    if (!j["improvement"].is_null()) {
        std::cout << "  stam_plus_vae - stam_only: " << j["improvement"]["absolute"].get<double>() << " absolute, "
                  << 100.0 * j["improvement"]["relative"].get<double>() << "% relative\n";
    }
    const auto& ttf = j["ttf"];
    if (ttf["evaluated"].get<bool>()) {
        std::cout << "  time to first fault: r2 " << ttf["r_squared"].get<double>() << " (mean predictor "
                  << ttf["mean_baseline_r_squared"].get<double>() << "), max abs error "
                  << ttf["max_abs_error_seconds"].get<double>() << " s\n";
    } else if (!ttf["notice"].get<std::string>().empty()) {
        std::cout << "  " << ttf["notice"].get<std::string>() << '\n';
    }
    for (const auto& s : j["state_rates"]) {
        std::cout << "  state " << s["state"] << ": fault rate " << s["rate"].get<double>() << ", modal location "
                  << s["metadata"]["modal_location"] << '\n';
    }
    return ok;
}

void print_error(const std::string& kind, const std::string& message) {
    std::cerr << nlohmann::json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << '\n';
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Generative fault forecasting pipeline on vehicle telemetry"};
    app.require_subcommand(1);
    Options o;

    auto common = [&](CLI::App* sub, bool with_mode) {
        sub->add_option("--config", o.config_path, "JSON experiment config")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "Run seed");
        sub->add_option("--scale", o.scale, "Preset")->check(CLI::IsMember({"desk", "paper"}));
        sub->add_option("--jobs", o.jobs, "Worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
        sub->add_option("--out", o.out, "Output directory");
        if (with_mode) {
            sub->add_option("--mode", o.mode, "Restrict to one mode")
                ->check(CLI::IsMember({"stam_only", "stam_plus_vae", "lstm_direct", "stam_direct"}));
        }
    };

    auto* validate = app.add_subcommand("validate-config", "Check a config and print its hash");
    common(validate, true);
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic fleet");
    common(gen, false);
    auto* train = app.add_subcommand("train", "Train per-vehicle forecasters and the latent state model");
    common(train, true);
    train->add_option("--data", o.data, "Fleet directory");
    auto* fc = app.add_subcommand("forecast", "Forecast one window with generated covariates");
    common(fc, false);
    fc->add_option("--data", o.data, "Fleet directory");
    fc->add_option("--models", o.models, "Directory written by train");
    fc->add_option("--vehicle", o.vehicle, "In-sample vehicle id");
    fc->add_option("--t0", o.t0, "Forecast start (default: the vehicle's first start time)");
    auto* sim = app.add_subcommand("simulate-states", "State-conditioned fault-rate simulation");
    common(sim, false);
    sim->add_option("--data", o.data, "Fleet directory");
    sim->add_option("--models", o.models, "Directory written by train (optional)");
    auto* eval = app.add_subcommand("evaluate", "Run the full evaluation protocol");
    common(eval, true);
    eval->add_option("--data", o.data, "Fleet directory (default: generate from config and seed)");
    eval->add_option("--models", o.models, "Directory written by train (optional)");
    auto* rep = app.add_subcommand("report", "Validate and summarize a report directory");
    rep->add_option("--in", o.in, "Directory holding report.json");
    rep->add_option("--out", o.out, "Alias of --in");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return usage;
    }

    try {
        if (*validate) return cmd_validate_config(o);
        if (*gen) return cmd_gen_data(o);
        if (*train) return cmd_train(o);
        if (*fc) return cmd_forecast(o);
        if (*sim) return cmd_simulate_states(o);
        if (*eval) return cmd_evaluate(o);
        if (*rep) return cmd_report(o);
    } catch (const ConfigError& e) {
        print_error("config", e.what());
        return bad_config;
    } catch (const InputError& e) {
        print_error("input", e.what());
        return bad_input;
    } catch (const telemetry::DataError& e) {
        print_error("data", e.what());
        return bad_input;
    } catch (const std::exception& e) {
        print_error("runtime", e.what());
        return failure;
    }
    return usage;
}
