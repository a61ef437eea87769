#include "faultsim/telemetry/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace faultsim::telemetry {

namespace {

struct SensorProfile {
    std::array<double, kRegimeCount> level{};
    double ambient_coupling = 0.0;
    double time_constant = 30.0;
    double season_amplitude = 0.0;
    double season_period = 120.0;
    double noise_sd = 1.0;
    double spread = 1.0;
};

// Sensors with a fixed physical role; everything else is drawn from the profile stream.
struct FixedSensor {
    Index index;
    std::array<double, kRegimeCount> level;
    double ambient_coupling;
    double time_constant;
    double noise_sd;
};

constexpr FixedSensor kFixedSensors[] = {
    {0, {80.0, 88.0, 100.0}, 0.05, 150.0, 0.5},   // coolant_temp (stress sensor)
    {1, {85.0, 95.0, 108.0}, 0.05, 200.0, 0.6},   // oil_temp
    {6, {25.0, 30.0, 38.0}, 0.8, 60.0, 0.8},      // intake_air_temp
    {12, {60.0, 75.0, 92.0}, 0.1, 240.0, 0.7},    // trans_oil_temp
    {32, {0.0, 0.5, 1.0}, 1.0, 300.0, 0.4},       // ambient_temp
    {33, {20.0, 21.0, 22.0}, 0.5, 200.0, 0.5},    // cab_temp
    {34, {35.0, 40.0, 48.0}, 0.4, 120.0, 0.6},    // ecu_temp
};

std::vector<SensorProfile> build_profiles(std::uint64_t profile_seed) {
    numerics::RandomStream rng(profile_seed);
    std::vector<SensorProfile> profiles(static_cast<std::size_t>(kSensorCount));
    for (auto& p : profiles) {
        const double idle = rng.uniform(10.0, 60.0);
        const double span = rng.uniform(5.0, 40.0) * (rng.bernoulli(0.8) ? 1.0 : -1.0);
        p.level = {idle, idle + span * rng.uniform(0.35, 0.65), idle + span};
        p.time_constant = rng.uniform(5.0, 90.0);
        p.noise_sd = std::abs(span) * rng.uniform(0.03, 0.08);
        p.season_amplitude = std::abs(span) * rng.uniform(0.05, 0.2);
        p.season_period = rng.uniform(45.0, 600.0);
        p.spread = std::abs(span);
    }
    for (const auto& f : kFixedSensors) {
        auto& p = profiles[static_cast<std::size_t>(f.index)];
        p.level = f.level;
        p.ambient_coupling = f.ambient_coupling;
        p.time_constant = f.time_constant;
        p.noise_sd = f.noise_sd;
        p.spread = std::max(1.0, std::abs(f.level[2] - f.level[0]));
        p.season_amplitude = 0.08 * p.spread;
    }
    return profiles;
}

double logistic(double x) {
    return 1.0 / (1.0 + std::exp(-x));
}

VehicleRecord simulate_vehicle(const GeneratorConfig& cfg, const std::vector<SensorProfile>& profiles,
                               std::string id, const VehicleMetadata& meta, numerics::RandomStream rng) {
    const Index n = cfg.length;
    const auto ns = static_cast<std::size_t>(kSensorCount);
    VehicleRecord rec;
    rec.vehicle_id = std::move(id);
    rec.sample_rate = cfg.sample_rate;
    rec.metadata = meta;
    rec.faults.assign(static_cast<std::size_t>(n), 0);
    rec.sensors.resize(n, kSensorCount);

    const double ambient = cfg.location_ambient[static_cast<std::size_t>(meta.location) % cfg.location_ambient.size()];
    std::vector<double> offset(ns), phase(ns), baseline(ns), noise(ns, 0.0);
    for (std::size_t s = 0; s < ns; ++s) {
        offset[s] = rng.normal(0.0, 0.03 * profiles[s].spread);
        phase[s] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }

    auto weights_from = [&](int r) {
        auto w = cfg.transition_weights[static_cast<std::size_t>(r)];
        if (meta.location == cfg.high_hazard_location) {
            w[static_cast<std::size_t>(Regime::load)] *= cfg.high_hazard_load_preference;
        }
        return w;
    };

    int regime = static_cast<int>(rng.index(kRegimeCount));
    for (std::size_t s = 0; s < ns; ++s) {
        baseline[s] = profiles[s].level[static_cast<std::size_t>(regime)] +
                      profiles[s].ambient_coupling * ambient + offset[s];
    }

    const double location_mult = meta.location == cfg.high_hazard_location ? cfg.high_hazard_multiplier : 1.0;
    const double hours_mult = 0.5 + meta.engine_hours / cfg.engine_hours_max;
    const double innovation = std::sqrt(1.0 - cfg.ar_coefficient * cfg.ar_coefficient);
    double stress_sum = 0.0;
    int burst_left = 0;

    for (Index t = 0; t < n; ++t) {
        if (t > 0 && rng.bernoulli(1.0 / cfg.mean_dwell[static_cast<std::size_t>(regime)])) {
            const auto w = weights_from(regime);
            regime = static_cast<int>(rng.categorical(w));
        }
        for (std::size_t s = 0; s < ns; ++s) {
            const auto& p = profiles[s];
            const double target = p.level[static_cast<std::size_t>(regime)] + p.ambient_coupling * ambient + offset[s];
            baseline[s] += (target - baseline[s]) / p.time_constant;
            noise[s] = cfg.ar_coefficient * noise[s] + innovation * p.noise_sd * rng.normal();
            const double season =
                p.season_amplitude * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / p.season_period + phase[s]);
            rec.sensors(t, static_cast<Index>(s)) = baseline[s] + season + noise[s];
        }

        stress_sum += rec.sensors(t, kStressSensor);
        if (t >= cfg.stress_dwell) {
            stress_sum -= rec.sensors(t - cfg.stress_dwell, kStressSensor);
        }
        const double stress = stress_sum / static_cast<double>(std::min<Index>(t + 1, cfg.stress_dwell));

        auto& z = rec.faults[static_cast<std::size_t>(t)];
        if (burst_left > 0) {
            z = 1;
            --burst_left;
            continue;
        }
        if (cfg.hazard_coupling <= 0.0) {
            continue;
        }
        const double hazard = cfg.hazard_coupling *
                              logistic(cfg.hazard_intercept + cfg.hazard_slope * (stress - cfg.stress_threshold)) *
                              location_mult * hours_mult;
        if (rng.bernoulli(hazard)) {
            const int len = cfg.min_burst + static_cast<int>(rng.index(static_cast<std::size_t>(cfg.max_burst - cfg.min_burst + 1)));
            z = 1;
            burst_left = len - 1;
        }
    }
    return rec;
}

std::string vehicle_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "veh%03d", i);
    return buf;
}

} // namespace

void GeneratorConfig::validate() const {
    if (vehicle_count <= 0) {
        throw DataError("generator: vehicle_count must be positive");
    }
    if (out_of_sample_count < 0 || out_of_sample_count >= vehicle_count) {
        throw DataError("generator: out_of_sample_count must leave at least one in-sample vehicle");
    }
    window.validate_geometry();
    if (length < window.train_len + window.horizon) {
        throw DataError("generator: series length " + std::to_string(length) + " < q + T = " +
                        std::to_string(window.train_len + window.horizon));
    }
    if (!(sample_rate > 0.0)) {
        throw DataError("generator: sample_rate must be positive");
    }
    if (starts_per_vehicle < 0 || out_of_sample_starts < 0) {
        throw DataError("generator: start-time counts must be nonnegative");
    }
    for (double d : mean_dwell) {
        if (!(d >= 1.0)) {
            throw DataError("generator: mean dwell must be >= 1 step");
        }
    }
    if (!(ar_coefficient >= 0.0 && ar_coefficient < 1.0)) {
        throw DataError("generator: ar_coefficient must be in [0, 1)");
    }
    if (hazard_coupling < 0.0) {
        throw DataError("generator: hazard_coupling must be nonnegative");
    }
    if (min_burst < 1 || max_burst < min_burst) {
        throw DataError("generator: burst lengths must satisfy 1 <= min <= max");
    }
    if (stress_dwell < 1) {
        throw DataError("generator: stress_dwell must be >= 1");
    }
    if (location_count < 1 || location_count > static_cast<int>(location_ambient.size()) ||
        high_hazard_location < 0 || high_hazard_location >= location_count) {
        throw DataError("generator: invalid location settings");
    }
    if (subfamily_count < 1 || !(engine_hours_max > 0.0) || !(odometer_max > 0.0)) {
        throw DataError("generator: invalid metadata ranges");
    }
}

FleetDataset generate_fleet(const GeneratorConfig& config, std::uint64_t seed) {
    config.validate();
    const numerics::RandomStream root(seed);
    const auto profiles = build_profiles(config.profile_seed);

    // Balanced location assignment, then independent draws for the rest.
    auto meta_rng = root.child("metadata");
    std::vector<int> locations(static_cast<std::size_t>(config.vehicle_count));
    for (int i = 0; i < config.vehicle_count; ++i) {
        locations[static_cast<std::size_t>(i)] = i % config.location_count;
    }
    const auto loc_perm = meta_rng.permutation(locations.size());

    FleetDataset ds;
    ds.window = config.window;
    for (int i = 0; i < config.vehicle_count; ++i) {
        VehicleMetadata meta;
        meta.location = locations[loc_perm[static_cast<std::size_t>(i)]];
        meta.odometer_miles = meta_rng.uniform(2000.0, config.odometer_max);
        meta.engine_hours = meta_rng.uniform(100.0, config.engine_hours_max);
        meta.subfamily = static_cast<int>(meta_rng.index(static_cast<std::size_t>(config.subfamily_count)));
        const std::string id = vehicle_name(i);
        ds.vehicles.push_back(simulate_vehicle(config, profiles, id, meta, root.child("vehicle/" + id)));
    }

    // Out-of-sample vehicles: seeded shuffle, drawn round-robin across locations
    // so the held-out set spans as many locations as its size allows.
    auto split_rng = root.child("partition");
    std::vector<std::vector<std::size_t>> by_location(static_cast<std::size_t>(config.location_count));
    for (std::size_t v : split_rng.permutation(ds.vehicles.size())) {
        by_location[static_cast<std::size_t>(ds.vehicles[v].metadata.location)].push_back(v);
    }
    const auto loc_order = split_rng.permutation(by_location.size());
    std::vector<bool> held_out(ds.vehicles.size(), false);
    int taken = 0;
    for (std::size_t round = 0; taken < config.out_of_sample_count; ++round) {
        for (std::size_t li : loc_order) {
            if (taken == config.out_of_sample_count) {
                break;
            }
            if (round < by_location[li].size()) {
                held_out[by_location[li][round]] = true;
                ++taken;
            }
        }
    }
    for (std::size_t v = 0; v < ds.vehicles.size(); ++v) {
        (held_out[v] ? ds.out_of_sample_ids : ds.in_sample_ids).push_back(ds.vehicles[v].vehicle_id);
    }

    ds.start_times.resize(ds.vehicles.size());
    for (std::size_t v = 0; v < ds.vehicles.size(); ++v) {
        const auto& rec = ds.vehicles[v];
        const std::size_t count = static_cast<std::size_t>(held_out[v] ? config.out_of_sample_starts
                                                                         : config.starts_per_vehicle);
        ds.start_times[v] = random_start_times(rec, count, config.window,
                                               root.child("starts/" + rec.vehicle_id).engine()());
    }
    return ds;
}

double fault_window_rate(const FleetDataset& dataset) {
    const Index q = dataset.window.train_len;
    const Index horizon = dataset.window.horizon;
    std::size_t windows = 0;
    std::size_t positive = 0;
    for (const auto& rec : dataset.vehicles) {
        std::vector<Index> prefix(static_cast<std::size_t>(rec.length()) + 1, 0);
        for (Index t = 0; t < rec.length(); ++t) {
            prefix[static_cast<std::size_t>(t) + 1] = prefix[static_cast<std::size_t>(t)] + rec.faults[static_cast<std::size_t>(t)];
        }
        for (Index t0 = q; t0 + horizon <= rec.length(); ++t0) {
            ++windows;
            positive += prefix[static_cast<std::size_t>(t0 + horizon)] > prefix[static_cast<std::size_t>(t0)];
        }
    }
    return windows == 0 ? 0.0 : static_cast<double>(positive) / static_cast<double>(windows);
}

const std::array<std::string, kSensorCount>& sensor_names() {
    static const std::array<std::string, kSensorCount> names = {
        "coolant_temp", "oil_temp", "oil_pressure", "engine_speed", "engine_load", "fuel_rate",
        "intake_air_temp", "boost_pressure", "exhaust_gas_temp", "throttle_position", "fuel_pressure",
        "crankcase_pressure", "trans_oil_temp", "output_shaft_speed", "input_shaft_speed", "converter_slip",
        "trans_line_pressure", "clutch_pressure", "trans_load", "retarder_temp", "shift_rate", "trans_sump_level",
        "air_pressure_primary", "air_pressure_secondary", "brake_temp_fl", "brake_temp_fr", "brake_temp_rl",
        "brake_temp_rr", "abs_activity", "wheel_speed", "battery_voltage", "alternator_current", "ambient_temp",
        "cab_temp", "ecu_temp", "starter_current", "bus_load", "aux_current"};
    return names;
}

const std::array<std::string, kSensorCount>& default_subsystems() {
    static const std::array<std::string, kSensorCount> map = [] {
        std::array<std::string, kSensorCount> m;
        for (Index i = 0; i < kSensorCount; ++i) {
            m[static_cast<std::size_t>(i)] = i < 12 ? "engine" : i < 22 ? "transmission" : i < 30 ? "brakes" : "electrical";
        }
        return m;
    }();
    return map;
}

} // namespace faultsim::telemetry
