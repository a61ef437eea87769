#pragma once

#include "faultsim/numerics/matrix.hpp"
#include "faultsim/numerics/random.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace faultsim::telemetry {

inline constexpr Index kSensorCount = 38;

/// Malformed or out-of-domain telemetry.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct VehicleMetadata {
    int location = 0;
    double odometer_miles = 0.0;
    double engine_hours = 0.0;
    int subfamily = 0;

    bool operator==(const VehicleMetadata&) const = default;
};

/// One vehicle's aligned fault indicator and sensor series. Row t of
/// `sensors` is time step t; `faults[t]` is the indicator at the same step.
struct VehicleRecord {
    std::string vehicle_id;
    double sample_rate = 1.0;  // samples per second
    std::vector<std::uint8_t> faults;
    Matrix sensors;            // N x kSensorCount
    VehicleMetadata metadata;

    Index length() const { return static_cast<Index>(faults.size()); }
    bool operator==(const VehicleRecord& other) const;
};

/// Throws DataError describing the first violated invariant.
void validate(const VehicleRecord& record);

/// Window geometry in steps: t0 start, q training length, b recent-model
/// training length, lookback, and horizon T.
struct WindowSpec {
    Index t0 = 0;
    Index train_len = 10800;
    Index stam_train_len = 900;
    Index lookback = 120;
    Index horizon = 300;

    /// Geometry-only checks (b <= q, lookback <= b, T >= 1).
    void validate_geometry() const;
    /// Full check of the window [t0 - q, t0 + T] against a series of length n.
    void validate(Index n) const;
    WindowSpec at(Index start) const {
        WindowSpec s = *this;
        s.t0 = start;
        return s;
    }
};

struct SeriesSlice {
    std::vector<std::uint8_t> faults;
    Matrix sensors;

    Index length() const { return static_cast<Index>(faults.size()); }
};

SeriesSlice slice_window(const VehicleRecord& record, Index start, Index len);

/// Seconds from the first element to the first 1, or nullopt when none.
std::optional<double> extract_time_to_first_fault(std::span<const std::uint8_t> faults, double sample_rate);

/// `count` distinct start indices t0 in [q, N - T], sorted ascending.
std::vector<Index> random_start_times(const VehicleRecord& record, std::size_t count, const WindowSpec& spec,
                                      std::uint64_t seed);

struct FleetDataset {
    std::vector<VehicleRecord> vehicles;
    std::vector<std::string> in_sample_ids;
    std::vector<std::string> out_of_sample_ids;
    std::vector<std::vector<Index>> start_times;  // parallel to `vehicles`
    WindowSpec window;

    const VehicleRecord& vehicle(const std::string& id) const;
    std::size_t index_of(const std::string& id) const;
    const std::vector<Index>& starts(const std::string& id) const { return start_times[index_of(id)]; }
    bool is_in_sample(const std::string& id) const;

    /// Checks every record plus the partition and start-time invariants.
    void validate() const;
};

// ---------------------------------------------------------------------------
// Synthetic fleet generator.

enum class Regime : int { idle = 0, drive = 1, load = 2 };
inline constexpr int kRegimeCount = 3;

struct GeneratorConfig {
    int vehicle_count = 14;
    int out_of_sample_count = 4;
    int starts_per_vehicle = 20;
    int out_of_sample_starts = 40;
    Index length = 14400;
    double sample_rate = 1.0;
    WindowSpec window;

    // Hidden regime chain: mean dwell (seconds) per regime and transition
    // weights; the high-hazard location multiplies the weight of entering load.
    std::array<double, kRegimeCount> mean_dwell{480.0, 720.0, 360.0};
    std::array<std::array<double, kRegimeCount>, kRegimeCount> transition_weights{
        {{0.0, 0.7, 0.3}, {0.55, 0.0, 0.45}, {0.35, 0.65, 0.0}}};

    // Sensor process.
    double ar_coefficient = 0.9;
    std::uint64_t profile_seed = 2024;  // fixes sensor semantics across fleets

    // Fault hazard: coupling * logistic(intercept + slope * (stress - threshold))
    // * location multiplier * engine-hours multiplier, where stress is the mean
    // of the stress sensor over the trailing dwell window.
    double hazard_coupling = 1.0;
    double hazard_intercept = -4.5;
    double hazard_slope = 1.0;
    double stress_threshold = 100.5;
    Index stress_dwell = 60;
    int min_burst = 3;
    int max_burst = 12;

    // Metadata.
    int location_count = 4;
    int high_hazard_location = 3;
    double high_hazard_multiplier = 2.0;
    double high_hazard_load_preference = 2.0;
    std::array<double, 4> location_ambient{-5.0, 8.0, 20.0, 34.0};
    int subfamily_count = 3;
    double engine_hours_max = 4000.0;
    double odometer_max = 60000.0;

    void validate() const;
};

inline constexpr Index kStressSensor = 0;

nlohmann::json to_json(const GeneratorConfig& config);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const WindowSpec& spec);
WindowSpec window_spec_from_json(const nlohmann::json& j, const WindowSpec& defaults = {});

/// Deterministic in (config, seed). Sensor baselines follow a hidden regime
/// chain; faults arrive as bursts from a hazard driven by the stress sensor
/// and scaled by location and engine hours.
FleetDataset generate_fleet(const GeneratorConfig& config, std::uint64_t seed);

/// Fraction of all valid horizon windows (every t0 in [q, N - T]) containing a fault.
double fault_window_rate(const FleetDataset& dataset);

/// Sensor names, index-aligned with sensor columns.
const std::array<std::string, kSensorCount>& sensor_names();
/// Subsystem label per sensor: engine, transmission, brakes, electrical.
const std::array<std::string, kSensorCount>& default_subsystems();

// ---------------------------------------------------------------------------
// On-disk formats.

/// Header `t,fault,s00,...,s37`; one row per step; full-precision values.
void write_vehicle_csv(const VehicleRecord& record, const std::filesystem::path& path);
/// Reads series only; metadata comes from the sidecar JSON.
VehicleRecord load_vehicle_csv(const std::filesystem::path& path);

nlohmann::json metadata_to_json(const VehicleRecord& record);
void apply_metadata_json(const nlohmann::json& j, VehicleRecord& record);

/// Directory layout: fleet.json, <id>.csv, <id>.meta.json per vehicle.
void save_fleet(const FleetDataset& dataset, const std::filesystem::path& dir, const nlohmann::json& provenance = {});
FleetDataset load_fleet(const std::filesystem::path& dir);

} // namespace faultsim::telemetry
