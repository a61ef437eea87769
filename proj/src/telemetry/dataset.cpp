#include "faultsim/telemetry/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace faultsim::telemetry {

bool VehicleRecord::operator==(const VehicleRecord& other) const {
    return vehicle_id == other.vehicle_id && sample_rate == other.sample_rate && faults == other.faults &&
           sensors.rows() == other.sensors.rows() && sensors.cols() == other.sensors.cols() &&
           sensors == other.sensors && metadata == other.metadata;
}

void validate(const VehicleRecord& record) {
    const std::string who = "vehicle '" + record.vehicle_id + "': ";
    if (!(record.sample_rate > 0.0) || !std::isfinite(record.sample_rate)) {
        throw DataError(who + "sample rate must be positive");
    }
    if (record.sensors.cols() != kSensorCount) {
        throw DataError(who + "expected " + std::to_string(kSensorCount) + " sensors, found " +
                        std::to_string(record.sensors.cols()));
    }
    if (record.sensors.rows() != record.length()) {
        throw DataError(who + "sensor length " + std::to_string(record.sensors.rows()) +
                        " differs from fault length " + std::to_string(record.length()));
    }
    for (Index t = 0; t < record.length(); ++t) {
        if (record.faults[static_cast<std::size_t>(t)] > 1) {
            throw DataError(who + "fault value out of {0,1} at step " + std::to_string(t));
        }
    }
    if (!record.sensors.allFinite()) {
        throw DataError(who + "non-finite sensor value");
    }
    if (!(record.metadata.odometer_miles >= 0.0) || !(record.metadata.engine_hours >= 0.0)) {
        throw DataError(who + "odometer and engine hours must be nonnegative");
    }
}

void WindowSpec::validate_geometry() const {
    if (horizon < 1) {
        throw DataError("window: horizon must be >= 1");
    }
    if (lookback < 1 || lookback > stam_train_len) {
        throw DataError("window: lookback must be in [1, b]");
    }
    if (stam_train_len > train_len) {
        throw DataError("window: recent training length b must not exceed q");
    }
}

void WindowSpec::validate(Index n) const {
    validate_geometry();
    if (t0 < train_len) {
        throw DataError("window: t0 " + std::to_string(t0) + " < q " + std::to_string(train_len));
    }
    if (t0 + horizon > n) {
        throw DataError("window: t0 + T = " + std::to_string(t0 + horizon) + " exceeds length " + std::to_string(n));
    }
}

SeriesSlice slice_window(const VehicleRecord& record, Index start, Index len) {
    if (start < 0 || len < 0 || start + len > record.length()) {
        throw DataError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                        ") outside series of length " + std::to_string(record.length()));
    }
    SeriesSlice s;
    s.faults.assign(record.faults.begin() + start, record.faults.begin() + start + len);
    s.sensors = record.sensors.middleRows(start, len);
    return s;
}

std::optional<double> extract_time_to_first_fault(std::span<const std::uint8_t> faults, double sample_rate) {
    const auto it = std::find(faults.begin(), faults.end(), std::uint8_t{1});
    if (it == faults.end()) {
        return std::nullopt;
    }
    return static_cast<double>(it - faults.begin()) / sample_rate;
}

std::vector<Index> random_start_times(const VehicleRecord& record, std::size_t count, const WindowSpec& spec,
                                      std::uint64_t seed) {
    spec.validate_geometry();
    if (count == 0) {
        return {};
    }
    const Index first = spec.train_len;
    const Index last = record.length() - spec.horizon;
    const Index available = last >= first ? last - first + 1 : 0;
    if (static_cast<Index>(count) > available) {
        throw DataError("vehicle '" + record.vehicle_id + "': " + std::to_string(count) +
                        " start times requested but only " + std::to_string(available) + " valid");
    }
    numerics::RandomStream rng(seed);
    const auto perm = rng.permutation(static_cast<std::size_t>(available));
    std::vector<Index> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(first + static_cast<Index>(perm[i]));
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::size_t FleetDataset::index_of(const std::string& id) const {
    for (std::size_t i = 0; i < vehicles.size(); ++i) {
        if (vehicles[i].vehicle_id == id) {
            return i;
        }
    }
    throw DataError("unknown vehicle '" + id + "'");
}

const VehicleRecord& FleetDataset::vehicle(const std::string& id) const {
    return vehicles[index_of(id)];
}

bool FleetDataset::is_in_sample(const std::string& id) const {
    return std::find(in_sample_ids.begin(), in_sample_ids.end(), id) != in_sample_ids.end();
}

void FleetDataset::validate() const {
    std::set<std::string> ids;
    for (const auto& v : vehicles) {
        telemetry::validate(v);
        if (!ids.insert(v.vehicle_id).second) {
            throw DataError("duplicate vehicle id '" + v.vehicle_id + "'");
        }
    }
    std::set<std::string> in(in_sample_ids.begin(), in_sample_ids.end());
    for (const auto& id : out_of_sample_ids) {
        if (in.count(id) != 0) {
            throw DataError("vehicle '" + id + "' is both in-sample and out-of-sample");
        }
    }
    for (const auto& id : in_sample_ids) {
        index_of(id);
    }
    for (const auto& id : out_of_sample_ids) {
        index_of(id);
    }
    if (start_times.size() != vehicles.size()) {
        throw DataError("start-time table does not match vehicle count");
    }
    for (std::size_t i = 0; i < vehicles.size(); ++i) {
        for (Index t0 : start_times[i]) {
            window.at(t0).validate(vehicles[i].length());
        }
    }
}

} // namespace faultsim::telemetry
