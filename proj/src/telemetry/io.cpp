#include "faultsim/telemetry/telemetry.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace faultsim::telemetry {

namespace {

std::string column_name(Index i) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "s%02d", static_cast<int>(i));
    return buf;
}

std::vector<std::string> expected_header() {
    std::vector<std::string> h = {"t", "fault"};
    for (Index i = 0; i < kSensorCount; ++i) {
        h.push_back(column_name(i));
    }
    return h;
}

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.push_back(line.substr(start));
            return out;
        }
        out.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

void append_double(std::string& out, double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, res.ptr);
}

double parse_double(std::string_view field, std::size_t row, std::size_t col) {
    double v = 0.0;
    const auto res = std::from_chars(field.data(), field.data() + field.size(), v);
    if (res.ec != std::errc() || res.ptr != field.data() + field.size()) {
        throw DataError("row " + std::to_string(row) + ", column " + std::to_string(col) + ": cannot parse '" +
                        std::string(field) + "'");
    }
    return v;
}

} // namespace

void write_vehicle_csv(const VehicleRecord& record, const std::filesystem::path& path) {
    validate(record);
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot open for writing: " + path.string());
    }
    const auto header = expected_header();
    std::string line;
    for (std::size_t i = 0; i < header.size(); ++i) {
        line += (i ? "," : "") + header[i];
    }
    out << line << '\n';
    for (Index t = 0; t < record.length(); ++t) {
        line.clear();
        line += std::to_string(t);
        line += ',';
        line += record.faults[static_cast<std::size_t>(t)] ? '1' : '0';
        for (Index s = 0; s < kSensorCount; ++s) {
            line += ',';
            append_double(line, record.sensors(t, s));
        }
        out << line << '\n';
    }
    if (!out) {
        throw DataError("write failed: " + path.string());
    }
}

VehicleRecord load_vehicle_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open: " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw DataError(path.string() + ": empty file");
    }
    const auto header = split_commas(line);
    const auto expected = expected_header();
    if (header.size() != expected.size()) {
        for (const auto& name : expected) {
            if (std::find(header.begin(), header.end(), name) == header.end()) {
                throw DataError(path.string() + ": schema error, missing column '" + name + "' (" +
                                std::to_string(header.size()) + " columns, expected " +
                                std::to_string(expected.size()) + ")");
            }
        }
        throw DataError(path.string() + ": schema error, " + std::to_string(header.size()) + " columns, expected " +
                        std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (header[i] != expected[i]) {
            throw DataError(path.string() + ": schema error, column " + std::to_string(i) + " is '" +
                            std::string(header[i]) + "', expected '" + expected[i] + "'");
        }
    }

    VehicleRecord rec;
    rec.vehicle_id = path.stem().string();
    std::vector<double> values;
    std::size_t row = 0;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        const auto fields = split_commas(line);
        if (fields.size() != expected.size()) {
            throw DataError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                            " columns, expected " + std::to_string(expected.size()));
        }
        if (fields[1] != "0" && fields[1] != "1") {
            throw DataError(path.string() + ": fault value '" + std::string(fields[1]) + "' outside {0,1} at row " +
                            std::to_string(row));
        }
        rec.faults.push_back(fields[1] == "1" ? 1 : 0);
        for (std::size_t c = 2; c < fields.size(); ++c) {
            const double v = parse_double(fields[c], row, c);
            if (!std::isfinite(v)) {
                throw DataError(path.string() + ": non-finite sensor value in column '" + expected[c] + "' at row " +
                                std::to_string(row));
            }
            values.push_back(v);
        }
        ++row;
    }
    rec.sensors = Eigen::Map<const Matrix>(values.data(), static_cast<Index>(row), kSensorCount);
    return rec;
}

nlohmann::json metadata_to_json(const VehicleRecord& record) {
    nlohmann::ordered_json j;
    j["vehicle_id"] = record.vehicle_id;
    j["location"] = record.metadata.location;
    j["odometer_miles"] = record.metadata.odometer_miles;
    j["engine_hours"] = record.metadata.engine_hours;
    j["subfamily"] = record.metadata.subfamily;
    j["sample_rate"] = record.sample_rate;
    return j;
}

void apply_metadata_json(const nlohmann::json& j, VehicleRecord& record) {
    record.vehicle_id = j.at("vehicle_id").get<std::string>();
    record.metadata.location = j.at("location").get<int>();
    record.metadata.odometer_miles = j.at("odometer_miles").get<double>();
    record.metadata.engine_hours = j.at("engine_hours").get<double>();
    record.metadata.subfamily = j.at("subfamily").get<int>();
    record.sample_rate = j.value("sample_rate", 1.0);
}

nlohmann::json to_json(const WindowSpec& spec) {
    nlohmann::ordered_json j;
    j["train_len"] = spec.train_len;
    j["stam_train_len"] = spec.stam_train_len;
    j["lookback"] = spec.lookback;
    j["horizon"] = spec.horizon;
    return j;
}

WindowSpec window_spec_from_json(const nlohmann::json& j, const WindowSpec& defaults) {
    WindowSpec s = defaults;
    s.train_len = j.value("train_len", s.train_len);
    s.stam_train_len = j.value("stam_train_len", s.stam_train_len);
    s.lookback = j.value("lookback", s.lookback);
    s.horizon = j.value("horizon", s.horizon);
    s.validate_geometry();
    return s;
}

nlohmann::json to_json(const GeneratorConfig& c) {
    nlohmann::ordered_json j;
    j["vehicle_count"] = c.vehicle_count;
    j["out_of_sample_count"] = c.out_of_sample_count;
    j["starts_per_vehicle"] = c.starts_per_vehicle;
    j["out_of_sample_starts"] = c.out_of_sample_starts;
    j["length"] = c.length;
    j["sample_rate"] = c.sample_rate;
    j["window"] = to_json(c.window);
    j["mean_dwell"] = c.mean_dwell;
    j["transition_weights"] = c.transition_weights;
    j["ar_coefficient"] = c.ar_coefficient;
    j["profile_seed"] = c.profile_seed;
    j["hazard_coupling"] = c.hazard_coupling;
    j["hazard_intercept"] = c.hazard_intercept;
    j["hazard_slope"] = c.hazard_slope;
    j["stress_threshold"] = c.stress_threshold;
    j["stress_dwell"] = c.stress_dwell;
    j["min_burst"] = c.min_burst;
    j["max_burst"] = c.max_burst;
    j["location_count"] = c.location_count;
    j["high_hazard_location"] = c.high_hazard_location;
    j["high_hazard_multiplier"] = c.high_hazard_multiplier;
    j["high_hazard_load_preference"] = c.high_hazard_load_preference;
    j["location_ambient"] = c.location_ambient;
    j["subfamily_count"] = c.subfamily_count;
    j["engine_hours_max"] = c.engine_hours_max;
    j["odometer_max"] = c.odometer_max;
    return j;
}

GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.vehicle_count = j.value("vehicle_count", c.vehicle_count);
    c.out_of_sample_count = j.value("out_of_sample_count", c.out_of_sample_count);
    c.starts_per_vehicle = j.value("starts_per_vehicle", c.starts_per_vehicle);
    c.out_of_sample_starts = j.value("out_of_sample_starts", c.out_of_sample_starts);
    c.length = j.value("length", c.length);
    c.sample_rate = j.value("sample_rate", c.sample_rate);
    if (j.contains("window")) {
        c.window = window_spec_from_json(j.at("window"), c.window);
    }
    c.mean_dwell = j.value("mean_dwell", c.mean_dwell);
    c.transition_weights = j.value("transition_weights", c.transition_weights);
    c.ar_coefficient = j.value("ar_coefficient", c.ar_coefficient);
    c.profile_seed = j.value("profile_seed", c.profile_seed);
    c.hazard_coupling = j.value("hazard_coupling", c.hazard_coupling);
    c.hazard_intercept = j.value("hazard_intercept", c.hazard_intercept);
    c.hazard_slope = j.value("hazard_slope", c.hazard_slope);
    c.stress_threshold = j.value("stress_threshold", c.stress_threshold);
    c.stress_dwell = j.value("stress_dwell", c.stress_dwell);
    c.min_burst = j.value("min_burst", c.min_burst);
    c.max_burst = j.value("max_burst", c.max_burst);
    c.location_count = j.value("location_count", c.location_count);
    c.high_hazard_location = j.value("high_hazard_location", c.high_hazard_location);
    c.high_hazard_multiplier = j.value("high_hazard_multiplier", c.high_hazard_multiplier);
    c.high_hazard_load_preference = j.value("high_hazard_load_preference", c.high_hazard_load_preference);
    c.location_ambient = j.value("location_ambient", c.location_ambient);
    c.subfamily_count = j.value("subfamily_count", c.subfamily_count);
    c.engine_hours_max = j.value("engine_hours_max", c.engine_hours_max);
    c.odometer_max = j.value("odometer_max", c.odometer_max);
    return c;
}

void save_fleet(const FleetDataset& dataset, const std::filesystem::path& dir, const nlohmann::json& provenance) {
    dataset.validate();
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json index;
    index["format"] = "faultsim.fleet";
    index["version"] = 1;
    index["window"] = to_json(dataset.window);
    index["in_sample"] = dataset.in_sample_ids;
    index["out_of_sample"] = dataset.out_of_sample_ids;
    nlohmann::ordered_json vehicles = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < dataset.vehicles.size(); ++i) {
        const auto& rec = dataset.vehicles[i];
        write_vehicle_csv(rec, dir / (rec.vehicle_id + ".csv"));
        std::ofstream meta(dir / (rec.vehicle_id + ".meta.json"), std::ios::binary);
        meta << metadata_to_json(rec).dump(2) << '\n';
        nlohmann::ordered_json v;
        v["vehicle_id"] = rec.vehicle_id;
        v["start_times"] = dataset.start_times[i];
        vehicles.push_back(std::move(v));
    }
    index["vehicles"] = std::move(vehicles);
    if (!provenance.is_null()) {
        index["provenance"] = provenance;
    }
    std::ofstream out(dir / "fleet.json", std::ios::binary);
    out << index.dump(2) << '\n';
    if (!out) {
        throw DataError("write failed: " + (dir / "fleet.json").string());
    }
}

FleetDataset load_fleet(const std::filesystem::path& dir) {
    std::ifstream in(dir / "fleet.json", std::ios::binary);
    if (!in) {
        throw DataError("missing fleet index: " + (dir / "fleet.json").string());
    }
    const auto index = nlohmann::json::parse(in);
    if (index.value("format", "") != "faultsim.fleet") {
        throw DataError("not a fleet index: " + (dir / "fleet.json").string());
    }
    FleetDataset ds;
    ds.window = window_spec_from_json(index.at("window"));
    ds.in_sample_ids = index.at("in_sample").get<std::vector<std::string>>();
    ds.out_of_sample_ids = index.at("out_of_sample").get<std::vector<std::string>>();
    for (const auto& v : index.at("vehicles")) {
        const auto id = v.at("vehicle_id").get<std::string>();
        VehicleRecord rec = load_vehicle_csv(dir / (id + ".csv"));
        std::ifstream meta(dir / (id + ".meta.json"), std::ios::binary);
        if (!meta) {
            throw DataError("missing metadata for vehicle '" + id + "'");
        }
        apply_metadata_json(nlohmann::json::parse(meta), rec);
        ds.vehicles.push_back(std::move(rec));
        ds.start_times.push_back(v.at("start_times").get<std::vector<Index>>());
    }
    ds.validate();
    return ds;
}

} // namespace faultsim::telemetry
