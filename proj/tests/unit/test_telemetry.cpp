#include "faultsim/telemetry/telemetry.hpp"

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace faultsim;
using namespace faultsim::telemetry;

namespace {

GeneratorConfig small_config() {
    GeneratorConfig c;
    c.vehicle_count = 4;
    c.out_of_sample_count = 1;
    c.starts_per_vehicle = 5;
    c.out_of_sample_starts = 5;
    c.window.train_len = 3600;
    c.length = 4400;
    return c;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("faultsim_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

VehicleRecord tiny_record(Index n) {
    VehicleRecord r;
    r.vehicle_id = "veh_tiny";
    r.faults.assign(static_cast<std::size_t>(n), 0);
    r.sensors = Matrix(n, kSensorCount);
    numerics::RandomStream rng(5);
    for (Index i = 0; i < r.sensors.size(); ++i) {
        r.sensors.data()[i] = rng.normal(0.0, 1e3) / 7.0;
    }
    for (Index t = 0; t < n; t += 3) {
        r.faults[static_cast<std::size_t>(t)] = 1;
    }
    r.metadata = {2, 12345.678, 987.125, 1};
    return r;
}

std::string header_line() {
    std::string h = "t,fault";
    for (int i = 0; i < kSensorCount; ++i) {
        h += ",s" + std::string(i < 10 ? "0" : "") + std::to_string(i);
    }
    return h;
}

} // namespace

TEST_CASE("zero hazard coupling yields no faults") {
    auto cfg = small_config();
    cfg.hazard_coupling = 0.0;
    const auto fleet = generate_fleet(cfg, 11);
    for (const auto& v : fleet.vehicles) {
        CHECK(std::all_of(v.faults.begin(), v.faults.end(), [](auto f) { return f == 0; }));
    }
}

TEST_CASE("generation is deterministic in config and seed") {
    const auto cfg = small_config();
    const auto a = generate_fleet(cfg, 3);
    const auto b = generate_fleet(cfg, 3);
    REQUIRE(a.vehicles.size() == b.vehicles.size());
    for (std::size_t i = 0; i < a.vehicles.size(); ++i) {
        CHECK(a.vehicles[i] == b.vehicles[i]);
    }
    CHECK(a.in_sample_ids == b.in_sample_ids);
    CHECK(a.start_times == b.start_times);

    const auto da = temp_dir("det_a");
    const auto db = temp_dir("det_b");
    save_fleet(a, da);
    save_fleet(b, db);
    for (const auto& v : a.vehicles) {
        CHECK(read_file(da / (v.vehicle_id + ".csv")) == read_file(db / (v.vehicle_id + ".csv")));
    }
    CHECK(read_file(da / "fleet.json") == read_file(db / "fleet.json"));

    const auto c = generate_fleet(cfg, 4);
    CHECK_FALSE(c.vehicles[0] == a.vehicles[0]);
}

TEST_CASE("default fleet at seed 7 has a moderate fault-window rate") {
    const auto fleet = generate_fleet(GeneratorConfig{}, 7);
    fleet.validate();
    // Independent count over every valid window.
    const auto& w = fleet.window;
    long hits = 0;
    long total = 0;
    for (const auto& v : fleet.vehicles) {
        for (Index t0 = w.train_len; t0 + w.horizon <= v.length(); ++t0) {
            bool any = false;
            for (Index t = t0; t < t0 + w.horizon && !any; ++t) {
                any = v.faults[static_cast<std::size_t>(t)] == 1;
            }
            hits += any ? 1 : 0;
            ++total;
        }
    }
    const double rate = static_cast<double>(hits) / static_cast<double>(total);
    CHECK(rate >= 0.05);
    CHECK(rate <= 0.15);
    CHECK(fault_window_rate(fleet) == doctest::Approx(rate).epsilon(1e-12));
}

TEST_CASE("generated fleets satisfy record and partition invariants") {
    for (std::uint64_t seed : {1u, 2u, 9u}) {
        const auto fleet = generate_fleet(small_config(), seed);
        CHECK_NOTHROW(fleet.validate());
        std::set<std::string> in(fleet.in_sample_ids.begin(), fleet.in_sample_ids.end());
        for (const auto& id : fleet.out_of_sample_ids) {
            CHECK(in.count(id) == 0);
        }
        CHECK(fleet.in_sample_ids.size() + fleet.out_of_sample_ids.size() == fleet.vehicles.size());
        for (std::size_t i = 0; i < fleet.vehicles.size(); ++i) {
            for (Index t0 : fleet.start_times[i]) {
                CHECK(t0 - fleet.window.train_len >= 0);
                CHECK(t0 + fleet.window.horizon <= fleet.vehicles[i].length());
            }
        }
    }
}

TEST_CASE("invalid generator configs are rejected") {
    auto cfg = small_config();
    cfg.vehicle_count = 0;
    CHECK_THROWS_AS(generate_fleet(cfg, 1), DataError);
    cfg = small_config();
    cfg.length = cfg.window.train_len + cfg.window.horizon - 1;
    CHECK_THROWS_AS(generate_fleet(cfg, 1), DataError);
}

TEST_CASE("validator catches broken records") {
    auto r = tiny_record(10);
    CHECK_NOTHROW(validate(r));
    auto bad = r;
    bad.faults[4] = 2;
    CHECK_THROWS_AS(validate(bad), DataError);
    bad = r;
    bad.sensors(3, 5) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(validate(bad), DataError);
    bad = r;
    bad.sensors = Matrix::Zero(10, kSensorCount - 1);
    CHECK_THROWS_AS(validate(bad), DataError);
    bad = r;
    bad.faults.pop_back();
    CHECK_THROWS_AS(validate(bad), DataError);
    bad = r;
    bad.metadata.engine_hours = -1.0;
    CHECK_THROWS_AS(validate(bad), DataError);
}

TEST_CASE("csv round trip is exact") {
    const auto dir = temp_dir("csv");
    auto r = tiny_record(10);
    r.sensors(0, 0) = 0.1 + 0.2;
    r.sensors(1, 1) = 1e-300;
    r.sensors(2, 2) = -123456789.123456789;
    write_vehicle_csv(r, dir / "v.csv");
    auto back = load_vehicle_csv(dir / "v.csv");
    back.vehicle_id = r.vehicle_id;
    back.metadata = r.metadata;
    CHECK(back == r);

    const auto fleet = generate_fleet(small_config(), 21);
    save_fleet(fleet, dir / "fleet");
    const auto loaded = load_fleet(dir / "fleet");
    REQUIRE(loaded.vehicles.size() == fleet.vehicles.size());
    for (std::size_t i = 0; i < fleet.vehicles.size(); ++i) {
        CHECK(loaded.vehicles[i] == fleet.vehicles[i]);
    }
    CHECK(loaded.out_of_sample_ids == fleet.out_of_sample_ids);
    CHECK(loaded.start_times == fleet.start_times);
}

TEST_CASE("csv with a missing column names it") {
    const auto dir = temp_dir("csv_missing");
    std::string h = header_line();
    h = h.substr(0, h.rfind(','));
    std::string row = "0,0";
    for (int i = 0; i < kSensorCount - 1; ++i) {
        row += ",1.5";
    }
    write_file(dir / "v.csv", h + "\n" + row + "\n");
    try {
        load_vehicle_csv(dir / "v.csv");
        FAIL("expected a schema error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("s37") != std::string::npos);
    }
}

TEST_CASE("csv with a non-binary fault reports the row") {
    const auto dir = temp_dir("csv_fault");
    std::string body = header_line() + "\n";
    for (int t = 0; t < 3; ++t) {
        body += std::to_string(t) + (t == 2 ? ",2" : ",0");
        for (int i = 0; i < kSensorCount; ++i) {
            body += ",0.25";
        }
        body += "\n";
    }
    write_file(dir / "v.csv", body);
    try {
        load_vehicle_csv(dir / "v.csv");
        FAIL("expected a domain error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }

    std::string nonfinite = header_line() + "\n0,0";
    for (int i = 0; i < kSensorCount; ++i) {
        nonfinite += i == 7 ? ",nan" : ",1";
    }
    write_file(dir / "w.csv", nonfinite + "\n");
    CHECK_THROWS_AS(load_vehicle_csv(dir / "w.csv"), DataError);
}

TEST_CASE("slice_window") {
    const auto fleet = generate_fleet(small_config(), 5);
    const auto& r = fleet.vehicles[0];
    const auto whole = slice_window(r, 0, r.length());
    CHECK(whole.faults == r.faults);
    CHECK(whole.sensors == r.sensors);

    CHECK_THROWS_AS(slice_window(r, r.length() - 1, 2), DataError);
    CHECK_THROWS_AS(slice_window(r, -1, 2), DataError);

    const auto s = slice_window(r, 100, 50);
    REQUIRE(s.length() == 50);
    for (Index k = 0; k < 50; ++k) {
        CHECK(s.faults[static_cast<std::size_t>(k)] == r.faults[static_cast<std::size_t>(100 + k)]);
        for (Index c = 0; c < kSensorCount; ++c) {
            CHECK(s.sensors(k, c) == r.sensors(100 + k, c));
        }
    }
}

TEST_CASE("time to first fault") {
    const std::vector<std::uint8_t> a{0, 0, 1, 0, 1};
    CHECK(*extract_time_to_first_fault(a, 1.0) == 2.0);
    const std::vector<std::uint8_t> zeros(7, 0);
    CHECK_FALSE(extract_time_to_first_fault(zeros, 1.0).has_value());
    const std::vector<std::uint8_t> b{1, 0, 0};
    CHECK(*extract_time_to_first_fault(b, 1.0) == 0.0);
    CHECK(*extract_time_to_first_fault(a, 4.0) == 0.5);
    CHECK_FALSE(extract_time_to_first_fault(std::span<const std::uint8_t>{}, 1.0).has_value());
}

TEST_CASE("time to first fault agrees with a linear scan") {
    numerics::RandomStream rng(99);
    for (int trial = 0; trial < 1000; ++trial) {
        const auto n = 1 + rng.index(40);
        const double p = rng.uniform(0.0, 0.2);
        std::vector<std::uint8_t> z(n);
        for (auto& v : z) {
            v = rng.bernoulli(p) ? 1 : 0;
        }
        std::optional<double> expected;
        for (std::size_t i = 0; i < n; ++i) {
            if (z[i] == 1) {
                expected = static_cast<double>(i);
                break;
            }
        }
        const auto got = extract_time_to_first_fault(z, 1.0);
        REQUIRE(got.has_value() == expected.has_value());
        if (got) {
            CHECK(*got == *expected);
        }
    }
}

TEST_CASE("random start times") {
    const WindowSpec spec;
    auto r = tiny_record(spec.train_len + spec.horizon);
    CHECK(random_start_times(r, 0, spec, 1).empty());

    const auto forced = random_start_times(r, 1, spec, 1);
    REQUIRE(forced.size() == 1);
    CHECK(forced[0] == spec.train_len);
    CHECK_THROWS_AS(random_start_times(r, 2, spec, 1), DataError);

    const auto fleet = generate_fleet(small_config(), 8);
    const WindowSpec gen_spec = small_config().window;
    const auto& v = fleet.vehicles[0];
    const auto starts = random_start_times(v, 20, gen_spec, 42);
    REQUIRE(starts.size() == 20);
    CHECK(std::set<Index>(starts.begin(), starts.end()).size() == 20);
    for (Index t0 : starts) {
        CHECK(t0 >= gen_spec.train_len);
        CHECK(t0 + gen_spec.horizon <= v.length());
        CHECK_NOTHROW(gen_spec.at(t0).validate(v.length()));
    }
    CHECK(random_start_times(v, 20, gen_spec, 42) == starts);
    CHECK(random_start_times(v, 20, gen_spec, 43) != starts);
}

TEST_CASE("window geometry checks") {
    WindowSpec w;
    CHECK_NOTHROW(w.validate_geometry());
    w.stam_train_len = w.train_len + 1;
    CHECK_THROWS_AS(w.validate_geometry(), DataError);
    w = WindowSpec{};
    w.lookback = w.stam_train_len + 1;
    CHECK_THROWS_AS(w.validate_geometry(), DataError);
    w = WindowSpec{};
    w.horizon = 0;
    CHECK_THROWS_AS(w.validate_geometry(), DataError);
    w = WindowSpec{};
    CHECK_THROWS_AS(w.at(w.train_len - 1).validate(10000), DataError);
    CHECK_THROWS_AS(w.at(w.train_len).validate(w.train_len + w.horizon - 1), DataError);
}
