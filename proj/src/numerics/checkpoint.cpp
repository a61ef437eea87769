#include "faultsim/numerics/checkpoint.hpp"

#include <fstream>
#include <stdexcept>

namespace faultsim::numerics {

Json matrix_to_json(const Matrix& m) {
    Json j;
    j["rows"] = m.rows();
    j["cols"] = m.cols();
    Json data = Json::array();
    for (Index i = 0; i < m.size(); ++i) {
        data.push_back(m.data()[i]);
    }
    j["data"] = std::move(data);
    return j;
}

Matrix matrix_from_json(const Json& j) {
    const auto rows = j.at("rows").get<Index>();
    const auto cols = j.at("cols").get<Index>();
    const auto& data = j.at("data");
    if (rows < 0 || cols < 0 || static_cast<Index>(data.size()) != rows * cols) {
        throw std::runtime_error("matrix checkpoint: data length " + std::to_string(data.size()) +
                                 " does not match shape " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    Matrix m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
        m.data()[i] = data[static_cast<std::size_t>(i)].get<double>();
    }
    return m;
}

Json params_to_json(const ParameterSet& params) {
    Json j;
    j["format"] = kParamsFormat;
    j["version"] = kParamsVersion;
    Json list = Json::array();
    for (const auto& p : params) {
        Json entry;
        entry["name"] = p.name;
        Json m = matrix_to_json(p.value);
        entry["rows"] = m["rows"];
        entry["cols"] = m["cols"];
        entry["data"] = std::move(m["data"]);
        list.push_back(std::move(entry));
    }
    j["params"] = std::move(list);
    return j;
}

void params_from_json(const Json& j, ParameterSet& params) {
    if (j.at("format").get<std::string>() != kParamsFormat || j.at("version").get<int>() != kParamsVersion) {
        throw std::runtime_error("parameter checkpoint: unsupported format");
    }
    const auto& list = j.at("params");
    if (list.size() != params.size()) {
        throw std::runtime_error("parameter checkpoint: expected " + std::to_string(params.size()) +
                                 " parameters, found " + std::to_string(list.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = list[i];
        const auto name = entry.at("name").get<std::string>();
        if (name != params[i].name) {
            throw std::runtime_error("parameter checkpoint: expected '" + params[i].name + "', found '" + name + "'");
        }
        Matrix m = matrix_from_json(entry);
        if (m.rows() != params[i].value.rows() || m.cols() != params[i].value.cols()) {
            throw std::runtime_error("parameter checkpoint: shape mismatch for '" + name + "'");
        }
        params[i].value = std::move(m);
        params[i].zero_grad();
    }
}

void write_json(const Json& j, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open for writing: " + path.string());
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw std::runtime_error("write failed: " + path.string());
    }
}

Json read_json(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open: " + path.string());
    }
    return Json::parse(in);
}

} // namespace faultsim::numerics
