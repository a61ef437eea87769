#pragma once

#include "faultsim/numerics/tape.hpp"

#include <json.hpp>

#include <filesystem>

namespace faultsim::numerics {

using Json = nlohmann::ordered_json;

// Checkpoint layout (JSON):
//   {"format": "faultsim.params", "version": 1,
//    "params": [{"name": str, "rows": int, "cols": int, "data": [row-major doubles]}]}
// Models wrap this object with their own hyperparameters and statistics.
inline constexpr const char* kParamsFormat = "faultsim.params";
inline constexpr int kParamsVersion = 1;

Json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const Json& j);

Json params_to_json(const ParameterSet& params);
/// Overwrites values of an already-shaped set; names and shapes must match.
void params_from_json(const Json& j, ParameterSet& params);

void write_json(const Json& j, const std::filesystem::path& path);
Json read_json(const std::filesystem::path& path);

} // namespace faultsim::numerics
