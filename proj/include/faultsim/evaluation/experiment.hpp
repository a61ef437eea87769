#pragma once

#include "faultsim/deepar/deepar.hpp"
#include "faultsim/evaluation/metrics.hpp"
#include "faultsim/heads/forest.hpp"
#include "faultsim/stam/stam.hpp"
#include "faultsim/telemetry/telemetry.hpp"
#include "faultsim/vae/vae.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace faultsim::evaluation {

enum class Mode { stam_only, stam_plus_vae, lstm_direct, stam_direct };
inline constexpr Mode kAllModes[] = {Mode::stam_only, Mode::stam_plus_vae, Mode::lstm_direct, Mode::stam_direct};
std::string to_string(Mode m);
Mode mode_from_string(const std::string& s);

struct ExperimentConfig {
    std::string scale = "desk";
    telemetry::GeneratorConfig generator;  // fleet shape and window geometry
    deepar::DeepArConfig deepar;
    deepar::DeepArConfig lstm_direct;      // recurrent baseline on the fault series alone
    stam::StamConfig stam;                 // lookback follows the window geometry
    vae::VaeConfig vae;
    heads::ForestConfig forest;
    int n_splits = 50;
    double train_fraction = 0.8;
    int states = 5;
    int samples_per_state = 40;
    std::size_t min_regression_positives = 10;
    std::vector<Mode> modes{kAllModes[0], kAllModes[1], kAllModes[2], kAllModes[3]};

    ExperimentConfig();
    /// Throws std::invalid_argument naming the first inconsistent field.
    void validate() const;
};

ExperimentConfig desk_preset();
ExperimentConfig paper_preset();
ExperimentConfig preset(const std::string& scale);

nlohmann::json to_json(const ExperimentConfig& c);
/// Fields absent from `j` keep the values of the preset named by j["scale"].
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
/// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

using Logger = std::function<void(const std::string&)>;

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Results must be written
/// by index; the first exception (lowest index) is rethrown after all finish.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

/// Per-vehicle recurrent models, trained once on [0, q) and reused for every t0.
struct VehicleModels {
    std::map<std::string, deepar::TrainResult> deepar;
    std::map<std::string, deepar::TrainResult> lstm_direct;
};

VehicleModels train_vehicle_models(const telemetry::FleetDataset& dataset, const ExperimentConfig& config,
                                   std::uint64_t seed, int jobs, bool need_deepar, bool need_lstm,
                                   const Logger& log = {});
void save_vehicle_models(const VehicleModels& models, const std::filesystem::path& dir);
VehicleModels load_vehicle_models(const std::filesystem::path& dir);

vae::LatentStateModel train_state_model(const telemetry::FleetDataset& dataset, const ExperimentConfig& config,
                                        std::uint64_t seed, vae::VaeHistory* history = nullptr);

/// Everything computed for one in-sample (vehicle, t0) window.
struct WindowResult {
    std::string vehicle_id;
    Index t0 = 0;
    telemetry::VehicleMetadata metadata;
    double sample_rate = 1.0;
    int label = 0;
    std::optional<double> ttf_seconds;
    deepar::HiddenRepresentation stam;         // h-tilde
    deepar::HiddenRepresentation vae;          // h-hat
    deepar::HiddenRepresentation lstm_direct;
    deepar::HiddenRepresentation stam_direct;
    double stam_mse = 0.0;  // generated vs true future, in STAM-standardized units
    double lvcf_mse = 0.0;  // last lookback row carried forward, same units
    int stam_best_epoch = 0;
    stam::AttentionProfile attention;
};

/// STAM covariates and the hidden representations needed by `modes`.
std::vector<WindowResult> build_window_results(const telemetry::FleetDataset& dataset, const ExperimentConfig& config,
                                               const VehicleModels& models, const vae::LatentStateModel* states,
                                               const std::vector<Mode>& modes, std::uint64_t seed, int jobs,
                                               const Logger& log = {});

/// Classifier features of one window under a mode.
std::vector<double> mode_features(const WindowResult& w, Mode mode);

struct ModeResult {
    Mode mode = Mode::stam_only;
    std::vector<double> split_auc;
    std::vector<std::vector<RocPoint>> roc;
    double mean_auc = 0.0;
    std::vector<double> permutation_split_auc;
    double permutation_mean_auc = 0.0;
};

/// Train/test protocol of the classifier for one mode over the shared `plan`,
/// plus the permutation null.
ModeResult evaluate_mode(const std::vector<WindowResult>& windows, Mode mode, const SplitPlan& plan,
                         const ExperimentConfig& config, std::uint64_t seed, int jobs);
/// Split AUCs where every split draws its own label permutation and stratified
/// train/test partition.
std::vector<double> permutation_null(const std::vector<WindowResult>& windows, Mode mode,
                                     const ExperimentConfig& config, std::uint64_t seed, int jobs);

struct TtfResult {
    bool evaluated = false;
    std::string notice;
    std::size_t positives = 0;
    double r_squared = 0.0;                // pooled over 5 cross-validation folds
    double mean_baseline_r_squared = 0.0;  // training-fold mean predictor, same folds
    double max_abs_error_seconds = 0.0;
    double mean_abs_error_seconds = 0.0;
};

/// Regressor on the fault-positive windows, features from regressor_features(h-tilde).
TtfResult evaluate_ttf(const std::vector<WindowResult>& windows, const ExperimentConfig& config, std::uint64_t seed,
                       int jobs);

struct StateRate {
    int state = 0;
    std::size_t samples = 0;
    std::size_t positives = 0;
    double rate = 0.0;
    vae::StateSummary summary;
};

/// Classifier over stam_plus_vae features, trained on all windows.
heads::ForestModel train_state_classifier(const std::vector<WindowResult>& windows, const ExperimentConfig& config,
                                          std::uint64_t seed);

/// For each state: decode `n_per_state` member samples, forecast each with the
/// DeepAR model of a base window's vehicle from that window's history, and
/// classify with both representation slots filled by the state-generated
/// forecast. `classifier` returns the positive decision for a feature vector.
std::vector<StateRate> simulate_state_fault_rates(
    const telemetry::FleetDataset& dataset, const vae::LatentStateModel& states, const VehicleModels& models,
    const std::vector<WindowResult>& windows, const std::function<int(const std::vector<double>&)>& classifier,
    int n_per_state, const ExperimentConfig& config, std::uint64_t seed, int jobs);

struct ExperimentReport {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string scale;
    std::vector<Mode> modes;
    std::size_t windows = 0;
    std::size_t positive_windows = 0;
    std::vector<ModeResult> results;
    TtfResult ttf;
    double stam_mse = 0.0;
    double lvcf_mse = 0.0;
    std::vector<StateRate> state_rates;
    std::optional<stam::AttentionTable> attention;
    std::string attention_notice;
    std::map<std::string, std::vector<double>> deepar_loss;
    std::map<std::string, std::vector<double>> lstm_loss;
    vae::VaeHistory vae_history;
    std::optional<vae::LatentStateModel> latent;

    const ModeResult* result(Mode m) const;
};

/// Intermediate products of run_experiment, kept on request.
struct ExperimentArtifacts {
    VehicleModels models;
    std::vector<WindowResult> windows;
};

/// The full protocol on `dataset`; `models` may hold previously trained
/// per-vehicle models to reuse.
ExperimentReport run_experiment(const telemetry::FleetDataset& dataset, const ExperimentConfig& config,
                                std::uint64_t seed, int jobs, const Logger& log = {},
                                const VehicleModels* models = nullptr, ExperimentArtifacts* keep = nullptr);

nlohmann::json to_json(const ExperimentReport& r);
/// Writes report.json plus the ROC, loss-history, latent, attention and
/// state-rate CSVs.
void emit_report(const ExperimentReport& r, const std::filesystem::path& out_dir);

/// The bundled report schema.
const nlohmann::json& report_schema();
/// Errors of `doc` against a JSON Schema subset (type, enum, required,
/// properties, additionalProperties, items, minItems, minimum, maximum and
/// local $ref).
std::vector<std::string> validate_json(const nlohmann::json& doc, const nlohmann::json& schema);

} // namespace faultsim::evaluation
