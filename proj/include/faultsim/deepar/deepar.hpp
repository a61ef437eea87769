#pragma once

#include "faultsim/numerics/checkpoint.hpp"
#include "faultsim/numerics/tape.hpp"
#include "faultsim/telemetry/telemetry.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace faultsim::deepar {

enum class CellKind { gru, lstm };
enum class Likelihood { bernoulli, gaussian };

struct DeepArConfig {
    CellKind cell = CellKind::gru;
    Likelihood likelihood = Likelihood::bernoulli;
    bool use_covariates = true;
    Index hidden = 32;
    int epochs = 30;
    Index train_window = 120;      // teacher-forced sub-window length
    int windows_per_epoch = 0;     // cap on sub-windows per epoch; 0: all (2 * q / train_window)
    int batch_size = 8;
    double learning_rate = 0.01;
    double clip_norm = 5.0;
    Index context = 120;           // warm-up steps consumed before forecasting
    int n_samples = 200;
    std::vector<double> quantiles{0.1, 0.5, 0.9};
};

nlohmann::json to_json(const DeepArConfig& c);
DeepArConfig deepar_config_from_json(const nlohmann::json& j, const DeepArConfig& defaults = {});

/// Autoregressive recurrent forecaster of the fault indicator. Input at step t
/// is [z_{t-1}, standardized x_t]; the head maps the hidden state to a
/// Bernoulli logit (or Gaussian mean and log-scale).
class DeepArModel {
public:
    DeepArModel(DeepArConfig config, std::uint64_t init_seed);

    const DeepArConfig& config() const { return config_; }
    numerics::ParameterSet& params() { return params_; }
    const numerics::ParameterSet& params() const { return params_; }
    Index input_width() const;
    const Matrix& sensor_mean() const { return mean_; }
    const Matrix& sensor_std() const { return std_; }
    void set_normalization(Matrix mean, Matrix std);
    Matrix standardize(const Matrix& sensors) const;

    /// Mean per-step negative log-likelihood of a teacher-forced batch on a tape.
    /// `inputs` is (L*B) x input_width ordered step-major (row t*B + b);
    /// `targets` is (L*B) x 1 in the same order.
    numerics::Var batch_loss(numerics::Tape& tape, const Matrix& inputs, const Matrix& targets, Index batch) const;

    /// Head outputs for every step of a teacher-forced batch, plain forward.
    Matrix batch_outputs(const Matrix& inputs, Index batch) const;

    nlohmann::json to_json() const;
    static DeepArModel from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static DeepArModel load(const std::filesystem::path& path);

    // Plain recurrent step used by inference: updates h (and c for LSTM) from
    // the precomputed input projection xw (rows x gates) and returns head output.
    struct State {
        Matrix h;
        Matrix c;
    };
    State initial_state(Index rows) const;
    Matrix input_projection(const Matrix& inputs) const;
    void step(State& s, const Matrix& xw) const;
    Matrix head(const Matrix& h) const;

private:
    DeepArConfig config_;
    numerics::ParameterSet params_;
    std::size_t w_x_ = 0, w_h_ = 0, b_ = 0, w_o_ = 0, b_o_ = 0;
    Matrix mean_;
    Matrix std_;
};

struct LossHistory {
    std::vector<double> epoch_loss;
};

struct TrainResult {
    DeepArModel model;
    LossHistory history;
};

/// Teacher-forced training on `window` (faults + sensors from [0, q)).
TrainResult train_deepar(const telemetry::SeriesSlice& window, const DeepArConfig& config, std::uint64_t seed);

/// Teacher-forced input matrix for one series: row t = [z_{t-1}, x_t] (z_{-1} = 0).
Matrix build_inputs(const DeepArModel& model, const telemetry::SeriesSlice& window);

/// Mean per-step negative log-likelihood of `window` under teacher forcing,
/// starting from a zero state.
double nll(const DeepArModel& model, const telemetry::SeriesSlice& window);

struct ForecastResult {
    Matrix sample_paths;           // n_samples x T, values in {0,1} for the Bernoulli head
    std::vector<double> mean;      // per-step mean of the sample paths
    std::vector<double> mean_probability;  // per-step mean of the sampled Bernoulli parameters
    std::vector<double> quantile_levels;
    std::vector<std::vector<double>> quantiles;  // one path per level

    Index horizon() const { return static_cast<Index>(mean.size()); }
    const std::vector<double>& quantile(double level) const;
};

/// Warms up on the last `context` steps of `history`, then samples n paths
/// ancestrally over the T rows of `future_covariates` (sensor units).
ForecastResult forecast(const DeepArModel& model, const telemetry::SeriesSlice& history,
                        const Matrix& future_covariates, Index horizon, int n_samples, std::uint64_t seed);

/// Statistics from an n x T matrix of sample paths.
ForecastResult summarize_paths(Matrix paths, const std::vector<double>& levels);

/// Smallest x in `values` with empirical CDF(x) >= level.
double empirical_quantile(std::vector<double> values, double level);

enum class Provenance { stam_generated, vae_generated, lstm_direct, stam_direct };
std::string to_string(Provenance p);

struct HiddenRepresentation {
    std::vector<double> features;  // mean path followed by median path
    Provenance provenance = Provenance::stam_generated;

    Index horizon() const { return static_cast<Index>(features.size() / 2); }
};

HiddenRepresentation hidden_representation(const ForecastResult& result, Provenance provenance);

} // namespace faultsim::deepar
