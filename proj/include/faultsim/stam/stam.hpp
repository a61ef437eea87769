#pragma once

#include "faultsim/numerics/checkpoint.hpp"
#include "faultsim/numerics/tape.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace faultsim::stam {

struct StamConfig {
    Index lookback = 120;   // l
    Index chunk = 30;       // steps emitted per forward pass
    Index embed = 16;
    Index stride = 10;      // spacing of training sub-windows
    int epochs = 20;
    int batch_size = 16;
    double learning_rate = 0.003;
    double clip_norm = 5.0;
    double validation_fraction = 0.2;  // latest sub-windows held out for epoch selection
};

nlohmann::json to_json(const StamConfig& c);
StamConfig stam_config_from_json(const nlohmann::json& j, const StamConfig& defaults = {});

/// Intermediate values of one forward pass over a batch of B lookback windows.
struct StamForward {
    numerics::Var output;    // B x (chunk * channels), standardized, step-major
    numerics::Var spatial;   // B x channels attention
    numerics::Var temporal;  // B x lookback attention
};

/// Spatio-temporal attention forecaster over C channels. A spatial head embeds
/// each channel's lookback series and attends across channels; a temporal head
/// embeds each time step's channel vector and attends across steps. Both
/// contexts feed a linear map to the next chunk; per-channel terms add the last
/// observed value and the temporally attended level of each channel.
class StamModel {
public:
    StamModel(StamConfig config, Index channels, std::uint64_t init_seed);

    const StamConfig& config() const { return config_; }
    Index channels() const { return channels_; }
    numerics::ParameterSet& params() { return params_; }
    const numerics::ParameterSet& params() const { return params_; }
    const Matrix& mean() const { return mean_; }
    const Matrix& stddev() const { return std_; }
    void set_normalization(Matrix mean, Matrix std);
    Matrix standardize(const Matrix& x) const;
    Matrix destandardize(const Matrix& z) const;

    /// `windows` holds B standardized lookback windows stacked vertically
    /// ((B * lookback) x channels). With `trainable` false the parameters enter
    /// the tape as constants.
    StamForward forward(numerics::Tape& tape, const Matrix& windows, bool trainable) const;

    /// Mean squared error of the batch forecast against `targets` (B x chunk*C).
    numerics::Var batch_loss(numerics::Tape& tape, const Matrix& windows, const Matrix& targets) const;

    nlohmann::json to_json() const;
    static StamModel from_json(const nlohmann::json& j);

private:
    StamConfig config_;
    Index channels_;
    numerics::ParameterSet params_;
    Matrix mean_;
    Matrix std_;
    Matrix spread_;  // channels x (chunk * channels) copy matrix for the skip term
};

struct StamTrainResult {
    StamModel model;                   // parameters of the selected epoch
    std::vector<double> epoch_loss;    // training loss per epoch
    std::vector<double> held_out_loss; // entry 0 is the untrained model
    int best_epoch = 0;
};

/// Trains on sliding sub-windows of `recent` (rows are time steps, raw units).
StamTrainResult train_stam(const Matrix& recent, const StamConfig& config, std::uint64_t seed);

/// One chunk forecast from a raw lookback window (lookback x channels).
Matrix predict_chunk(const StamModel& model, const Matrix& lookback);

/// Iterated chunk rollout to `horizon` steps, in raw units.
Matrix generate_covariates(const StamModel& model, const Matrix& lookback, Index horizon);

enum class AttentionContext { no_fault, fault_observed };
std::string to_string(AttentionContext c);

struct AttentionProfile {
    std::vector<double> spatial;
    std::vector<double> temporal;
    AttentionContext context = AttentionContext::no_fault;
};

AttentionProfile attention_profile(const StamModel& model, const Matrix& lookback,
                                   AttentionContext context = AttentionContext::no_fault);

/// Mean spatial attention mass per subsystem and context. `subsystem_of[i]`
/// names the subsystem of channel i.
struct AttentionTable {
    std::vector<std::string> subsystems;  // column order
    std::map<std::string, std::vector<double>> rows;  // context name -> mass per subsystem
};

AttentionTable aggregate_attention(const std::vector<AttentionProfile>& profiles,
                                   const std::vector<std::string>& subsystem_of);

} // namespace faultsim::stam
