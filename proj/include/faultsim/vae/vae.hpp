#pragma once

#include "faultsim/numerics/checkpoint.hpp"
#include "faultsim/numerics/tape.hpp"
#include "faultsim/telemetry/telemetry.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace faultsim::vae {

inline constexpr Index kLatentDim = 3;
using LatentPoint = std::array<double, kLatentDim>;

struct VaeConfig {
    Index steps = 30;        // rows kept after striding the future window
    Index hidden = 32;
    int epochs = 150;
    int batch_size = 16;
    double learning_rate = 0.002;
    double clip_norm = 5.0;
    double beta = 1.0;       // KL weight
    std::size_t min_windows = 100;
};

nlohmann::json to_json(const VaeConfig& c);
VaeConfig vae_config_from_json(const nlohmann::json& j, const VaeConfig& defaults = {});

/// Rows floor(i * T / steps) of a T x C window.
Matrix downsample(const Matrix& window, Index steps);
/// Zero-order hold back to `horizon` rows: row t copies row floor(t * steps / horizon).
Matrix upsample(const Matrix& compact, Index horizon);

/// Per-epoch training statistics, averaged over windows.
struct VaeHistory {
    std::vector<double> elbo;            // -(reconstruction + beta * kl)
    std::vector<double> reconstruction;  // 0.5 * squared error summed over the input
    std::vector<double> kl;
    std::vector<double> mse;             // mean squared error per standardized value
};

/// Variational auto-encoder over standardized, strided covariate windows with
/// a diagonal Gaussian posterior and a standard normal prior.
class VaeModel {
public:
    VaeModel(VaeConfig config, Index horizon, Index channels, std::uint64_t init_seed);

    const VaeConfig& config() const { return config_; }
    Index horizon() const { return horizon_; }
    Index channels() const { return channels_; }
    Index input_width() const { return config_.steps * channels_; }
    numerics::ParameterSet& params() { return params_; }
    const numerics::ParameterSet& params() const { return params_; }
    const Matrix& mean() const { return mean_; }
    const Matrix& stddev() const { return std_; }
    void set_normalization(Matrix mean, Matrix std);

    /// Raw T x C window to a standardized 1 x (steps * C) row.
    Matrix flatten(const Matrix& window) const;
    /// Standardized 1 x (steps * C) row back to raw steps x C.
    Matrix unflatten(const Matrix& row) const;

    struct Terms {
        numerics::Var loss;            // mean negative ELBO over the batch
        numerics::Var reconstruction;  // batch mean
        numerics::Var kl;              // batch mean
        numerics::Var output;          // B x input_width
    };
    /// `inputs` is B x input_width (standardized); `noise` is B x 3 standard
    /// normal draws for the reparameterized sample.
    Terms batch_terms(numerics::Tape& tape, const Matrix& inputs, const Matrix& noise) const;

    /// Posterior means for B standardized rows (B x 3).
    Matrix encode_rows(const Matrix& inputs) const;
    /// Decoder output for B latent rows (B x input_width, standardized).
    Matrix decode_rows(const Matrix& latents) const;

    nlohmann::json to_json() const;
    static VaeModel from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static VaeModel load(const std::filesystem::path& path);

private:
    VaeConfig config_;
    Index horizon_;
    Index channels_;
    numerics::ParameterSet params_;
    Matrix mean_;
    Matrix std_;
};

struct VaeTrainResult {
    VaeModel model;
    VaeHistory history;
};

/// Trains on raw T x C windows. Normalization uses per-channel statistics of
/// the strided windows.
VaeTrainResult train_vae(const std::vector<Matrix>& windows, const VaeConfig& config, std::uint64_t seed);

LatentPoint encode(const VaeModel& model, const Matrix& window);
/// Strided reconstruction (steps x C, raw units).
Matrix decode_compact(const VaeModel& model, const LatentPoint& z);
/// Reconstruction held to the full horizon (T x C, raw units).
Matrix decode(const VaeModel& model, const LatentPoint& z);
Matrix reconstruct_true_future(const VaeModel& model, const Matrix& window);

// ---------------------------------------------------------------------------
// Latent clustering.

struct KMeansResult {
    Matrix centers;                   // k x d
    std::vector<int> assignments;
    double sse = 0.0;
    int iterations = 0;
};

/// Nearest center by Euclidean distance, ties to the lowest index.
int nearest_center(const Matrix& centers, const Eigen::Ref<const Eigen::RowVectorXd>& point);
double within_cluster_sse(const Matrix& points, const Matrix& centers, const std::vector<int>& assignments);

/// Lloyd iterations up to `max_iterations` or an assignment fixpoint; at a
/// fixpoint the best SSE-reducing single-point move is applied and Lloyd
/// resumes. The
/// first restart seeds by farthest point from a random start; later restarts
/// draw seeds with probability proportional to squared distance. The restart
/// with the lowest SSE is returned.
KMeansResult fit_kmeans(const Matrix& points, int k, std::uint64_t seed, int restarts = 10, int max_iterations = 300);

/// An out-of-sample window: its future segment [t0, t0 + T).
struct WindowRef {
    std::string vehicle_id;
    Index t0 = 0;
    telemetry::VehicleMetadata metadata;
    bool fault_in_window = false;
};

std::vector<WindowRef> out_of_sample_windows(const telemetry::FleetDataset& dataset);
Matrix future_window(const telemetry::FleetDataset& dataset, const WindowRef& ref);

/// Trains on the future windows of `refs`; throws DataError if any belongs to
/// an in-sample vehicle.
VaeTrainResult train_vae(const telemetry::FleetDataset& dataset, const std::vector<WindowRef>& refs,
                         const VaeConfig& config, std::uint64_t seed);

struct LatentStateModel {
    VaeModel model;
    Matrix points;  // n x 3 posterior means
    KMeansResult clusters;
    std::vector<WindowRef> windows;

    int state_count() const { return static_cast<int>(clusters.centers.rows()); }
    std::vector<std::size_t> members(int state) const;
};

LatentStateModel build_state_model(const telemetry::FleetDataset& dataset, VaeModel model,
                                   std::vector<WindowRef> refs, int states, std::uint64_t seed);

/// Uniform draws (with replacement) among the member points of `state`.
std::vector<LatentPoint> sample_latents(const LatentStateModel& sm, int state, std::size_t n, std::uint64_t seed);
/// Decoded windows (T x C) of sample_latents.
std::vector<Matrix> sample_from_state(const LatentStateModel& sm, int state, std::size_t n, std::uint64_t seed);

struct StateSummary {
    int state = -1;  // -1 for the global summary
    std::size_t count = 0;
    int modal_location = 0;
    int modal_subfamily = 0;
    double mean_odometer_miles = 0.0;
    double mean_engine_hours = 0.0;
    double fault_fraction = 0.0;
};

/// Summary over the given windows; modes break ties toward the lowest value.
StateSummary summarize_windows(const std::vector<WindowRef>& windows, const std::vector<std::size_t>& which);
std::vector<StateSummary> metadata_association(const LatentStateModel& sm);
StateSummary global_summary(const LatentStateModel& sm);

void write_latent_csv(const LatentStateModel& sm, const std::filesystem::path& path);

nlohmann::json to_json(const LatentStateModel& sm);
LatentStateModel state_model_from_json(const nlohmann::json& j);

} // namespace faultsim::vae
