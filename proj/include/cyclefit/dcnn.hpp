#pragma once

#include <Eigen/Dense>
#include <limits>
#include <string>
#include <vector>

#include "cyclefit/common.hpp"

namespace cyclefit::dcnn {

enum class DilationSchedule {
    kConstant,     // every layer uses dilation d
    kExponential,  // layer l (1-based) uses dilation d^l
};

struct DcnnConfig {
    int layers = 4;
    int dilation = 2;
    int filter_size = 5;
    int hidden_width = 8;
    DilationSchedule schedule = DilationSchedule::kConstant;
    double learning_rate = 2e-3;
    int max_iterations = 4000;
    int batch_size = 16;
    bool adaptive_updates = false;  // Adam instead of the plain gradient step
    int eval_interval = 25;         // iterations between validation checks
    int patience = 20;              // validation checks without improvement before stopping
    int val_streams = 4;            // streams per validation individual used for the check
    std::uint64_t seed = 0;

    /// layers in [3,6], dilation in [1,3], filter_size in [2,9],
    /// hidden_width in [5,12], learning_rate > 0.
    void validate() const;
    int dilation_of_layer(int layer) const;  // layer 0-based
};

/// One-sided reach of the network in time steps: an output at time t can
/// depend on inputs in [t - backward, t + forward].
struct ReceptiveField {
    int backward = 0;
    int forward = 0;
};

/// Sum over layers of dilation_l * floor(K/2) backward and
/// dilation_l * (K - 1 - floor(K/2)) forward taps.
ReceptiveField receptive_field(const DcnnConfig& config);

/// Non-causal dilated convolution with zero padding:
/// out[c', t] = sum_{c,k} filter[k](c', c) * x(c, t + d*(k - floor(K/2))).
/// For even K this places one more backward tap than forward.
Eigen::MatrixXd dilated_conv_noncausal(const Eigen::MatrixXd& x,
                                       const std::vector<Eigen::MatrixXd>& filter, int dilation);

struct DcnnModel {
    DcnnConfig config;
    Eigen::MatrixXd input_proj;                       // W x C, width-1 filter, no bias
    std::vector<std::vector<Eigen::MatrixXd>> filters;  // [layer][k], each W x W
    std::vector<Eigen::VectorXd> biases;              // [layer], W
    Eigen::MatrixXd output_proj;                      // C x W, width-1 filter, no bias

    int num_channels() const { return static_cast<int>(input_proj.cols()); }
    std::size_t num_params() const;

    /// Flat parameter order: input_proj row-major, then per layer filter
    /// taps [k][row][col] followed by the bias, then output_proj row-major.
    Eigen::VectorXd flatten() const;
    void unflatten(const Eigen::VectorXd& flat);

    /// Weights ~ N(0, 0.1^2), biases zero.
    static DcnnModel init(const DcnnConfig& config, int num_channels, Rng& rng);
    static DcnnModel zeros(const DcnnConfig& config, int num_channels);
};

/// Input projection, then `layers` residual units h <- ReLU(h + conv(h)),
/// then a linear output projection.
Eigen::MatrixXd forward(const DcnnModel& model, const Eigen::MatrixXd& z);

/// Mean squared error over the masked day columns (1-based inclusive range).
double mse_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, const DayRange& mask);

struct DcnnGradients {
    Eigen::MatrixXd input_proj;
    std::vector<std::vector<Eigen::MatrixXd>> filters;
    std::vector<Eigen::VectorXd> biases;
    Eigen::MatrixXd output_proj;

    Eigen::VectorXd flatten() const;
    void add_scaled(const DcnnGradients& other, double scale);
    static DcnnGradients zeros_like(const DcnnModel& model);
};

/// Exact reverse-mode gradient of mse_loss(forward(model, z), target, mask)
/// with respect to every weight and bias.
DcnnGradients gradients(const DcnnModel& model, const Eigen::MatrixXd& z,
                        const Eigen::MatrixXd& target, const DayRange& mask);

/// Streams of one individual, all mapped to the same target.
struct StreamGroup {
    std::vector<Eigen::MatrixXd> streams;  // S entries, C x T
    Eigen::MatrixXd target;                // C x T
};
using TrainingSet = std::vector<StreamGroup>;

struct TrainResult {
    DcnnModel model;  // best validation checkpoint (final weights if no validation set)
    struct HistoryRow {
        int iteration;
        double train_mse;
        double val_mse;  // NaN when not evaluated
    };
    std::vector<HistoryRow> history;
    double best_val_mse = std::numeric_limits<double>::quiet_NaN();
    int iterations_run = 0;
};

/// Mini-batch gradient descent over all (individual, stream) pairs. With a
/// validation set, evaluates every eval_interval iterations, keeps the best
/// checkpoint and stops after `patience` checks without improvement. Throws
/// numerical_error on a non-finite loss.
TrainResult train(DcnnModel model, const TrainingSet& train_set, const TrainingSet& val_set,
                  const DayRange& mask);

// Checkpoint JSON (config + flat weights) and loss-history CSV.
void write_checkpoint(const std::string& path, const DcnnModel& model);
DcnnModel read_checkpoint(const std::string& path);
void write_history_csv(const std::string& path, const std::vector<TrainResult::HistoryRow>& rows);

}  // namespace cyclefit::dcnn
