#pragma once

#include <Eigen/Dense>
#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cyclefit/common.hpp"
#include "cyclefit/datagen.hpp"
#include "cyclefit/dcnn.hpp"
#include "cyclefit/mgp.hpp"
#include "cyclefit/sampling.hpp"

namespace cyclefit::eval {

/// Per-hormone standardization fitted on training individuals only.
struct Scaler {
    Eigen::VectorXd mean;  // per hormone, raw units
    Eigen::VectorXd std;   // per hormone, > 0 (population standard deviation)

    Eigen::MatrixXd apply(const Eigen::MatrixXd& raw) const;
    Eigen::MatrixXd invert(const Eigen::MatrixXd& scaled) const;
};

Scaler fit_scaler(const std::vector<const datagen::IndividualSeries*>& train);

struct Split {
    std::vector<int> train;       // indices into the cohort
    std::vector<int> validation;
    std::vector<int> test;
    std::uint64_t seed = 0;
};

/// Seeded uniform 40/10/10 partition of a 60-individual cohort; other sizes
/// split proportionally (2/3, 1/6, 1/6) with a warning on stderr.
Split split_cohort(int cohort_size, std::uint64_t seed);

/// Mean squared error over the selected hormones and day range, both sides
/// in standardized units. Throws data_error on an empty selection.
double mse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, const DayRange& days,
           const std::vector<int>& hormones);

inline DayRange overall_range() { return {1, datagen::kSeriesDays}; }
inline DayRange reconstruction_range() { return {1, datagen::kObservationDays}; }
inline DayRange prediction_range() { return {datagen::kObservationDays + 1, datagen::kSeriesDays}; }

enum class Variant { kIndependentGp, kMgp, kBlockMgp, kBlockMgpDcnn };
enum class Scheme { kRandom, kEd };

std::string variant_name(Variant v);
std::string row_label(Variant v, Scheme s);  // table row, e.g. "B-MGP-DCNN (ED)"
Variant variant_from_name(const std::string& name);

/// One table cell: test-population MSE per scope plus per-hormone overall.
struct CellResult {
    double overall = 0.0;
    double reconstruction = 0.0;
    double prediction = 0.0;
    std::array<double, datagen::kNumHormones> per_hormone_overall{};
};

struct PipelineConfig {
    mgp::OptimizerConfig mgp_optimizer;
    int mgp_rank = 2;
    dcnn::DcnnConfig dcnn;
    int streams = 100;  // S posterior sample streams per individual
    std::uint64_t schedule_seed = 11;
    std::uint64_t mgp_seed = 12;
    std::uint64_t stream_seed = 13;
    int jobs = 1;
    std::string out_dir;       // artifacts root; empty disables file output
    bool emit_curves = false;  // per-individual reconstruction CSVs
};

struct ExperimentConfig {
    int cohort_size = 60;
    std::uint64_t cohort_seed = 7;
    datagen::WaveformParams waveform = datagen::WaveformParams::defaults();
    std::vector<std::uint64_t> split_seeds = {101, 102, 103};
    std::vector<int> budgets = {10, 15, 25, 35, 70};
    std::vector<Scheme> schemes = {Scheme::kRandom, Scheme::kEd};
    std::vector<Variant> variants = {Variant::kIndependentGp, Variant::kMgp, Variant::kBlockMgp,
                                     Variant::kBlockMgpDcnn};
    PipelineConfig pipeline;
};

ExperimentConfig load_experiment_config(const std::string& path);

/// Cells live under (row label, budget); rows missing a budget are absent.
struct ResultGrid {
    std::map<std::string, std::map<int, CellResult>> cells;
};

struct ExperimentResult {
    ResultGrid averaged;                                  // mean over split seeds
    std::map<std::uint64_t, ResultGrid> per_seed;
};

/// One (variant, scheme, budget) cell for one split of one cohort.
/// Runs schedule -> per-individual MGP fit on [1,70] -> posterior over
/// [1,105] -> (DCNN variants) stream draws, population training with
/// validation early stopping, stream-averaged test predictions -> MSE.
CellResult run_pipeline(const std::vector<datagen::IndividualSeries>& cohort, const Split& split,
                        Variant variant, Scheme scheme, int budget, const PipelineConfig& config);

/// Full experiment grid; ED scheme applies to the blockwise variants only
/// (the only rows the table layout defines for it).
ExperimentResult run_experiment(const ExperimentConfig& config);

/// Writes the 8 result tables (overall / reconstruction / prediction across
/// hormones, plus per-hormone overall) as CSV under out_dir. Rows without a
/// computed cell are marked NA; the LSTM row is always NA (not implemented).
void emit_tables(const ExperimentResult& result, const std::string& out_dir);

void write_results_json(const std::string& path, const ExperimentResult& result);
ExperimentResult read_results_json(const std::string& path);

}  // namespace cyclefit::eval
