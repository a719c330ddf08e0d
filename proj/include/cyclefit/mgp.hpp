#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "cyclefit/common.hpp"

namespace cyclefit::mgp {

/// Simultaneous measurements of all tasks (hormones) on a sparse day grid.
/// Rows are sorted by day on construction; duplicate days are rejected.
class ObservationSet {
  public:
    ObservationSet(std::vector<int> days, Eigen::MatrixXd values, std::string individual_id = "");

    const std::vector<int>& days() const { return days_; }
    const Eigen::MatrixXd& values() const { return values_; }  // num_days x num_tasks
    const std::string& individual_id() const { return individual_id_; }
    int num_days() const { return static_cast<int>(days_.size()); }
    int num_tasks() const { return static_cast<int>(values_.cols()); }

  private:
    std::vector<int> days_;
    Eigen::MatrixXd values_;
    std::string individual_id_;
};

/// Partition of task indices into disjoint groups; the covariance is
/// block-diagonal across groups.
struct BlockStructure {
    int num_tasks = 5;
    std::vector<std::vector<int>> groups;  // each sorted ascending; groups ordered by first member

    static BlockStructure full(int num_tasks = 5);
    static BlockStructure independent(int num_tasks = 5);
    /// The {E, P, Ih} / {FSH, LH} grouping used by the blockwise model.
    static BlockStructure blockwise();

    void validate() const;
    int block_of(int task) const;
    /// Position of `task` inside its group.
    int local_index(int task) const;
};

struct BlockHyperparams {
    double period = 29.0;
    double lengthscale = 1.0;
    Eigen::MatrixXd task_factors;   // group_size x rank (the low-rank V)
    Eigen::VectorXd task_diagonal;  // group_size, strictly positive (v)
};

struct MgpHyperparams {
    std::vector<BlockHyperparams> blocks;  // aligned with BlockStructure::groups
    Eigen::VectorXd noise;                 // per task, strictly positive (d_h)

    /// Standard initialization: period anchored at the individual's cycle
    /// length (or 29 when unknown), lengthscale 1, V ~ N(0, 0.1^2), v = 0.5,
    /// noise 0.1. Rank 2 for multi-task groups, 1 for singletons, unless
    /// overridden.
    static MgpHyperparams initial(const BlockStructure& blocks, double period_init, int rank,
                                  Rng& rng);
};

/// exp(-2 sin^2(pi |t - t'| / period) / lengthscale^2); in (0, 1].
double periodic_kernel(double t, double t_prime, double period, double lengthscale);

/// V V^T + diag(v); symmetric positive definite for v > 0.
Eigen::MatrixXd task_kernel(const Eigen::MatrixXd& V, const Eigen::VectorXd& v);

/// Full covariance over (task, day) pairs in task-major order: row index
/// task * n + day_position. Cross-group entries are zero; within group b the
/// entry is K_b[h,h'] * k_b(t,t'), plus noise(h) on the diagonal if requested.
Eigen::MatrixXd build_covariance(const MgpHyperparams& hyper, const BlockStructure& blocks,
                                 const std::vector<int>& days, bool with_noise);

double log_marginal_likelihood(const MgpHyperparams& hyper, const BlockStructure& blocks,
                               const ObservationSet& obs);

// Fit parameterization: for each group in order, [log period, log lengthscale,
// V column-major, log v, log noise of the group's tasks]; all positivity
// constraints become unconstrained coordinates.
Eigen::VectorXd pack_params(const MgpHyperparams& hyper, const BlockStructure& blocks);
MgpHyperparams unpack_params(const Eigen::VectorXd& packed, const BlockStructure& blocks,
                             const std::vector<int>& ranks);

/// Analytic gradient of the log marginal likelihood in the pack_params
/// coordinates.
Eigen::VectorXd lml_gradient(const MgpHyperparams& hyper, const BlockStructure& blocks,
                             const ObservationSet& obs);

struct OptimizerConfig {
    int max_iterations = 500;
    double learning_rate = 0.05;
    int restarts = 3;
    double tolerance = 1e-7;  // relative improvement that counts as progress
    int patience = 30;        // iterations without progress before stopping
    std::uint64_t seed = 0;
};

struct FitResult {
    MgpHyperparams hyper;
    double final_lml = 0.0;
    int restarts_run = 0;
    std::vector<int> iterations;  // per restart
    std::string warning;          // nonempty when the fit was skipped
};

/// Adam ascent on the packed parameters, multi-restart, returning the restart
/// with the best likelihood seen. Observations with fewer than 4 days return
/// `init` unchanged with a warning. Throws numerical_error if every restart
/// diverges.
FitResult fit(const ObservationSet& obs, const BlockStructure& blocks, const MgpHyperparams& init,
              const OptimizerConfig& opt);

/// Posterior over the daily grid 1..num_days. Covariance is stored per group
/// (cross-group covariance is identically zero).
class PosteriorSeries {
  public:
    PosteriorSeries(Eigen::MatrixXd mean, BlockStructure blocks,
                    std::vector<Eigen::MatrixXd> group_covariance);

    const Eigen::MatrixXd& mean() const { return mean_; }  // num_tasks x T
    const BlockStructure& blocks() const { return blocks_; }
    const std::vector<Eigen::MatrixXd>& group_covariance() const { return group_covariance_; }
    int num_tasks() const { return static_cast<int>(mean_.rows()); }
    int num_days() const { return static_cast<int>(mean_.cols()); }

    /// Marginal variance of (task, day), day 1-based.
    double variance(int task, int day) const;
    /// Assembled (H*T) x (H*T) covariance in task-major order.
    Eigen::MatrixXd joint_covariance() const;

  private:
    Eigen::MatrixXd mean_;
    BlockStructure blocks_;
    std::vector<Eigen::MatrixXd> group_covariance_;  // task-major within group
};

/// Gaussian conditioning with zero prior mean over days 1..num_days. The
/// predictive covariance is that of the latent function (no observation
/// noise term).
PosteriorSeries posterior(const MgpHyperparams& hyper, const BlockStructure& blocks,
                          const ObservationSet& obs, int num_days);

/// S joint samples mean + L eps, L the Cholesky factor of the posterior
/// covariance (with jitter escalation). Deterministic given the rng state.
std::vector<Eigen::MatrixXd> draw_streams(const PosteriorSeries& post, int num_streams, Rng& rng);

/// Cholesky with the standard jitter policy: on failure add
/// 1e-8 * mean(diag) to the diagonal, escalating tenfold up to 1e-4 *
/// mean(diag), then throw numerical_error. Returns the lower factor.
Eigen::MatrixXd cholesky_with_jitter(const Eigen::MatrixXd& m, double* jitter_used = nullptr);

// Fitted-model JSON: block structure, hyperparameters and fit diagnostics.
void write_model(const std::string& path, const BlockStructure& blocks, const FitResult& result);
FitResult read_model(const std::string& path, BlockStructure* blocks);

/// CSV export: individual_id, day, hormone, mean, variance.
void write_posterior_csv(const std::string& path, const std::string& individual_id,
                         const PosteriorSeries& post, const std::vector<std::string>& task_names);

}  // namespace cyclefit::mgp
