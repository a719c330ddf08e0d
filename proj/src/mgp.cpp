#include "cyclefit/mgp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

#include "cyclefit/io_util.hpp"

namespace cyclefit::mgp {

using json = nlohmann::json;

ObservationSet::ObservationSet(std::vector<int> days, Eigen::MatrixXd values,
                               std::string individual_id)
    : individual_id_(std::move(individual_id)) {
    if (days.size() != static_cast<std::size_t>(values.rows()))
        throw data_error("ObservationSet: days/values size mismatch");
    std::vector<int> order(days.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) { return days[a] < days[b]; });
    days_.resize(days.size());
    values_.resize(values.rows(), values.cols());
    for (std::size_t i = 0; i < order.size(); ++i) {
        days_[i] = days[order[i]];
        values_.row(i) = values.row(order[i]);
        if (days_[i] < 1) throw data_error("ObservationSet: days must be >= 1");
        if (i > 0 && days_[i] == days_[i - 1])
            throw data_error("ObservationSet: duplicate day " + std::to_string(days_[i]));
    }
}

BlockStructure BlockStructure::full(int num_tasks) {
    BlockStructure b;
    b.num_tasks = num_tasks;
    b.groups.emplace_back(num_tasks);
    std::iota(b.groups[0].begin(), b.groups[0].end(), 0);
    return b;
}

BlockStructure BlockStructure::independent(int num_tasks) {
    BlockStructure b;
    b.num_tasks = num_tasks;
    for (int t = 0; t < num_tasks; ++t) b.groups.push_back({t});
    return b;
}

BlockStructure BlockStructure::blockwise() {
    BlockStructure b;
    b.num_tasks = 5;
    b.groups = {{0, 1, 2}, {3, 4}};  // {E, P, Ih} and {FSH, LH}
    return b;
}

void BlockStructure::validate() const {
    std::vector<int> seen(num_tasks, 0);
    for (const auto& group : groups) {
        if (group.empty()) throw data_error("BlockStructure: empty group");
        for (std::size_t i = 0; i < group.size(); ++i) {
            const int t = group[i];
            if (t < 0 || t >= num_tasks) throw data_error("BlockStructure: task out of range");
            if (i > 0 && group[i - 1] >= t)
                throw data_error("BlockStructure: group not sorted ascending");
            seen[t] += 1;
        }
    }
    for (int t = 0; t < num_tasks; ++t)
        if (seen[t] != 1) throw data_error("BlockStructure: tasks must partition 0..num_tasks-1");
}

int BlockStructure::block_of(int task) const {
    for (std::size_t b = 0; b < groups.size(); ++b)
        for (int t : groups[b])
            if (t == task) return static_cast<int>(b);
    throw data_error("BlockStructure: unknown task");
}

int BlockStructure::local_index(int task) const {
    const auto& group = groups[block_of(task)];
    return static_cast<int>(std::find(group.begin(), group.end(), task) - group.begin());
}

MgpHyperparams MgpHyperparams::initial(const BlockStructure& blocks, double period_init, int rank,
                                       Rng& rng) {
    blocks.validate();
    MgpHyperparams hyper;
    for (const auto& group : blocks.groups) {
        const int m = static_cast<int>(group.size());
        const int r = m == 1 ? 1 : std::min(rank, m);
        BlockHyperparams bh;
        bh.period = period_init;
        bh.lengthscale = 1.0;
        bh.task_factors.resize(m, r);
        for (int c = 0; c < r; ++c)
            for (int a = 0; a < m; ++a) bh.task_factors(a, c) = 0.1 * rng.normal();
        bh.task_diagonal = Eigen::VectorXd::Constant(m, 0.5);
        hyper.blocks.push_back(std::move(bh));
    }
    hyper.noise = Eigen::VectorXd::Constant(blocks.num_tasks, 0.1);
    return hyper;
}

double periodic_kernel(double t, double t_prime, double period, double lengthscale) {
    if (period <= 0.0 || lengthscale <= 0.0)
        throw std::invalid_argument("periodic_kernel: period and lengthscale must be positive");
    const double s = std::sin(kPi * std::abs(t - t_prime) / period);
    return std::exp(-2.0 * s * s / (lengthscale * lengthscale));
}

Eigen::MatrixXd task_kernel(const Eigen::MatrixXd& V, const Eigen::VectorXd& v) {
    if (V.rows() != v.size()) throw data_error("task_kernel: dimension mismatch");
    if ((v.array() <= 0.0).any()) throw data_error("task_kernel: v must be strictly positive");
    Eigen::MatrixXd K = V * V.transpose();
    K.diagonal() += v;
    return K;
}

namespace {

Eigen::MatrixXd abs_diff_matrix(const std::vector<int>& a, const std::vector<int>& b) {
    Eigen::MatrixXd tau(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) tau(i, j) = std::abs(a[i] - b[j]);
    return tau;
}

Eigen::MatrixXd periodic_gram(const Eigen::MatrixXd& tau, double period, double lengthscale) {
    return (-2.0 / (lengthscale * lengthscale) *
            (kPi / period * tau.array()).sin().square())
        .exp()
        .matrix();
}

Eigen::MatrixXd kron(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j)
            out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    return out;
}

/// Observations of one group stacked task-major: entry h*n + i.
Eigen::VectorXd group_obs_vector(const ObservationSet& obs, const std::vector<int>& group) {
    const int n = obs.num_days();
    Eigen::VectorXd y(group.size() * n);
    for (std::size_t h = 0; h < group.size(); ++h)
        y.segment(h * n, n) = obs.values().col(group[h]);
    return y;
}

Eigen::MatrixXd group_noise_covariance(const Eigen::VectorXd& noise,
                                       const std::vector<int>& group, int n) {
    Eigen::VectorXd d(group.size() * n);
    for (std::size_t h = 0; h < group.size(); ++h)
        d.segment(h * n, n).setConstant(noise[group[h]]);
    return d.asDiagonal();
}

constexpr double kLog2Pi = 1.8378770664093453;

int block_param_count(const BlockHyperparams& bh) {
    const int m = static_cast<int>(bh.task_factors.rows());
    const int r = static_cast<int>(bh.task_factors.cols());
    return 2 + m * r + 2 * m;
}

struct BlockEval {
    double lml = 0.0;
    Eigen::VectorXd grad;  // in the block's packed coordinates; empty unless requested
};

/// Likelihood (and optionally its gradient in log/unconstrained coordinates)
/// of one group. Gradients use d lml / d theta = 0.5 tr(W dSigma/dtheta) with
/// W = alpha alpha^T - Sigma^{-1}, collapsing the Kronecker structure instead
/// of forming per-parameter dense derivatives.
BlockEval eval_block(const BlockHyperparams& bh, const std::vector<int>& group,
                     const Eigen::VectorXd& noise, const ObservationSet& obs,
                     const Eigen::MatrixXd& tau, bool want_grad) {
    const int n = obs.num_days();
    const int m = static_cast<int>(group.size());
    const int total = m * n;

    const Eigen::MatrixXd kgram = periodic_gram(tau, bh.period, bh.lengthscale);
    const Eigen::MatrixXd K = task_kernel(bh.task_factors, bh.task_diagonal);
    Eigen::MatrixXd sigma = kron(K, kgram);
    sigma += group_noise_covariance(noise, group, n);

    const Eigen::VectorXd y = group_obs_vector(obs, group);
    const Eigen::MatrixXd L = cholesky_with_jitter(sigma);
    const Eigen::VectorXd alpha = L.transpose().triangularView<Eigen::Upper>().solve(
        L.triangularView<Eigen::Lower>().solve(y));

    BlockEval out;
    out.lml = -0.5 * y.dot(alpha) - L.diagonal().array().log().sum() - 0.5 * total * kLog2Pi;
    if (!want_grad) return out;

    Eigen::MatrixXd sigma_inv = L.triangularView<Eigen::Lower>().solve(
        Eigen::MatrixXd::Identity(total, total));
    sigma_inv = L.transpose().triangularView<Eigen::Upper>().solve(sigma_inv);
    const Eigen::MatrixXd W = alpha * alpha.transpose() - sigma_inv;

    // Kronecker collapses of W against the task and time kernels.
    Eigen::MatrixXd time_collapse = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd task_collapse(m, m);
    for (int a = 0; a < m; ++a) {
        for (int b = 0; b < m; ++b) {
            const auto block = W.block(a * n, b * n, n, n);
            time_collapse += K(a, b) * block;
            task_collapse(a, b) = block.cwiseProduct(kgram).sum();
        }
    }

    const double ell = bh.lengthscale;
    const Eigen::ArrayXXd angle = kPi / bh.period * tau.array();
    // d k / d log p and d k / d log lengthscale
    const Eigen::ArrayXXd dk_dlogp = kgram.array() * (2.0 / (ell * ell) * angle * (2.0 * angle).sin());
    const Eigen::ArrayXXd dk_dlogl = kgram.array() * (4.0 / (ell * ell) * angle.sin().square());

    const int r = static_cast<int>(bh.task_factors.cols());
    out.grad.resize(block_param_count(bh));
    int at = 0;
    out.grad[at++] = 0.5 * (time_collapse.array() * dk_dlogp).sum();
    out.grad[at++] = 0.5 * (time_collapse.array() * dk_dlogl).sum();
    const Eigen::MatrixXd gV = task_collapse * bh.task_factors;  // d lml / d V
    for (int c = 0; c < r; ++c)
        for (int a = 0; a < m; ++a) out.grad[at++] = gV(a, c);
    for (int a = 0; a < m; ++a)
        out.grad[at++] = 0.5 * task_collapse(a, a) * bh.task_diagonal[a];
    for (int a = 0; a < m; ++a) {
        const double tr = W.block(a * n, a * n, n, n).trace();
        out.grad[at++] = 0.5 * noise[group[a]] * tr;
    }
    return out;
}

}  // namespace

Eigen::MatrixXd build_covariance(const MgpHyperparams& hyper, const BlockStructure& blocks,
                                 const std::vector<int>& days, bool with_noise) {
    blocks.validate();
    if (days.empty()) throw data_error("build_covariance: empty day list");
    const int n = static_cast<int>(days.size());
    const int total = blocks.num_tasks * n;
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(total, total);

    const Eigen::MatrixXd tau = abs_diff_matrix(days, days);
    for (std::size_t b = 0; b < blocks.groups.size(); ++b) {
        const auto& group = blocks.groups[b];
        const auto& bh = hyper.blocks[b];
        const Eigen::MatrixXd kgram = periodic_gram(tau, bh.period, bh.lengthscale);
        const Eigen::MatrixXd K = task_kernel(bh.task_factors, bh.task_diagonal);
        for (std::size_t a = 0; a < group.size(); ++a)
            for (std::size_t c = 0; c < group.size(); ++c)
                sigma.block(group[a] * n, group[c] * n, n, n) = K(a, c) * kgram;
    }
    if (with_noise) {
        for (int h = 0; h < blocks.num_tasks; ++h)
            sigma.diagonal().segment(h * n, n).array() += hyper.noise[h];
    }
    return sigma;
}

double log_marginal_likelihood(const MgpHyperparams& hyper, const BlockStructure& blocks,
                               const ObservationSet& obs) {
    blocks.validate();
    if (obs.num_days() == 0) throw data_error("log_marginal_likelihood: empty observation set");
    const Eigen::MatrixXd tau = abs_diff_matrix(obs.days(), obs.days());
    double lml = 0.0;
    for (std::size_t b = 0; b < blocks.groups.size(); ++b)
        lml += eval_block(hyper.blocks[b], blocks.groups[b], hyper.noise, obs, tau, false).lml;
    return lml;
}

Eigen::VectorXd pack_params(const MgpHyperparams& hyper, const BlockStructure& blocks) {
    int total = 0;
    for (const auto& bh : hyper.blocks) total += block_param_count(bh);
    Eigen::VectorXd packed(total);
    int at = 0;
    for (std::size_t b = 0; b < hyper.blocks.size(); ++b) {
        const auto& bh = hyper.blocks[b];
        const auto& group = blocks.groups[b];
        packed[at++] = std::log(bh.period);
        packed[at++] = std::log(bh.lengthscale);
        for (Eigen::Index c = 0; c < bh.task_factors.cols(); ++c)
            for (Eigen::Index a = 0; a < bh.task_factors.rows(); ++a)
                packed[at++] = bh.task_factors(a, c);
        for (Eigen::Index a = 0; a < bh.task_diagonal.size(); ++a)
            packed[at++] = std::log(bh.task_diagonal[a]);
        for (int task : group) packed[at++] = std::log(hyper.noise[task]);
    }
    return packed;
}

MgpHyperparams unpack_params(const Eigen::VectorXd& packed, const BlockStructure& blocks,
                             const std::vector<int>& ranks) {
    MgpHyperparams hyper;
    hyper.noise = Eigen::VectorXd::Zero(blocks.num_tasks);
    int at = 0;
    for (std::size_t b = 0; b < blocks.groups.size(); ++b) {
        const auto& group = blocks.groups[b];
        const int m = static_cast<int>(group.size());
        const int r = ranks[b];
        BlockHyperparams bh;
        bh.period = std::exp(packed[at++]);
        bh.lengthscale = std::exp(packed[at++]);
        bh.task_factors.resize(m, r);
        for (int c = 0; c < r; ++c)
            for (int a = 0; a < m; ++a) bh.task_factors(a, c) = packed[at++];
        bh.task_diagonal.resize(m);
        for (int a = 0; a < m; ++a) bh.task_diagonal[a] = std::exp(packed[at++]);
        for (int a = 0; a < m; ++a) hyper.noise[group[a]] = std::exp(packed[at++]);
        hyper.blocks.push_back(std::move(bh));
    }
    return hyper;
}

Eigen::VectorXd lml_gradient(const MgpHyperparams& hyper, const BlockStructure& blocks,
                             const ObservationSet& obs) {
    blocks.validate();
    const Eigen::MatrixXd tau = abs_diff_matrix(obs.days(), obs.days());
    std::vector<Eigen::VectorXd> parts;
    int total = 0;
    for (std::size_t b = 0; b < blocks.groups.size(); ++b) {
        parts.push_back(
            eval_block(hyper.blocks[b], blocks.groups[b], hyper.noise, obs, tau, true).grad);
        total += static_cast<int>(parts.back().size());
    }
    Eigen::VectorXd grad(total);
    int at = 0;
    for (const auto& part : parts) {
        grad.segment(at, part.size()) = part;
        at += static_cast<int>(part.size());
    }
    return grad;
}

FitResult fit(const ObservationSet& obs, const BlockStructure& blocks, const MgpHyperparams& init,
              const OptimizerConfig& opt) {
    blocks.validate();
    std::vector<int> ranks;
    for (const auto& bh : init.blocks) ranks.push_back(static_cast<int>(bh.task_factors.cols()));

    if (obs.num_days() < 4) {
        FitResult res;
        res.hyper = init;
        res.final_lml = log_marginal_likelihood(init, blocks, obs);
        res.warning = "fewer than 4 observed days; returning initial hyperparameters";
        return res;
    }

    const Eigen::MatrixXd tau = abs_diff_matrix(obs.days(), obs.days());
    const auto evaluate = [&](const Eigen::VectorXd& packed, Eigen::VectorXd* grad) -> double {
        const MgpHyperparams hyper = unpack_params(packed, blocks, ranks);
        double lml = 0.0;
        std::vector<Eigen::VectorXd> parts;
        try {
            for (std::size_t b = 0; b < blocks.groups.size(); ++b) {
                BlockEval ev = eval_block(hyper.blocks[b], blocks.groups[b], hyper.noise, obs, tau,
                                          grad != nullptr);
                lml += ev.lml;
                if (grad) parts.push_back(std::move(ev.grad));
            }
        } catch (const numerical_error&) {
            return -std::numeric_limits<double>::infinity();
        }
        if (grad) {
            grad->resize(packed.size());
            int at = 0;
            for (const auto& part : parts) {
                grad->segment(at, part.size()) = part;
                at += static_cast<int>(part.size());
            }
        }
        return lml;
    };

    const Eigen::VectorXd base = pack_params(init, blocks);

    if (opt.max_iterations == 0) {
        FitResult res;
        res.hyper = init;
        res.final_lml = evaluate(base, nullptr);
        res.restarts_run = 0;
        return res;
    }

    // Restart perturbation scales: log-period coordinates barely move (the
    // cycle-length anchor is the one thing scarce data cannot recover).
    Eigen::VectorXd perturb_scale = Eigen::VectorXd::Constant(base.size(), 0.2);
    {
        int at = 0;
        for (const auto& bh : init.blocks) {
            perturb_scale[at] = 0.03;
            at += block_param_count(bh);
        }
    }

    FitResult result;
    result.restarts_run = std::max(1, opt.restarts);
    double best_overall = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_params = base;

    for (int restart = 0; restart < result.restarts_run; ++restart) {
        Eigen::VectorXd params = base;
        if (restart > 0) {
            Rng rng(mix_seed(opt.seed, static_cast<std::uint64_t>(restart)));
            for (Eigen::Index i = 0; i < params.size(); ++i)
                params[i] += perturb_scale[i] * rng.normal();
        }

        double best_restart = evaluate(params, nullptr);
        Eigen::VectorXd best_restart_params = params;
        Eigen::VectorXd m = Eigen::VectorXd::Zero(params.size());
        Eigen::VectorXd v = Eigen::VectorXd::Zero(params.size());
        double lr = opt.learning_rate;
        int stale = 0;
        int iter = 0;
        constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

        for (iter = 0; iter < opt.max_iterations; ++iter) {
            Eigen::VectorXd grad;
            const double lml = evaluate(params, &grad);
            if (!std::isfinite(lml) || !grad.allFinite()) {
                // Diverged step: back off and continue from the best point.
                params = best_restart_params;
                m.setZero();
                v.setZero();
                lr *= 0.5;
                if (++stale > opt.patience) break;
                continue;
            }
            if (lml > best_restart + opt.tolerance * std::max(1.0, std::abs(best_restart))) {
                stale = 0;
            } else {
                ++stale;
            }
            if (lml > best_restart) {
                best_restart = lml;
                best_restart_params = params;
            }
            if (stale > opt.patience) break;

            m = kBeta1 * m + (1.0 - kBeta1) * grad;
            v = kBeta2 * v + (1.0 - kBeta2) * grad.cwiseAbs2();
            const double c1 = 1.0 - std::pow(kBeta1, iter + 1);
            const double c2 = 1.0 - std::pow(kBeta2, iter + 1);
            params += lr * (m / c1).cwiseQuotient(((v / c2).cwiseSqrt().array() + kEps).matrix());
        }
        result.iterations.push_back(iter);

        if (best_restart > best_overall) {
            best_overall = best_restart;
            best_params = best_restart_params;
        }
    }

    if (!std::isfinite(best_overall))
        throw numerical_error("mgp::fit: all " + std::to_string(result.restarts_run) +
                              " restarts diverged (best likelihood " +
                              std::to_string(best_overall) + ")");
    result.hyper = unpack_params(best_params, blocks, ranks);
    result.final_lml = best_overall;
    return result;
}

PosteriorSeries::PosteriorSeries(Eigen::MatrixXd mean, BlockStructure blocks,
                                 std::vector<Eigen::MatrixXd> group_covariance)
    : mean_(std::move(mean)), blocks_(std::move(blocks)),
      group_covariance_(std::move(group_covariance)) {}

double PosteriorSeries::variance(int task, int day) const {
    const int b = blocks_.block_of(task);
    const int local = blocks_.local_index(task);
    const int T = num_days();
    return group_covariance_[b](local * T + day - 1, local * T + day - 1);
}

Eigen::MatrixXd PosteriorSeries::joint_covariance() const {
    const int T = num_days();
    const int total = num_tasks() * T;
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(total, total);
    for (std::size_t b = 0; b < blocks_.groups.size(); ++b) {
        const auto& group = blocks_.groups[b];
        for (std::size_t a = 0; a < group.size(); ++a)
            for (std::size_t c = 0; c < group.size(); ++c)
                cov.block(group[a] * T, group[c] * T, T, T) =
                    group_covariance_[b].block(a * T, c * T, T, T);
    }
    return cov;
}

PosteriorSeries posterior(const MgpHyperparams& hyper, const BlockStructure& blocks,
                          const ObservationSet& obs, int num_days) {
    blocks.validate();
    if (obs.num_days() == 0) throw data_error("posterior: empty observation set");
    const int n = obs.num_days();
    std::vector<int> grid(num_days);
    std::iota(grid.begin(), grid.end(), 1);

    const Eigen::MatrixXd tau_oo = abs_diff_matrix(obs.days(), obs.days());
    const Eigen::MatrixXd tau_og = abs_diff_matrix(obs.days(), grid);
    const Eigen::MatrixXd tau_gg = abs_diff_matrix(grid, grid);

    Eigen::MatrixXd mean(blocks.num_tasks, num_days);
    std::vector<Eigen::MatrixXd> group_cov;
    for (std::size_t b = 0; b < blocks.groups.size(); ++b) {
        const auto& group = blocks.groups[b];
        const auto& bh = hyper.blocks[b];
        const int m = static_cast<int>(group.size());

        const Eigen::MatrixXd K = task_kernel(bh.task_factors, bh.task_diagonal);
        Eigen::MatrixXd sigma = kron(K, periodic_gram(tau_oo, bh.period, bh.lengthscale));
        sigma += group_noise_covariance(hyper.noise, group, n);
        const Eigen::MatrixXd cross = kron(K, periodic_gram(tau_og, bh.period, bh.lengthscale));
        const Eigen::MatrixXd prior = kron(K, periodic_gram(tau_gg, bh.period, bh.lengthscale));

        const Eigen::MatrixXd L = cholesky_with_jitter(sigma);
        const Eigen::VectorXd y = group_obs_vector(obs, group);
        const Eigen::VectorXd alpha = L.transpose().triangularView<Eigen::Upper>().solve(
            L.triangularView<Eigen::Lower>().solve(y));
        const Eigen::VectorXd mu = cross.transpose() * alpha;
        // Latent-function covariance: prior minus the explained part.
        const Eigen::MatrixXd half = L.triangularView<Eigen::Lower>().solve(cross);
        Eigen::MatrixXd cov = prior - half.transpose() * half;

        for (int a = 0; a < m; ++a) mean.row(group[a]) = mu.segment(a * num_days, num_days);
        group_cov.push_back(std::move(cov));
    }
    return PosteriorSeries(std::move(mean), blocks, std::move(group_cov));
}

std::vector<Eigen::MatrixXd> draw_streams(const PosteriorSeries& post, int num_streams, Rng& rng) {
    if (num_streams < 1) throw data_error("draw_streams: need at least one stream");
    const int T = post.num_days();
    const auto& blocks = post.blocks();

    std::vector<Eigen::MatrixXd> factors;
    for (const auto& cov : post.group_covariance()) factors.push_back(cholesky_with_jitter(cov));

    std::vector<Eigen::MatrixXd> streams;
    streams.reserve(num_streams);
    for (int s = 0; s < num_streams; ++s) {
        Eigen::MatrixXd stream = post.mean();
        for (std::size_t b = 0; b < blocks.groups.size(); ++b) {
            const auto& group = blocks.groups[b];
            Eigen::VectorXd eps(group.size() * T);
            for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = rng.normal();
            const Eigen::VectorXd noise = factors[b] * eps;
            for (std::size_t a = 0; a < group.size(); ++a)
                stream.row(group[a]) += noise.segment(a * T, T);
        }
        streams.push_back(std::move(stream));
    }
    return streams;
}

Eigen::MatrixXd cholesky_with_jitter(const Eigen::MatrixXd& m, double* jitter_used) {
    if (m.rows() != m.cols()) throw data_error("cholesky_with_jitter: matrix not square");
    if (m.isZero(0.0)) {
        if (jitter_used) *jitter_used = 0.0;
        return Eigen::MatrixXd::Zero(m.rows(), m.cols());
    }
    const double trace_mean = m.trace() / static_cast<double>(m.rows());
    double jitter = 0.0;
    for (;;) {
        Eigen::MatrixXd trial = m;
        if (jitter > 0.0) trial.diagonal().array() += jitter;
        Eigen::LLT<Eigen::MatrixXd> llt(trial);
        if (llt.info() == Eigen::Success) {
            if (jitter_used) *jitter_used = jitter;
            return llt.matrixL();
        }
        if (jitter == 0.0) {
            jitter = 1e-8 * trace_mean;
        } else if (jitter < 0.99e-4 * trace_mean) {
            jitter *= 10.0;
        } else {
            throw numerical_error("Cholesky failed after jitter escalation to 1e-4 * trace mean");
        }
        if (!(jitter > 0.0))
            throw numerical_error("Cholesky failed: non-positive trace, cannot jitter");
    }
}

namespace {

json hyper_to_json(const MgpHyperparams& hyper) {
    json blocks_json = json::array();
    for (const auto& bh : hyper.blocks) {
        json V = json::array();
        for (Eigen::Index a = 0; a < bh.task_factors.rows(); ++a) {
            json row = json::array();
            for (Eigen::Index c = 0; c < bh.task_factors.cols(); ++c)
                row.push_back(bh.task_factors(a, c));
            V.push_back(row);
        }
        json v = json::array();
        for (Eigen::Index a = 0; a < bh.task_diagonal.size(); ++a)
            v.push_back(bh.task_diagonal[a]);
        blocks_json.push_back({{"period", bh.period},
                               {"lengthscale", bh.lengthscale},
                               {"task_factors", V},
                               {"task_diagonal", v}});
    }
    json noise = json::array();
    for (Eigen::Index h = 0; h < hyper.noise.size(); ++h) noise.push_back(hyper.noise[h]);
    return {{"blocks", blocks_json}, {"noise", noise}};
}

MgpHyperparams hyper_from_json(const json& j) {
    MgpHyperparams hyper;
    for (const auto& bj : j.at("blocks")) {
        BlockHyperparams bh;
        bh.period = bj.at("period").get<double>();
        bh.lengthscale = bj.at("lengthscale").get<double>();
        const auto& V = bj.at("task_factors");
        const int m = static_cast<int>(V.size());
        const int r = m > 0 ? static_cast<int>(V[0].size()) : 0;
        bh.task_factors.resize(m, r);
        for (int a = 0; a < m; ++a)
            for (int c = 0; c < r; ++c) bh.task_factors(a, c) = V[a][c].get<double>();
        const auto& v = bj.at("task_diagonal");
        bh.task_diagonal.resize(static_cast<int>(v.size()));
        for (std::size_t a = 0; a < v.size(); ++a) bh.task_diagonal[a] = v[a].get<double>();
        hyper.blocks.push_back(std::move(bh));
    }
    const auto& noise = j.at("noise");
    hyper.noise.resize(static_cast<int>(noise.size()));
    for (std::size_t h = 0; h < noise.size(); ++h) hyper.noise[h] = noise[h].get<double>();
    return hyper;
}

}  // namespace

void write_model(const std::string& path, const BlockStructure& blocks, const FitResult& result) {
    json j = {{"block_structure", {{"num_tasks", blocks.num_tasks}, {"groups", blocks.groups}}},
              {"hyperparameters", hyper_to_json(result.hyper)},
              {"diagnostics",
               {{"final_lml", result.final_lml},
                {"restarts", result.restarts_run},
                {"iterations", result.iterations},
                {"warning", result.warning}}}};
    io_util::write_text_file(path, j.dump(2) + "\n");
}

FitResult read_model(const std::string& path, BlockStructure* blocks) {
    const json j = json::parse(io_util::read_text_file(path));
    if (blocks) {
        blocks->num_tasks = j.at("block_structure").at("num_tasks").get<int>();
        blocks->groups =
            j.at("block_structure").at("groups").get<std::vector<std::vector<int>>>();
    }
    FitResult result;
    result.hyper = hyper_from_json(j.at("hyperparameters"));
    const auto& d = j.at("diagnostics");
    result.final_lml = d.at("final_lml").get<double>();
    result.restarts_run = d.at("restarts").get<int>();
    result.iterations = d.at("iterations").get<std::vector<int>>();
    result.warning = d.at("warning").get<std::string>();
    return result;
}

void write_posterior_csv(const std::string& path, const std::string& individual_id,
                         const PosteriorSeries& post, const std::vector<std::string>& task_names) {
    std::string out = "individual_id,day,hormone,mean,variance\n";
    for (int h = 0; h < post.num_tasks(); ++h) {
        const std::string name =
            h < static_cast<int>(task_names.size()) ? task_names[h] : std::to_string(h);
        for (int t = 1; t <= post.num_days(); ++t) {
            out += individual_id + ',' + std::to_string(t) + ',' + name + ',' +
                   io_util::format_double(post.mean()(h, t - 1)) + ',' +
                   io_util::format_double(post.variance(h, t)) + '\n';
        }
    }
    io_util::write_text_file(path, out);
}

}  // namespace cyclefit::mgp
