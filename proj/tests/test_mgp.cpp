#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "cyclefit/mgp.hpp"

using namespace cyclefit;
using namespace cyclefit::mgp;

namespace {

// Independent scalar kernel for the brute-force oracles.
double oracle_kernel(double t, double u, double p, double l) {
    const double s = std::sin(M_PI * std::fabs(t - u) / p);
    return std::exp(-2.0 * s * s / (l * l));
}

// Element-wise double-loop construction of the full covariance, sharing no
// code with build_covariance.
Eigen::MatrixXd oracle_covariance(const MgpHyperparams& hyper, const BlockStructure& blocks,
                                  const std::vector<int>& days, bool with_noise) {
    const int n = static_cast<int>(days.size());
    const int H = blocks.num_tasks;
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(H * n, H * n);
    for (int h = 0; h < H; ++h) {
        for (int g = 0; g < H; ++g) {
            const int bh = blocks.block_of(h);
            if (bh != blocks.block_of(g)) continue;
            const auto& hp = hyper.blocks[bh];
            const int lh = blocks.local_index(h);
            const int lg = blocks.local_index(g);
            double task = hp.task_factors.row(lh).dot(hp.task_factors.row(lg));
            if (h == g) task += hp.task_diagonal[lh];
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < n; ++j)
                    sigma(h * n + i, g * n + j) =
                        task * oracle_kernel(days[i], days[j], hp.period, hp.lengthscale);
        }
    }
    if (with_noise)
        for (int h = 0; h < H; ++h)
            for (int i = 0; i < n; ++i) sigma(h * n + i, h * n + i) += hyper.noise[h];
    return sigma;
}

struct RandomInstance {
    BlockStructure blocks;
    MgpHyperparams hyper;
    std::vector<int> days;
    Eigen::MatrixXd values;  // n x H
};

RandomInstance random_instance(Rng& rng, int max_tasks = 3, int max_days = 6) {
    RandomInstance inst;
    const int H = rng.uniform_int(1, max_tasks);
    const int n = rng.uniform_int(2, max_days);

    // Random partition of 0..H-1 into groups.
    inst.blocks.num_tasks = H;
    const int num_groups = rng.uniform_int(1, H);
    std::vector<std::vector<int>> groups(num_groups);
    for (int h = 0; h < H; ++h)
        groups[h < num_groups ? h : rng.uniform_int(0, num_groups - 1)].push_back(h);
    for (auto& g : groups) std::sort(g.begin(), g.end());
    inst.blocks.groups = groups;
    inst.blocks.validate();

    for (const auto& group : groups) {
        const int m = static_cast<int>(group.size());
        const int r = rng.uniform_int(1, std::max(1, std::min(2, m)));
        BlockHyperparams bh;
        bh.period = 20.0 + 20.0 * rng.uniform();
        bh.lengthscale = 0.5 + 1.5 * rng.uniform();
        bh.task_factors.resize(m, r);
        for (int c = 0; c < r; ++c)
            for (int a = 0; a < m; ++a) bh.task_factors(a, c) = 0.4 * rng.normal();
        bh.task_diagonal.resize(m);
        for (int a = 0; a < m; ++a) bh.task_diagonal[a] = 0.3 + 0.7 * rng.uniform();
        inst.hyper.blocks.push_back(std::move(bh));
    }
    inst.hyper.noise.resize(H);
    for (int h = 0; h < H; ++h) inst.hyper.noise[h] = 0.05 + 0.4 * rng.uniform();

    std::vector<bool> taken(41, false);
    while (static_cast<int>(inst.days.size()) < n) {
        const int d = rng.uniform_int(1, 40);
        if (!taken[d]) {
            taken[d] = true;
            inst.days.push_back(d);
        }
    }
    std::sort(inst.days.begin(), inst.days.end());

    inst.values.resize(n, H);
    for (int i = 0; i < n; ++i)
        for (int h = 0; h < H; ++h) inst.values(i, h) = rng.normal();
    return inst;
}

}  // namespace

TEST_CASE("periodic kernel: unit diagonal, exact-period symmetry, frozen value") {
    CHECK(periodic_kernel(17.0, 17.0, 29.0, 1.3) == 1.0);
    CHECK(periodic_kernel(3.0, 3.0 + 29.0, 29.0, 0.7) == doctest::Approx(1.0).epsilon(1e-15));
    // sin(pi * 7.25 / 29)^2 = 1/2 exactly, so the value is e^{-1}.
    CHECK(periodic_kernel(0.0, 7.25, 29.0, 1.0) ==
          doctest::Approx(0.36787944117144233).epsilon(1e-12));

    Rng rng(2);
    for (int i = 0; i < 200; ++i) {
        const double v = periodic_kernel(rng.uniform() * 100, rng.uniform() * 100,
                                         5.0 + rng.uniform() * 40, 0.2 + rng.uniform() * 3);
        CHECK(v > 0.0);
        CHECK(v <= 1.0);
    }
    CHECK_THROWS_AS(periodic_kernel(0, 1, -1.0, 1.0), std::invalid_argument);
}

TEST_CASE("task kernel: identity, hand value, eigenvalue floor") {
    CHECK(task_kernel(Eigen::MatrixXd::Zero(3, 2), Eigen::VectorXd::Ones(3)) ==
          Eigen::MatrixXd::Identity(3, 3));

    Eigen::MatrixXd V(2, 1);
    V << 1.0, 1.0;
    Eigen::VectorXd v(2);
    v << 0.1, 0.1;
    const Eigen::MatrixXd K = task_kernel(V, v);
    CHECK(K(0, 0) == doctest::Approx(1.1).epsilon(1e-15));
    CHECK(K(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(K(1, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(K(1, 1) == doctest::Approx(1.1).epsilon(1e-15));

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const int m = rng.uniform_int(1, 5);
        const int r = rng.uniform_int(1, 3);
        Eigen::MatrixXd Vr(m, r);
        for (int i = 0; i < m * r; ++i) Vr(i / r, i % r) = rng.normal();
        Eigen::VectorXd vr(m);
        for (int i = 0; i < m; ++i) vr[i] = 0.05 + rng.uniform();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(task_kernel(Vr, vr));
        CHECK(es.eigenvalues().minCoeff() >= vr.minCoeff() - 1e-10);
    }

    Eigen::VectorXd bad(2);
    bad << 0.5, 0.0;
    CHECK_THROWS_AS(task_kernel(V, bad), data_error);
}

TEST_CASE("build_covariance: single hormone reduces to a scalar GP gram matrix") {
    BlockStructure blocks = BlockStructure::full(1);
    MgpHyperparams hyper;
    BlockHyperparams bh;
    bh.period = 28.0;
    bh.lengthscale = 1.1;
    bh.task_factors = Eigen::MatrixXd::Constant(1, 1, 0.8);
    bh.task_diagonal = Eigen::VectorXd::Constant(1, 0.3);
    hyper.blocks.push_back(bh);
    hyper.noise = Eigen::VectorXd::Constant(1, 0.07);

    const std::vector<int> days = {2, 9, 23, 40};
    const Eigen::MatrixXd sigma = build_covariance(hyper, blocks, days, true);
    const double k00 = 0.8 * 0.8 + 0.3;
    for (std::size_t i = 0; i < days.size(); ++i) {
        for (std::size_t j = 0; j < days.size(); ++j) {
            double expected = k00 * oracle_kernel(days[i], days[j], 28.0, 1.1);
            if (i == j) expected += 0.07;
            CHECK(sigma(i, j) == doctest::Approx(expected).epsilon(1e-14));
        }
    }
}

TEST_CASE("build_covariance: 2-hormone full block equals the 6x6 brute-force matrix") {
    Rng rng(11);
    BlockStructure blocks = BlockStructure::full(2);
    MgpHyperparams hyper = MgpHyperparams::initial(blocks, 27.0, 2, rng);
    const std::vector<int> days = {4, 11, 30};

    const Eigen::MatrixXd sigma = build_covariance(hyper, blocks, days, true);
    const Eigen::MatrixXd oracle = oracle_covariance(hyper, blocks, days, true);
    REQUIRE(sigma.rows() == 6);
    CHECK((sigma - oracle).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("build_covariance: singleton blocks have exactly zero cross-hormone entries") {
    Rng rng(12);
    BlockStructure blocks = BlockStructure::independent(5);
    MgpHyperparams hyper = MgpHyperparams::initial(blocks, 29.0, 2, rng);
    const std::vector<int> days = {1, 8, 15};
    const int n = static_cast<int>(days.size());

    const Eigen::MatrixXd sigma = build_covariance(hyper, blocks, days, false);
    for (int h = 0; h < 5; ++h)
        for (int g = 0; g < 5; ++g)
            if (h != g) CHECK(sigma.block(h * n, g * n, n, n).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("build_covariance matches brute force on random instances and factorizes") {
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        const auto inst = random_instance(rng);
        const Eigen::MatrixXd sigma = build_covariance(inst.hyper, inst.blocks, inst.days, true);
        const Eigen::MatrixXd oracle =
            oracle_covariance(inst.hyper, inst.blocks, inst.days, true);
        CHECK((sigma - oracle).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK((sigma - sigma.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK_NOTHROW(cholesky_with_jitter(sigma));
    }
}

TEST_CASE("log marginal likelihood: 1-d case, dense oracle, scaling identity") {
    // Single observation of a single hormone with y = 0.
    BlockStructure b1 = BlockStructure::full(1);
    MgpHyperparams h1;
    BlockHyperparams bh;
    bh.period = 29.0;
    bh.lengthscale = 1.0;
    bh.task_factors = Eigen::MatrixXd::Constant(1, 1, 0.6);
    bh.task_diagonal = Eigen::VectorXd::Constant(1, 0.4);
    h1.blocks.push_back(bh);
    h1.noise = Eigen::VectorXd::Constant(1, 0.2);
    const double s = 0.6 * 0.6 + 0.4 + 0.2;
    ObservationSet obs1({10}, Eigen::MatrixXd::Zero(1, 1));
    CHECK(log_marginal_likelihood(h1, b1, obs1) ==
          doctest::Approx(-0.5 * std::log(2.0 * M_PI * s)).epsilon(1e-12));

    // Dense oracle on a 2-hormone, 3-day case.
    Rng rng(21);
    BlockStructure b2 = BlockStructure::full(2);
    MgpHyperparams h2 = MgpHyperparams::initial(b2, 26.0, 2, rng);
    const std::vector<int> days = {3, 10, 18};
    Eigen::MatrixXd values(3, 2);
    for (int i = 0; i < 6; ++i) values(i / 2, i % 2) = rng.normal();
    ObservationSet obs2(days, values);

    const Eigen::MatrixXd sigma = oracle_covariance(h2, b2, days, true);
    Eigen::VectorXd y(6);
    for (int h = 0; h < 2; ++h)
        for (int i = 0; i < 3; ++i) y[h * 3 + i] = values(i, h);
    const double dense = -0.5 * y.dot(sigma.inverse() * y) - 0.5 * std::log(sigma.determinant()) -
                         3.0 * std::log(2.0 * M_PI);
    CHECK(log_marginal_likelihood(h2, b2, obs2) == doctest::Approx(dense).epsilon(1e-10));

    // Scaling the whole Gaussian: V*sqrt(c), v*c, d*c, y*sqrt(c) shifts the
    // log density by -(N/2) log c.
    const double c = 2.7;
    MgpHyperparams scaled = h2;
    scaled.blocks[0].task_factors *= std::sqrt(c);
    scaled.blocks[0].task_diagonal *= c;
    scaled.noise *= c;
    ObservationSet obs_scaled(days, values * std::sqrt(c));
    const double expected_shift = -(6.0 / 2.0) * std::log(c);
    const double shift =
        log_marginal_likelihood(scaled, b2, obs_scaled) - log_marginal_likelihood(h2, b2, obs2);
    CHECK(shift == doctest::Approx(expected_shift).epsilon(1e-9));
}

TEST_CASE("lml gradient matches central finite differences") {
    Rng rng(31);
    int instances = 0;
    while (instances < 12) {
        auto inst = random_instance(rng);
        if (inst.days.size() < 2) continue;
        ++instances;
        ObservationSet obs(inst.days, inst.values);
        std::vector<int> ranks;
        for (const auto& bh : inst.hyper.blocks)
            ranks.push_back(static_cast<int>(bh.task_factors.cols()));

        const Eigen::VectorXd packed = pack_params(inst.hyper, inst.blocks);
        const Eigen::VectorXd grad = lml_gradient(inst.hyper, inst.blocks, obs);
        REQUIRE(grad.size() == packed.size());

        const double step = 1e-5;
        for (Eigen::Index i = 0; i < packed.size(); ++i) {
            Eigen::VectorXd up = packed, dn = packed;
            up[i] += step;
            dn[i] -= step;
            const double fd = (log_marginal_likelihood(unpack_params(up, inst.blocks, ranks),
                                                        inst.blocks, obs) -
                               log_marginal_likelihood(unpack_params(dn, inst.blocks, ranks),
                                                       inst.blocks, obs)) /
                              (2.0 * step);
            const double err = std::abs(grad[i] - fd);
            CHECK(err <= 1e-4 * std::max({std::abs(grad[i]), std::abs(fd), 1e-3}));
        }
    }
}

TEST_CASE("fit: degenerate inputs honor the contracts") {
    Rng rng(41);
    BlockStructure blocks = BlockStructure::full(2);
    MgpHyperparams init = MgpHyperparams::initial(blocks, 29.0, 2, rng);

    Eigen::MatrixXd values(3, 2);
    values.setRandom();
    ObservationSet three_days({5, 12, 20}, values);
    OptimizerConfig opt;
    const auto skipped = fit(three_days, blocks, init, opt);
    CHECK_FALSE(skipped.warning.empty());
    CHECK(pack_params(skipped.hyper, blocks) == pack_params(init, blocks));

    Eigen::MatrixXd v5(5, 2);
    v5.setRandom();
    ObservationSet obs({3, 9, 16, 25, 33}, v5);
    OptimizerConfig zero_iters;
    zero_iters.max_iterations = 0;
    const auto untouched = fit(obs, blocks, init, zero_iters);
    CHECK(pack_params(untouched.hyper, blocks) == pack_params(init, blocks));

    OptimizerConfig small;
    small.max_iterations = 60;
    small.restarts = 2;
    const double init_lml = log_marginal_likelihood(init, blocks, obs);
    const auto fitted = fit(obs, blocks, init, small);
    CHECK(fitted.final_lml >= init_lml);
    CHECK(fitted.final_lml ==
          doctest::Approx(log_marginal_likelihood(fitted.hyper, blocks, obs)).epsilon(1e-12));
}

TEST_CASE("fit reports divergence when the likelihood is never finite") {
    Rng rng(45);
    BlockStructure blocks = BlockStructure::full(2);
    MgpHyperparams init = MgpHyperparams::initial(blocks, 29.0, 1, rng);
    Eigen::MatrixXd values(5, 2);
    values.setConstant(std::numeric_limits<double>::quiet_NaN());
    ObservationSet obs({2, 8, 15, 23, 31}, values);
    OptimizerConfig opt;
    opt.max_iterations = 5;
    CHECK_THROWS_AS(fit(obs, blocks, init, opt), numerical_error);
}

TEST_CASE("fit recovers the generating period within a day") {
    // Draw a 70-day, 2-hormone series from known hyperparameters.
    BlockStructure blocks = BlockStructure::full(2);
    MgpHyperparams truth;
    BlockHyperparams bh;
    bh.period = 27.5;
    bh.lengthscale = 1.2;
    bh.task_factors.resize(2, 1);
    bh.task_factors << 0.9, 0.7;
    bh.task_diagonal.resize(2);
    bh.task_diagonal << 0.3, 0.3;
    truth.blocks.push_back(bh);
    truth.noise.resize(2);
    truth.noise << 0.05, 0.05;

    std::vector<int> days(70);
    for (int i = 0; i < 70; ++i) days[i] = i + 1;
    const Eigen::MatrixXd sigma = build_covariance(truth, blocks, days, true);
    const Eigen::MatrixXd L = cholesky_with_jitter(sigma);
    Rng rng(55);
    Eigen::VectorXd z(sigma.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    const Eigen::VectorXd y = L * z;
    Eigen::MatrixXd values(70, 2);
    for (int h = 0; h < 2; ++h)
        for (int i = 0; i < 70; ++i) values(i, h) = y[h * 70 + i];
    ObservationSet obs(days, values);

    Rng init_rng(56);
    const MgpHyperparams init = MgpHyperparams::initial(blocks, 29.0, 1, init_rng);
    OptimizerConfig opt;
    opt.max_iterations = 400;
    opt.restarts = 2;
    opt.seed = 57;
    const auto fitted = fit(obs, blocks, init, opt);
    CHECK(std::abs(fitted.hyper.blocks[0].period - 27.5) <= 1.0);
}

TEST_CASE("posterior interpolates the observations when noise vanishes") {
    Rng rng(61);
    for (int trial = 0; trial < 10; ++trial) {
        auto inst = random_instance(rng, 2, 5);
        inst.hyper.noise.setConstant(1e-10);
        ObservationSet obs(inst.days, inst.values);
        const auto post = posterior(inst.hyper, inst.blocks, obs, 40);
        for (int i = 0; i < obs.num_days(); ++i)
            for (int h = 0; h < inst.blocks.num_tasks; ++h)
                CHECK(std::abs(post.mean()(h, obs.days()[i] - 1) - inst.values(i, h)) <= 1e-4);
    }
}

TEST_CASE("posterior variance reverts to the prior far from observations") {
    BlockStructure blocks = BlockStructure::full(1);
    MgpHyperparams hyper;
    BlockHyperparams bh;
    bh.period = 29.0;
    bh.lengthscale = 0.25;  // short lengthscale: day 15 is effectively unseen
    bh.task_factors = Eigen::MatrixXd::Constant(1, 1, 0.7);
    bh.task_diagonal = Eigen::VectorXd::Constant(1, 0.5);
    hyper.blocks.push_back(bh);
    hyper.noise = Eigen::VectorXd::Constant(1, 0.1);

    ObservationSet obs({1}, Eigen::MatrixXd::Constant(1, 1, 1.3));
    const auto post = posterior(hyper, blocks, obs, 29);
    const double prior_var = 0.7 * 0.7 + 0.5;
    CHECK(std::abs(post.variance(0, 15) - prior_var) <= 0.01 * prior_var);
}

TEST_CASE("within a full block one hormone's observations move the other's posterior") {
    Rng rng(62);
    BlockStructure blocks = BlockStructure::full(2);
    MgpHyperparams hyper = MgpHyperparams::initial(blocks, 25.0, 1, rng);
    hyper.blocks[0].task_factors << 0.9, 0.8;  // strong coupling

    const std::vector<int> days = {4, 12, 21};
    Eigen::MatrixXd values(3, 2);
    values << 0.3, -0.2, 1.0, 0.4, -0.6, 0.9;
    ObservationSet obs(days, values);
    const int T = 30;
    const auto base = posterior(hyper, blocks, obs, T);

    Eigen::MatrixXd perturbed = values;
    perturbed(1, 1) += 0.5;  // hormone 1, day 12
    const auto moved = posterior(hyper, blocks, ObservationSet(days, perturbed), T);
    const double delta = (moved.mean().row(0) - base.mean().row(0)).cwiseAbs().maxCoeff();
    CHECK(delta > 1e-4);

    // Dense-oracle check of the perturbed posterior mean.
    const Eigen::MatrixXd sigma = oracle_covariance(hyper, blocks, days, true);
    Eigen::MatrixXd cross(6, 2 * T);
    const auto& bh = hyper.blocks[0];
    const Eigen::MatrixXd K = task_kernel(bh.task_factors, bh.task_diagonal);
    for (int h = 0; h < 2; ++h)
        for (int i = 0; i < 3; ++i)
            for (int g = 0; g < 2; ++g)
                for (int t = 0; t < T; ++t)
                    cross(h * 3 + i, g * T + t) =
                        K(h, g) * oracle_kernel(days[i], t + 1, bh.period, bh.lengthscale);
    Eigen::VectorXd y(6);
    for (int h = 0; h < 2; ++h)
        for (int i = 0; i < 3; ++i) y[h * 3 + i] = perturbed(i, h);
    const Eigen::VectorXd dense_mean = cross.transpose() * sigma.inverse() * y;
    for (int g = 0; g < 2; ++g)
        for (int t = 0; t < T; ++t)
            CHECK(moved.mean()(g, t) == doctest::Approx(dense_mean[g * T + t]).epsilon(1e-8));
}

TEST_CASE("posterior is invariant to the order observations are supplied in") {
    Rng rng(63);
    auto inst = random_instance(rng, 3, 6);
    ObservationSet sorted_obs(inst.days, inst.values);

    // Reverse the rows before construction.
    std::vector<int> rev_days(inst.days.rbegin(), inst.days.rend());
    Eigen::MatrixXd rev_values = inst.values.colwise().reverse();
    ObservationSet shuffled_obs(rev_days, rev_values);

    const auto a = posterior(inst.hyper, inst.blocks, sorted_obs, 20);
    const auto b = posterior(inst.hyper, inst.blocks, shuffled_obs, 20);
    CHECK((a.mean() - b.mean()).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK((a.joint_covariance() - b.joint_covariance()).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("independent blocks reproduce per-hormone scalar GPs") {
    Rng rng(64);
    BlockStructure blocks = BlockStructure::independent(5);
    MgpHyperparams hyper = MgpHyperparams::initial(blocks, 28.0, 2, rng);
    const std::vector<int> days = {2, 9, 17, 26, 33, 41};
    Eigen::MatrixXd values(6, 5);
    for (int i = 0; i < 30; ++i) values(i / 5, i % 5) = rng.normal();
    ObservationSet obs(days, values);
    const int T = 50;
    const auto post = posterior(hyper, blocks, obs, T);

    for (int h = 0; h < 5; ++h) {
        const auto& bh = hyper.blocks[h];
        const double amp = bh.task_factors(0, 0) * bh.task_factors(0, 0) + bh.task_diagonal[0];
        Eigen::MatrixXd gram(6, 6);
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j)
                gram(i, j) = amp * oracle_kernel(days[i], days[j], bh.period, bh.lengthscale);
        gram.diagonal().array() += hyper.noise[h];
        const Eigen::MatrixXd gram_inv = gram.inverse();
        Eigen::MatrixXd cross(6, T);
        for (int i = 0; i < 6; ++i)
            for (int t = 0; t < T; ++t)
                cross(i, t) = amp * oracle_kernel(days[i], t + 1, bh.period, bh.lengthscale);
        const Eigen::VectorXd scalar_mean = cross.transpose() * gram_inv * values.col(h);
        for (int t = 0; t < T; ++t) {
            CHECK(std::abs(post.mean()(h, t) - scalar_mean[t]) <= 1e-10);
            const Eigen::VectorXd kc = cross.col(t);
            const double scalar_var = amp - kc.dot(gram_inv * kc);
            CHECK(std::abs(post.variance(h, t + 1) - scalar_var) <= 1e-10);
        }
    }
}

TEST_CASE("draw_streams: zero covariance, moment recovery, shape") {
    // Zero covariance: streams equal the mean bit-for-bit.
    BlockStructure b2 = BlockStructure::full(2);
    Eigen::MatrixXd mean(2, 8);
    mean.setRandom();
    PosteriorSeries degenerate(mean, b2, {Eigen::MatrixXd::Zero(16, 16)});
    Rng rng(71);
    for (const auto& stream : draw_streams(degenerate, 5, rng)) CHECK(stream == mean);

    // Monte-Carlo variance check on a healthy small posterior.
    const int T = 6;
    Eigen::MatrixXd cov(T, T);
    for (int i = 0; i < T; ++i)
        for (int j = 0; j < T; ++j) cov(i, j) = 0.8 * oracle_kernel(i, j, 9.0, 1.0);
    cov.diagonal().array() += 0.05;
    BlockStructure b1 = BlockStructure::full(1);
    PosteriorSeries post(Eigen::MatrixXd::Zero(1, T), b1, {cov});
    Rng rng2(72);
    const auto streams = draw_streams(post, 10000, rng2);
    for (int t = 0; t < T; ++t) {
        double m2 = 0.0, m1 = 0.0;
        for (const auto& s : streams) {
            m1 += s(0, t);
            m2 += s(0, t) * s(0, t);
        }
        m1 /= streams.size();
        m2 = m2 / streams.size() - m1 * m1;
        CHECK(std::abs(m2 - cov(t, t)) <= 0.05 * cov(t, t));
    }

    // Default stream count and full-grid shape.
    BlockStructure bw = BlockStructure::blockwise();
    std::vector<Eigen::MatrixXd> covs;
    covs.push_back(Eigen::MatrixXd::Identity(3 * 105, 3 * 105) * 0.01);
    covs.push_back(Eigen::MatrixXd::Identity(2 * 105, 2 * 105) * 0.01);
    PosteriorSeries full(Eigen::MatrixXd::Zero(5, 105), bw, covs);
    Rng rng3(73);
    const auto s100 = draw_streams(full, 100, rng3);
    CHECK(s100.size() == 100);
    CHECK(s100[0].rows() == 5);
    CHECK(s100[0].cols() == 105);

    CHECK_THROWS_AS(draw_streams(full, 0, rng3), data_error);
}

TEST_CASE("jitter policy: semi-definite passes, negative definite fails") {
    Eigen::MatrixXd semi(2, 2);
    semi << 1.0, 1.0, 1.0, 1.0;  // rank one
    double jitter = -1.0;
    const Eigen::MatrixXd L = cholesky_with_jitter(semi, &jitter);
    CHECK(((L * L.transpose()) - semi).cwiseAbs().maxCoeff() <= 1e-4);

    CHECK_THROWS_AS(cholesky_with_jitter(-Eigen::MatrixXd::Identity(3, 3)), numerical_error);
}

TEST_CASE("observation set rejects malformed input and sorts rows") {
    Eigen::MatrixXd values(2, 1);
    values << 1.0, 2.0;
    CHECK_THROWS_AS(ObservationSet({5, 5}, values), data_error);
    CHECK_THROWS_AS(ObservationSet({0, 3}, values), data_error);

    ObservationSet obs({9, 4}, values);
    CHECK(obs.days() == std::vector<int>{4, 9});
    CHECK(obs.values()(0, 0) == 2.0);
    CHECK(obs.values()(1, 0) == 1.0);
}

TEST_CASE("model files round-trip hyperparameters and diagnostics") {
    Rng rng(81);
    BlockStructure blocks = BlockStructure::blockwise();
    FitResult result;
    result.hyper = MgpHyperparams::initial(blocks, 30.5, 2, rng);
    result.final_lml = -123.456;
    result.restarts_run = 3;
    result.iterations = {12, 200, 57};
    result.warning = "";

    const std::string path = "/tmp/cyclefit_model_test.json";
    write_model(path, blocks, result);
    BlockStructure loaded_blocks;
    const auto loaded = read_model(path, &loaded_blocks);
    CHECK(loaded_blocks.groups == blocks.groups);
    CHECK(loaded.final_lml == result.final_lml);
    CHECK(loaded.iterations == result.iterations);
    CHECK(pack_params(loaded.hyper, blocks) == pack_params(result.hyper, blocks));
}
