#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "cyclefit/dcnn.hpp"

using namespace cyclefit;
using namespace cyclefit::dcnn;

namespace {

DcnnConfig small_config() {
    DcnnConfig config;
    config.layers = 3;
    config.dilation = 2;
    config.filter_size = 3;
    config.hidden_width = 6;
    return config;
}

Eigen::MatrixXd random_matrix(int rows, int cols, Rng& rng, double scale = 1.0) {
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
    return m;
}

}  // namespace

TEST_CASE("dilated convolution: width-1 identity filter passes input through") {
    Rng rng(1);
    const Eigen::MatrixXd x = random_matrix(4, 25, rng);
    const std::vector<Eigen::MatrixXd> filter = {Eigen::MatrixXd::Identity(4, 4)};
    CHECK(dilated_conv_noncausal(x, filter, 3) == x);
}

TEST_CASE("dilated convolution: impulse lands on the expected taps") {
    const int T = 30, t0 = 14;  // 0-based impulse position
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(1, T);
    x(0, t0) = 1.0;
    const double a = 0.3, b = -1.1, c = 2.2;
    std::vector<Eigen::MatrixXd> filter = {Eigen::MatrixXd::Constant(1, 1, a),
                                           Eigen::MatrixXd::Constant(1, 1, b),
                                           Eigen::MatrixXd::Constant(1, 1, c)};
    const Eigen::MatrixXd out = dilated_conv_noncausal(x, filter, 2);
    for (int t = 0; t < T; ++t) {
        double expected = 0.0;
        if (t == t0 + 2) expected = a;
        if (t == t0) expected = b;
        if (t == t0 - 2) expected = c;
        CHECK(out(0, t) == expected);
    }
}

TEST_CASE("dilated convolution by definition on random inputs") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const int C = rng.uniform_int(1, 3), Cp = rng.uniform_int(1, 3);
        const int K = rng.uniform_int(1, 5), d = rng.uniform_int(1, 3), T = rng.uniform_int(5, 30);
        const Eigen::MatrixXd x = random_matrix(C, T, rng);
        std::vector<Eigen::MatrixXd> filter;
        for (int k = 0; k < K; ++k) filter.push_back(random_matrix(Cp, C, rng));

        const Eigen::MatrixXd out = dilated_conv_noncausal(x, filter, d);
        // Direct evaluation of out[c',t] = sum_{c,k} f_k(c',c) x(c, t + d(k - K/2)).
        for (int cp = 0; cp < Cp; ++cp) {
            for (int t = 0; t < T; ++t) {
                double expected = 0.0;
                for (int k = 0; k < K; ++k) {
                    const int src = t + d * (k - K / 2);
                    if (src < 0 || src >= T) continue;
                    for (int ci = 0; ci < C; ++ci) expected += filter[k](cp, ci) * x(ci, src);
                }
                CHECK(out(cp, t) == doctest::Approx(expected).epsilon(1e-13));
            }
        }
    }
}

TEST_CASE("causal reduction: reversed taps shifted by K-1-floor(K/2) give sum f[k] x[t-k]") {
    Rng rng(3);
    const int T = 40, K = 4;
    const Eigen::MatrixXd x = random_matrix(1, T, rng);
    std::vector<double> f;
    for (int k = 0; k < K; ++k) f.push_back(rng.normal());

    std::vector<Eigen::MatrixXd> reversed;
    for (int k = 0; k < K; ++k)
        reversed.push_back(Eigen::MatrixXd::Constant(1, 1, f[K - 1 - k]));
    const Eigen::MatrixXd mine = dilated_conv_noncausal(x, reversed, 1);

    const int shift = K - 1 - K / 2;
    for (int t = K - 1; t < T - shift; ++t) {
        double causal = 0.0;
        for (int k = 0; k < K; ++k) causal += f[k] * x(0, t - k);
        CHECK(mine(0, t - shift) == doctest::Approx(causal).epsilon(1e-12));
    }
}

TEST_CASE("forward: zero model maps anything to zero; random weights stay finite") {
    Rng rng(4);
    const auto zero = DcnnModel::zeros(small_config(), 5);
    const Eigen::MatrixXd z = random_matrix(5, 40, rng);
    CHECK(forward(zero, z) == Eigen::MatrixXd::Zero(5, 40));

    Rng rng2(5);
    const auto model = DcnnModel::init(small_config(), 5, rng2);
    CHECK(forward(model, z).allFinite());
}

TEST_CASE("receptive field formula and schedules") {
    DcnnConfig c = small_config();  // L=3, d=2, K=3
    const auto f = receptive_field(c);
    CHECK(f.backward == 6);
    CHECK(f.forward == 6);

    DcnnConfig k1 = c;
    k1.filter_size = 1;
    CHECK(receptive_field(k1).backward == 0);
    CHECK(receptive_field(k1).forward == 0);

    // 4 hidden layers, d = 2, K = 2, exponentially growing dilation: the last
    // layer runs at dilation 2^4 = 16 and reaches 16*(K-1) = 16 steps back on
    // its own; the backward taps of all layers stack to 2+4+8+16 = 30.
    DcnnConfig fig;
    fig.layers = 4;
    fig.dilation = 2;
    fig.filter_size = 2;
    fig.hidden_width = 5;
    fig.schedule = DilationSchedule::kExponential;
    CHECK(fig.dilation_of_layer(3) == 16);
    CHECK(fig.dilation_of_layer(3) * (fig.filter_size - 1) == 16);
    const auto ef = receptive_field(fig);
    CHECK(ef.backward == 30);
    CHECK(ef.forward == 0);
}

TEST_CASE("impulse response matches the computed receptive field exactly") {
    Rng rng(6);
    const std::vector<DcnnConfig> configs = [] {
        std::vector<DcnnConfig> out;
        DcnnConfig a = small_config();
        out.push_back(a);
        DcnnConfig b;
        b.layers = 4;
        b.dilation = 2;
        b.filter_size = 2;
        b.hidden_width = 5;
        b.schedule = DilationSchedule::kExponential;
        out.push_back(b);
        DcnnConfig c;
        c.layers = 3;
        c.dilation = 1;
        c.filter_size = 5;
        c.hidden_width = 7;
        out.push_back(c);
        return out;
    }();

    for (const auto& config : configs) {
        auto model = DcnnModel::init(config, 2, rng);
        // Positive biases keep every ReLU in its linear region, making the
        // influence exact at the field boundary.
        for (auto& bias : model.biases) bias.setConstant(5.0);

        const int T = 110;
        const auto field = receptive_field(config);
        const Eigen::MatrixXd z = random_matrix(2, T, rng, 0.05);
        const Eigen::MatrixXd base = forward(model, z);

        const int q = T / 2;
        Eigen::MatrixXd bumped = z;
        bumped(0, q) += 0.01;
        const Eigen::MatrixXd out = forward(model, bumped);

        for (int t = 0; t < T; ++t) {
            const bool inside = t >= q - field.forward && t <= q + field.backward;
            const bool changed = (out.col(t) - base.col(t)).cwiseAbs().maxCoeff() != 0.0;
            if (!inside) CHECK_FALSE(changed);
            if (t == q - field.forward || t == q + field.backward) CHECK(changed);
        }
    }
}

TEST_CASE("mse_loss: exact values, brute force, empty mask") {
    Rng rng(7);
    const Eigen::MatrixXd a = random_matrix(3, 20, rng);
    CHECK(mse_loss(a, a, {1, 20}) == 0.0);
    Eigen::MatrixXd plus_one = a.array() + 1.0;
    CHECK(mse_loss(plus_one, a, {1, 20}) == doctest::Approx(1.0).epsilon(1e-14));

    const Eigen::MatrixXd b = random_matrix(3, 20, rng);
    double total = 0.0;
    for (int h = 0; h < 3; ++h)
        for (int t = 4; t <= 11; ++t) total += std::pow(a(h, t - 1) - b(h, t - 1), 2);
    CHECK(mse_loss(a, b, {4, 11}) == doctest::Approx(total / (3 * 8)).epsilon(1e-13));

    CHECK_THROWS_AS(mse_loss(a, b, {5, 4}), data_error);
    CHECK_THROWS_AS(mse_loss(a, b, {1, 21}), data_error);
}

TEST_CASE("gradients match central finite differences for every parameter") {
    Rng rng(8);
    DcnnConfig config = small_config();  // L=3, d=2, K=3, W=6
    auto model = DcnnModel::init(config, 3, rng);
    const int T = 30;
    const Eigen::MatrixXd z = random_matrix(3, T, rng);
    const Eigen::MatrixXd target = random_matrix(3, T, rng);
    const DayRange mask{3, 27};

    const Eigen::VectorXd analytic = gradients(model, z, target, mask).flatten();
    const Eigen::VectorXd w0 = model.flatten();
    REQUIRE(analytic.size() == w0.size());

    const double step = 1e-5;
    DcnnModel probe = model;
    for (Eigen::Index i = 0; i < w0.size(); ++i) {
        Eigen::VectorXd w = w0;
        w[i] += step;
        probe.unflatten(w);
        const double up = mse_loss(forward(probe, z), target, mask);
        w[i] -= 2 * step;
        probe.unflatten(w);
        const double dn = mse_loss(forward(probe, z), target, mask);
        const double fd = (up - dn) / (2 * step);
        CHECK(std::abs(analytic[i] - fd) <=
              1e-4 * std::max({std::abs(analytic[i]), std::abs(fd), 1e-3}));
    }
}

TEST_CASE("gradients vanish at zero loss and scale with the residual") {
    Rng rng(9);
    auto model = DcnnModel::init(small_config(), 3, rng);
    const Eigen::MatrixXd z = random_matrix(3, 25, rng);
    const DayRange mask{1, 25};
    const Eigen::MatrixXd pred = forward(model, z);

    const auto at_optimum = gradients(model, z, pred, mask);
    CHECK(at_optimum.flatten().cwiseAbs().maxCoeff() == 0.0);

    const Eigen::MatrixXd residual = random_matrix(3, 25, rng);
    const auto g1 = gradients(model, z, pred - residual, mask);
    const auto g2 = gradients(model, z, pred - 2.0 * residual, mask);
    CHECK((g2.output_proj - 2.0 * g1.output_proj).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("forward is translation-consistent away from the boundaries") {
    Rng rng(10);
    const DcnnConfig config = small_config();
    const auto model = DcnnModel::init(config, 2, rng);
    const auto field = receptive_field(config);

    const int T = 105, shift = 7;
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(2, T);
    for (int t = 20; t <= 30; ++t) {
        z(0, t) = rng.normal();
        z(1, t) = rng.normal();
    }
    Eigen::MatrixXd z_shifted = Eigen::MatrixXd::Zero(2, T);
    z_shifted.middleCols(20 + shift, 11) = z.middleCols(20, 11);

    const Eigen::MatrixXd out = forward(model, z);
    const Eigen::MatrixXd out_shifted = forward(model, z_shifted);

    // Compare where neither output sees zero padding.
    const int lo = field.backward + 1;
    const int hi = T - 1 - field.forward - shift - 1;
    for (int t = lo; t <= hi; ++t) {
        CHECK(out(0, t) == out_shifted(0, t + shift));
        CHECK(out(1, t) == out_shifted(1, t + shift));
    }
}

TEST_CASE("train: zero learning rate leaves the weights alone") {
    Rng rng(11);
    DcnnConfig config = small_config();
    config.learning_rate = 0.0;
    config.max_iterations = 10;
    auto model = DcnnModel::init(config, 2, rng);
    const Eigen::VectorXd before = model.flatten();

    TrainingSet train_set(1);
    train_set[0].streams = {random_matrix(2, 30, rng)};
    train_set[0].target = random_matrix(2, 30, rng);
    const auto result = train(model, train_set, {}, {1, 30});
    CHECK(result.model.flatten() == before);
}

TEST_CASE("train: memorizes a single stream with an overparameterized net") {
    Rng rng(12);
    DcnnConfig config;
    config.layers = 3;
    config.dilation = 1;
    config.filter_size = 5;
    config.hidden_width = 12;
    config.learning_rate = 5e-3;
    config.max_iterations = 5000;
    config.batch_size = 1;
    config.adaptive_updates = true;
    config.seed = 13;

    const int T = 40;
    Eigen::MatrixXd z(2, T), y(2, T);
    for (int t = 0; t < T; ++t) {
        z(0, t) = std::sin(0.3 * t);
        z(1, t) = std::cos(0.2 * t);
        y(0, t) = std::sin(0.3 * t + 0.4) + 0.2;
        y(1, t) = 0.5 * std::cos(0.2 * t - 0.1);
    }
    TrainingSet train_set(1);
    train_set[0].streams = {z};
    train_set[0].target = y;

    Rng init_rng(14);
    auto model = DcnnModel::init(config, 2, init_rng);
    const auto result = train(model, train_set, {}, {1, T});
    CHECK(mse_loss(forward(result.model, z), y, {1, T}) < 0.05);
}

TEST_CASE("train: fixed seed reproduces weights bit-for-bit") {
    Rng data_rng(15);
    TrainingSet train_set(2), val_set(1);
    for (auto& group : train_set) {
        group.streams = {random_matrix(2, 30, data_rng), random_matrix(2, 30, data_rng)};
        group.target = random_matrix(2, 30, data_rng);
    }
    val_set[0].streams = {random_matrix(2, 30, data_rng)};
    val_set[0].target = random_matrix(2, 30, data_rng);

    DcnnConfig config = small_config();
    config.max_iterations = 80;
    config.eval_interval = 10;
    config.seed = 99;

    Rng init_a(16), init_b(16);
    const auto a = train(DcnnModel::init(config, 2, init_a), train_set, val_set, {1, 30});
    const auto b = train(DcnnModel::init(config, 2, init_b), train_set, val_set, {1, 30});
    CHECK(a.model.flatten() == b.model.flatten());
    CHECK(a.best_val_mse == b.best_val_mse);

    // Accepted checkpoints form a strictly improving validation sequence.
    double last = std::numeric_limits<double>::infinity();
    for (const auto& row : a.history) {
        if (!std::isnan(row.val_mse) && row.val_mse < last) last = row.val_mse;
    }
    CHECK(a.best_val_mse <= last + 1e-15);
}

TEST_CASE("train: exploding loss reports a numerical failure") {
    Rng rng(17);
    DcnnConfig config = small_config();
    config.learning_rate = 1e6;
    config.max_iterations = 200;
    TrainingSet train_set(1);
    train_set[0].streams = {random_matrix(2, 30, rng)};
    train_set[0].target = random_matrix(2, 30, rng);
    auto model = DcnnModel::init(config, 2, rng);
    CHECK_THROWS_AS(train(model, train_set, {}, {1, 30}), numerical_error);
}

TEST_CASE("training pairs: every stream of an individual maps to its one target") {
    Rng rng(18);
    const int S = 7, I = 3;
    TrainingSet set(I);
    for (auto& group : set) {
        for (int s = 0; s < S; ++s) group.streams.push_back(random_matrix(2, 20, rng));
        group.target = random_matrix(2, 20, rng);
    }
    std::size_t pairs = 0;
    for (const auto& group : set) pairs += group.streams.size();
    CHECK(pairs == static_cast<std::size_t>(S * I));

    DcnnConfig config = small_config();
    config.max_iterations = 5;
    auto model = DcnnModel::init(config, 2, rng);
    CHECK_NOTHROW(train(model, set, {}, {1, 20}));
}

TEST_CASE("config validation enforces the documented ranges") {
    DcnnConfig config = small_config();
    CHECK_NOTHROW(config.validate());
    DcnnConfig bad = config;
    bad.layers = 7;
    CHECK_THROWS_AS(bad.validate(), data_error);
    bad = config;
    bad.filter_size = 1;
    CHECK_THROWS_AS(bad.validate(), data_error);
    bad = config;
    bad.hidden_width = 13;
    CHECK_THROWS_AS(bad.validate(), data_error);
    bad = config;
    bad.dilation = 0;
    CHECK_THROWS_AS(bad.validate(), data_error);
    bad = config;
    bad.learning_rate = -0.1;
    CHECK_THROWS_AS(bad.validate(), data_error);
}

TEST_CASE("checkpoint round trip preserves weights and config") {
    Rng rng(19);
    DcnnConfig config = small_config();
    config.schedule = DilationSchedule::kExponential;
    const auto model = DcnnModel::init(config, 5, rng);
    const std::string path = "/tmp/cyclefit_dcnn_test.json";
    write_checkpoint(path, model);
    const auto loaded = read_checkpoint(path);
    CHECK(loaded.flatten() == model.flatten());
    CHECK(loaded.config.layers == config.layers);
    CHECK(loaded.config.schedule == DilationSchedule::kExponential);

    const Eigen::MatrixXd z = random_matrix(5, 30, rng);
    CHECK(forward(loaded, z) == forward(model, z));
}
