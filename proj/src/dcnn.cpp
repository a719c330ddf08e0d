#include "cyclefit/dcnn.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "cyclefit/io_util.hpp"

namespace cyclefit::dcnn {

using json = nlohmann::json;

void DcnnConfig::validate() const {
    if (layers < 3 || layers > 6) throw data_error("DcnnConfig: layers must be in [3, 6]");
    if (dilation < 1 || dilation > 3) throw data_error("DcnnConfig: dilation must be in [1, 3]");
    if (filter_size < 2 || filter_size > 9)
        throw data_error("DcnnConfig: filter_size must be in [2, 9]");
    if (hidden_width < 5 || hidden_width > 12)
        throw data_error("DcnnConfig: hidden_width must be in [5, 12]");
    if (learning_rate < 0.0) throw data_error("DcnnConfig: learning_rate must be nonnegative");
    if (batch_size < 1) throw data_error("DcnnConfig: batch_size must be >= 1");
}

int DcnnConfig::dilation_of_layer(int layer) const {
    if (schedule == DilationSchedule::kConstant) return dilation;
    int d = 1;
    for (int l = 0; l <= layer; ++l) d *= dilation;  // layer l (1-based) uses d^l
    return d;
}

ReceptiveField receptive_field(const DcnnConfig& config) {
    const int back_taps = config.filter_size / 2;
    const int fwd_taps = config.filter_size - 1 - back_taps;
    ReceptiveField field;
    for (int l = 0; l < config.layers; ++l) {
        const int d = config.dilation_of_layer(l);
        field.backward += d * back_taps;
        field.forward += d * fwd_taps;
    }
    return field;
}

Eigen::MatrixXd dilated_conv_noncausal(const Eigen::MatrixXd& x,
                                       const std::vector<Eigen::MatrixXd>& filter, int dilation) {
    if (filter.empty()) throw data_error("dilated_conv_noncausal: empty filter");
    if (dilation < 1) throw data_error("dilated_conv_noncausal: dilation must be >= 1");
    const int K = static_cast<int>(filter.size());
    const int T = static_cast<int>(x.cols());
    const int center = K / 2;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(filter[0].rows(), T);
    for (int k = 0; k < K; ++k) {
        const int offset = dilation * (k - center);
        // out[:, t] += filter[k] * x[:, t + offset], zero outside [0, T).
        const int t_begin = std::max(0, -offset);
        const int t_end = std::min(T, T - offset);
        if (t_begin >= t_end) continue;
        out.middleCols(t_begin, t_end - t_begin).noalias() +=
            filter[k] * x.middleCols(t_begin + offset, t_end - t_begin);
    }
    return out;
}

std::size_t DcnnModel::num_params() const {
    std::size_t n = input_proj.size() + output_proj.size();
    for (const auto& layer : filters)
        for (const auto& tap : layer) n += tap.size();
    for (const auto& b : biases) n += b.size();
    return n;
}

Eigen::VectorXd DcnnModel::flatten() const {
    Eigen::VectorXd flat(num_params());
    Eigen::Index at = 0;
    const auto put = [&](const Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) flat[at++] = m(r, c);
    };
    put(input_proj);
    for (int l = 0; l < config.layers; ++l) {
        for (const auto& tap : filters[l]) put(tap);
        for (Eigen::Index i = 0; i < biases[l].size(); ++i) flat[at++] = biases[l][i];
    }
    put(output_proj);
    return flat;
}

void DcnnModel::unflatten(const Eigen::VectorXd& flat) {
    if (flat.size() != static_cast<Eigen::Index>(num_params()))
        throw data_error("DcnnModel::unflatten: size mismatch");
    Eigen::Index at = 0;
    const auto take = [&](Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = flat[at++];
    };
    take(input_proj);
    for (int l = 0; l < config.layers; ++l) {
        for (auto& tap : filters[l]) take(tap);
        for (Eigen::Index i = 0; i < biases[l].size(); ++i) biases[l][i] = flat[at++];
    }
    take(output_proj);
}

DcnnModel DcnnModel::zeros(const DcnnConfig& config, int num_channels) {
    config.validate();
    DcnnModel model;
    model.config = config;
    const int W = config.hidden_width;
    model.input_proj = Eigen::MatrixXd::Zero(W, num_channels);
    model.filters.resize(config.layers);
    model.biases.resize(config.layers);
    for (int l = 0; l < config.layers; ++l) {
        model.filters[l].assign(config.filter_size, Eigen::MatrixXd::Zero(W, W));
        model.biases[l] = Eigen::VectorXd::Zero(W);
    }
    model.output_proj = Eigen::MatrixXd::Zero(num_channels, W);
    return model;
}

DcnnModel DcnnModel::init(const DcnnConfig& config, int num_channels, Rng& rng) {
    DcnnModel model = zeros(config, num_channels);
    const auto fill = [&](Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = 0.1 * rng.normal();
    };
    fill(model.input_proj);
    for (int l = 0; l < config.layers; ++l)
        for (auto& tap : model.filters[l]) fill(tap);
    fill(model.output_proj);
    return model;
}

namespace {

struct ForwardTrace {
    // h[0] is the projected input; pre[l] = h[l] + conv_l(h[l]); h[l+1] = ReLU(pre[l]).
    std::vector<Eigen::MatrixXd> h;
    std::vector<Eigen::MatrixXd> pre;
};

Eigen::MatrixXd forward_impl(const DcnnModel& model, const Eigen::MatrixXd& z,
                             ForwardTrace* trace) {
    Eigen::MatrixXd h = model.input_proj * z;
    if (trace) trace->h.push_back(h);
    for (int l = 0; l < model.config.layers; ++l) {
        Eigen::MatrixXd pre =
            h + dilated_conv_noncausal(h, model.filters[l], model.config.dilation_of_layer(l));
        pre.colwise() += model.biases[l];
        h = pre.cwiseMax(0.0);
        if (trace) {
            trace->pre.push_back(std::move(pre));
            trace->h.push_back(h);
        }
    }
    return model.output_proj * h;
}

/// Adjoint of dilated_conv_noncausal with respect to its input: correlate the
/// upstream gradient with the transposed taps at negated offsets.
Eigen::MatrixXd conv_input_grad(const Eigen::MatrixXd& grad_out,
                                const std::vector<Eigen::MatrixXd>& filter, int dilation) {
    const int K = static_cast<int>(filter.size());
    const int T = static_cast<int>(grad_out.cols());
    const int center = K / 2;
    Eigen::MatrixXd grad_in = Eigen::MatrixXd::Zero(filter[0].cols(), T);
    for (int k = 0; k < K; ++k) {
        const int offset = dilation * (k - center);
        // dL/dx[:, t] += filter[k]^T * dL/dout[:, t - offset]
        const int t_begin = std::max(0, offset);
        const int t_end = std::min(T, T + offset);
        if (t_begin >= t_end) continue;
        grad_in.middleCols(t_begin, t_end - t_begin).noalias() +=
            filter[k].transpose() * grad_out.middleCols(t_begin - offset, t_end - t_begin);
    }
    return grad_in;
}

void conv_weight_grad(const Eigen::MatrixXd& grad_out, const Eigen::MatrixXd& input, int dilation,
                      std::vector<Eigen::MatrixXd>& filter_grad, Eigen::VectorXd& bias_grad) {
    const int K = static_cast<int>(filter_grad.size());
    const int T = static_cast<int>(grad_out.cols());
    const int center = K / 2;
    for (int k = 0; k < K; ++k) {
        const int offset = dilation * (k - center);
        const int t_begin = std::max(0, -offset);
        const int t_end = std::min(T, T - offset);
        if (t_begin >= t_end) continue;
        filter_grad[k].noalias() += grad_out.middleCols(t_begin, t_end - t_begin) *
                                    input.middleCols(t_begin + offset, t_end - t_begin).transpose();
    }
    bias_grad += grad_out.rowwise().sum();
}

}  // namespace

Eigen::MatrixXd forward(const DcnnModel& model, const Eigen::MatrixXd& z) {
    return forward_impl(model, z, nullptr);
}

double mse_loss(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& target, const DayRange& mask) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols())
        throw data_error("mse_loss: shape mismatch");
    if (mask.first < 1 || mask.last > pred.cols() || mask.first > mask.last)
        throw data_error("mse_loss: empty or out-of-range mask");
    const auto diff =
        pred.middleCols(mask.first - 1, mask.size()) - target.middleCols(mask.first - 1, mask.size());
    return diff.squaredNorm() / static_cast<double>(diff.size());
}

DcnnGradients DcnnGradients::zeros_like(const DcnnModel& model) {
    DcnnGradients g;
    g.input_proj = Eigen::MatrixXd::Zero(model.input_proj.rows(), model.input_proj.cols());
    g.filters.resize(model.config.layers);
    g.biases.resize(model.config.layers);
    for (int l = 0; l < model.config.layers; ++l) {
        g.filters[l].assign(model.filters[l].size(),
                            Eigen::MatrixXd::Zero(model.filters[l][0].rows(),
                                                  model.filters[l][0].cols()));
        g.biases[l] = Eigen::VectorXd::Zero(model.biases[l].size());
    }
    g.output_proj = Eigen::MatrixXd::Zero(model.output_proj.rows(), model.output_proj.cols());
    return g;
}

Eigen::VectorXd DcnnGradients::flatten() const {
    std::size_t n = input_proj.size() + output_proj.size();
    for (const auto& layer : filters)
        for (const auto& tap : layer) n += tap.size();
    for (const auto& b : biases) n += b.size();
    Eigen::VectorXd flat(n);
    Eigen::Index at = 0;
    const auto put = [&](const Eigen::MatrixXd& m) {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) flat[at++] = m(r, c);
    };
    put(input_proj);
    for (std::size_t l = 0; l < filters.size(); ++l) {
        for (const auto& tap : filters[l]) put(tap);
        for (Eigen::Index i = 0; i < biases[l].size(); ++i) flat[at++] = biases[l][i];
    }
    put(output_proj);
    return flat;
}

void DcnnGradients::add_scaled(const DcnnGradients& other, double scale) {
    input_proj += scale * other.input_proj;
    for (std::size_t l = 0; l < filters.size(); ++l) {
        for (std::size_t k = 0; k < filters[l].size(); ++k)
            filters[l][k] += scale * other.filters[l][k];
        biases[l] += scale * other.biases[l];
    }
    output_proj += scale * other.output_proj;
}

DcnnGradients gradients(const DcnnModel& model, const Eigen::MatrixXd& z,
                        const Eigen::MatrixXd& target, const DayRange& mask) {
    ForwardTrace trace;
    const Eigen::MatrixXd pred = forward_impl(model, z, &trace);
    if (mask.first < 1 || mask.last > pred.cols() || mask.first > mask.last)
        throw data_error("gradients: empty or out-of-range mask");

    DcnnGradients grads = DcnnGradients::zeros_like(model);
    const int T = static_cast<int>(pred.cols());
    const double count = static_cast<double>(pred.rows()) * mask.size();

    // dL/dpred for the masked mean of squared differences.
    Eigen::MatrixXd grad_pred = Eigen::MatrixXd::Zero(pred.rows(), T);
    grad_pred.middleCols(mask.first - 1, mask.size()) =
        2.0 / count *
        (pred.middleCols(mask.first - 1, mask.size()) -
         target.middleCols(mask.first - 1, mask.size()));

    grads.output_proj.noalias() = grad_pred * trace.h.back().transpose();
    Eigen::MatrixXd grad_h = model.output_proj.transpose() * grad_pred;

    for (int l = model.config.layers - 1; l >= 0; --l) {
        const int dilation = model.config.dilation_of_layer(l);
        // Through ReLU(pre).
        const Eigen::MatrixXd grad_pre =
            (trace.pre[l].array() > 0.0).select(grad_h, Eigen::MatrixXd::Zero(grad_h.rows(), T));
        // pre = h + conv(h) + bias.
        conv_weight_grad(grad_pre, trace.h[l], dilation, grads.filters[l], grads.biases[l]);
        grad_h = grad_pre + conv_input_grad(grad_pre, model.filters[l], dilation);
    }
    grads.input_proj.noalias() = grad_h * z.transpose();
    return grads;
}

TrainResult train(DcnnModel model, const TrainingSet& train_set, const TrainingSet& val_set,
                  const DayRange& mask) {
    model.config.validate();
    if (train_set.empty()) throw data_error("train: empty training set");
    const DcnnConfig& config = model.config;

    // Flattened (individual, stream) index for batching.
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        if (train_set[i].streams.empty()) throw data_error("train: individual with no streams");
        for (std::size_t s = 0; s < train_set[i].streams.size(); ++s)
            pairs.emplace_back(static_cast<int>(i), static_cast<int>(s));
    }

    const auto validation_loss = [&]() -> double {
        double total = 0.0;
        int used = 0;
        for (const auto& group : val_set) {
            const int limit = std::min<int>(config.val_streams,
                                            static_cast<int>(group.streams.size()));
            for (int s = 0; s < limit; ++s) {
                total += mse_loss(forward(model, group.streams[s]), group.target, mask);
                ++used;
            }
        }
        return used > 0 ? total / used : std::numeric_limits<double>::quiet_NaN();
    };

    Rng rng(config.seed);
    TrainResult result;
    const bool has_val = !val_set.empty();
    double best_val = std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_weights = model.flatten();
    int checks_without_improvement = 0;

    Eigen::VectorXd adam_m, adam_v;
    if (config.adaptive_updates) {
        adam_m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.num_params()));
        adam_v = adam_m;
    }
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

    int iter = 0;
    for (; iter < config.max_iterations; ++iter) {
        DcnnGradients batch_grad = DcnnGradients::zeros_like(model);
        double batch_loss = 0.0;
        for (int b = 0; b < config.batch_size; ++b) {
            const auto& [i, s] = pairs[rng.uniform_int(0, static_cast<int>(pairs.size()) - 1)];
            batch_loss += mse_loss(forward(model, train_set[i].streams[s]), train_set[i].target,
                                   mask);
            batch_grad.add_scaled(gradients(model, train_set[i].streams[s], train_set[i].target,
                                            mask),
                                  1.0 / config.batch_size);
        }
        batch_loss /= config.batch_size;
        if (!std::isfinite(batch_loss))
            throw numerical_error("dcnn::train: non-finite loss at iteration " +
                                  std::to_string(iter) + " (learning rate too high?)");

        if (config.adaptive_updates) {
            const Eigen::VectorXd g = batch_grad.flatten();
            adam_m = kBeta1 * adam_m + (1.0 - kBeta1) * g;
            adam_v = kBeta2 * adam_v + (1.0 - kBeta2) * g.cwiseAbs2();
            const double c1 = 1.0 - std::pow(kBeta1, iter + 1);
            const double c2 = 1.0 - std::pow(kBeta2, iter + 1);
            Eigen::VectorXd w = model.flatten();
            w -= config.learning_rate *
                 (adam_m / c1).cwiseQuotient(((adam_v / c2).cwiseSqrt().array() + kEps).matrix());
            model.unflatten(w);
        } else {
            // Plain update w <- w - eta * grad.
            Eigen::VectorXd w = model.flatten();
            w -= config.learning_rate * batch_grad.flatten();
            model.unflatten(w);
        }

        double val = std::numeric_limits<double>::quiet_NaN();
        if (has_val && (iter + 1) % config.eval_interval == 0) {
            val = validation_loss();
            if (val < best_val) {
                best_val = val;
                best_weights = model.flatten();
                checks_without_improvement = 0;
            } else {
                ++checks_without_improvement;
            }
            result.history.push_back({iter + 1, batch_loss, val});
            if (checks_without_improvement >= config.patience) {
                ++iter;
                break;
            }
        } else {
            result.history.push_back({iter + 1, batch_loss, val});
        }
    }

    result.iterations_run = iter;
    if (has_val) {
        // Final weights may beat the last checkpoint; keep whichever validates best.
        const double final_val = validation_loss();
        if (final_val < best_val) {
            best_val = final_val;
            best_weights = model.flatten();
        }
        model.unflatten(best_weights);
        result.best_val_mse = best_val;
    }
    result.model = std::move(model);
    return result;
}

void write_checkpoint(const std::string& path, const DcnnModel& model) {
    const Eigen::VectorXd flat = model.flatten();
    json weights = json::array();
    for (Eigen::Index i = 0; i < flat.size(); ++i) weights.push_back(flat[i]);
    json j = {{"config",
               {{"layers", model.config.layers},
                {"dilation", model.config.dilation},
                {"filter_size", model.config.filter_size},
                {"hidden_width", model.config.hidden_width},
                {"schedule",
                 model.config.schedule == DilationSchedule::kConstant ? "constant" : "exponential"},
                {"learning_rate", model.config.learning_rate},
                {"max_iterations", model.config.max_iterations},
                {"batch_size", model.config.batch_size},
                {"adaptive_updates", model.config.adaptive_updates},
                {"eval_interval", model.config.eval_interval},
                {"patience", model.config.patience},
                {"val_streams", model.config.val_streams},
                {"seed", model.config.seed}}},
              {"num_channels", model.num_channels()},
              {"weights", weights}};
    io_util::write_text_file(path, j.dump() + "\n");
}

DcnnModel read_checkpoint(const std::string& path) {
    const json j = json::parse(io_util::read_text_file(path));
    const auto& c = j.at("config");
    DcnnConfig config;
    config.layers = c.at("layers").get<int>();
    config.dilation = c.at("dilation").get<int>();
    config.filter_size = c.at("filter_size").get<int>();
    config.hidden_width = c.at("hidden_width").get<int>();
    config.schedule = c.at("schedule").get<std::string>() == "exponential"
                          ? DilationSchedule::kExponential
                          : DilationSchedule::kConstant;
    config.learning_rate = c.at("learning_rate").get<double>();
    config.max_iterations = c.at("max_iterations").get<int>();
    config.batch_size = c.at("batch_size").get<int>();
    config.adaptive_updates = c.at("adaptive_updates").get<bool>();
    config.eval_interval = c.at("eval_interval").get<int>();
    config.patience = c.at("patience").get<int>();
    config.val_streams = c.at("val_streams").get<int>();
    config.seed = c.at("seed").get<std::uint64_t>();

    DcnnModel model = DcnnModel::zeros(config, j.at("num_channels").get<int>());
    const auto& weights = j.at("weights");
    Eigen::VectorXd flat(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i) flat[i] = weights[i].get<double>();
    model.unflatten(flat);
    return model;
}

void write_history_csv(const std::string& path, const std::vector<TrainResult::HistoryRow>& rows) {
    std::string out = "iteration,train_mse,val_mse\n";
    for (const auto& row : rows) {
        out += std::to_string(row.iteration) + ',' + io_util::format_double(row.train_mse) + ',';
        out += std::isnan(row.val_mse) ? std::string() : io_util::format_double(row.val_mse);
        out += '\n';
    }
    io_util::write_text_file(path, out);
}

}  // namespace cyclefit::dcnn
