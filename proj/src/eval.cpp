#include "cyclefit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <tuple>

#include "cyclefit/io_util.hpp"

namespace cyclefit::eval {

using json = nlohmann::json;
namespace fs = std::filesystem;

Eigen::MatrixXd Scaler::apply(const Eigen::MatrixXd& raw) const {
    Eigen::MatrixXd out = raw;
    for (Eigen::Index h = 0; h < out.rows(); ++h)
        out.row(h) = (raw.row(h).array() - mean[h]) / std[h];
    return out;
}

Eigen::MatrixXd Scaler::invert(const Eigen::MatrixXd& scaled) const {
    Eigen::MatrixXd out = scaled;
    for (Eigen::Index h = 0; h < out.rows(); ++h)
        out.row(h) = scaled.row(h).array() * std[h] + mean[h];
    return out;
}

Scaler fit_scaler(const std::vector<const datagen::IndividualSeries*>& train) {
    if (train.empty()) throw data_error("fit_scaler: empty training set");
    const int H = datagen::kNumHormones;
    Scaler scaler;
    scaler.mean = Eigen::VectorXd::Zero(H);
    scaler.std = Eigen::VectorXd::Zero(H);
    double count = 0.0;
    for (const auto* series : train) {
        scaler.mean += series->values.rowwise().sum();
        count += static_cast<double>(series->values.cols());
    }
    scaler.mean /= count;
    for (const auto* series : train) {
        for (int h = 0; h < H; ++h)
            scaler.std[h] += (series->values.row(h).array() - scaler.mean[h]).square().sum();
    }
    scaler.std = (scaler.std / count).cwiseSqrt();
    for (int h = 0; h < H; ++h)
        if (!(scaler.std[h] > 1e-9 * (1.0 + std::abs(scaler.mean[h]))))
            throw data_error(std::string("fit_scaler: zero variance for hormone ") +
                             datagen::kHormoneNames[h]);
    return scaler;
}

Split split_cohort(int cohort_size, std::uint64_t seed) {
    if (cohort_size < 3) throw data_error("split_cohort: cohort too small to split");
    int n_train = 40, n_val = 10, n_test = 10;
    if (cohort_size != 60) {
        std::cerr << "split_cohort: cohort size " << cohort_size
                  << " != 60; splitting proportionally\n";
        n_train = std::max(1, (2 * cohort_size) / 3);
        n_val = std::max(1, cohort_size / 6);
        n_test = cohort_size - n_train - n_val;
        if (n_test < 1) throw data_error("split_cohort: no individuals left for the test set");
    }
    std::vector<int> ids(cohort_size);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(seed);
    for (int i = cohort_size - 1; i > 0; --i)
        std::swap(ids[i], ids[rng.uniform_int(0, i)]);

    Split split;
    split.seed = seed;
    split.train.assign(ids.begin(), ids.begin() + n_train);
    split.validation.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
    split.test.assign(ids.begin() + n_train + n_val, ids.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.validation.begin(), split.validation.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

double mse(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& truth, const DayRange& days,
           const std::vector<int>& hormones) {
    if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
        throw data_error("mse: shape mismatch");
    if (hormones.empty() || days.first < 1 || days.last > pred.cols() || days.first > days.last)
        throw data_error("mse: empty selection");
    double total = 0.0;
    for (int h : hormones) {
        if (h < 0 || h >= pred.rows()) throw data_error("mse: hormone index out of range");
        for (int t = days.first; t <= days.last; ++t) {
            const double d = pred(h, t - 1) - truth(h, t - 1);
            total += d * d;
        }
    }
    return total / (static_cast<double>(hormones.size()) * days.size());
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::kIndependentGp: return "independent_gp";
        case Variant::kMgp: return "mgp";
        case Variant::kBlockMgp: return "b_mgp";
        case Variant::kBlockMgpDcnn: return "b_mgp_dcnn";
    }
    throw data_error("variant_name: unknown variant");
}

Variant variant_from_name(const std::string& name) {
    if (name == "independent_gp") return Variant::kIndependentGp;
    if (name == "mgp") return Variant::kMgp;
    if (name == "b_mgp") return Variant::kBlockMgp;
    if (name == "b_mgp_dcnn") return Variant::kBlockMgpDcnn;
    throw data_error("unknown variant: " + name);
}

std::string row_label(Variant v, Scheme s) {
    std::string base;
    switch (v) {
        case Variant::kIndependentGp: base = "IndependentGP"; break;
        case Variant::kMgp: base = "MGP"; break;
        case Variant::kBlockMgp: base = "B-MGP"; break;
        case Variant::kBlockMgpDcnn: base = "B-MGP-DCNN"; break;
    }
    if (s == Scheme::kEd) base += " (ED)";
    return base;
}

namespace {

const std::vector<int> kAllHormones = {0, 1, 2, 3, 4};

void ensure_no_test_ids(const std::vector<int>& ids, const Split& split, const char* stage) {
    for (int id : ids) {
        if (std::binary_search(split.test.begin(), split.test.end(), id))
            throw std::logic_error(std::string("provenance violation: test individual used in ") +
                                   stage);
    }
}

mgp::BlockStructure blocks_for(Variant v) {
    switch (v) {
        case Variant::kIndependentGp: return mgp::BlockStructure::independent(5);
        case Variant::kMgp: return mgp::BlockStructure::full(5);
        default: return mgp::BlockStructure::blockwise();
    }
}

int blocks_kind(Variant v) {
    switch (v) {
        case Variant::kIndependentGp: return 0;
        case Variant::kMgp: return 1;
        default: return 2;
    }
}

std::uint64_t chain_seed(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t s = 0x5bf03635472f9f2dULL;
    for (auto p : parts) s = mix_seed(s, p);
    return s;
}

/// Per-split pipeline state: schedules and MGP fits are computed once per
/// (scheme, budget[, block structure]) and shared across the variants that
/// need them.
class Runner {
  public:
    Runner(const std::vector<datagen::IndividualSeries>& cohort, const Split& split,
           const PipelineConfig& config)
        : cohort_(cohort), split_(split), config_(config) {
        ensure_no_test_ids(split.train, split, "scaler fitting");
        std::vector<const datagen::IndividualSeries*> train_series;
        for (int id : split.train) train_series.push_back(&cohort_[id]);
        scaler_ = fit_scaler(train_series);
        truth_std_.reserve(cohort_.size());
        for (const auto& series : cohort_) truth_std_.push_back(scaler_.apply(series.values));
    }

    const Scaler& scaler() const { return scaler_; }
    const Eigen::MatrixXd& truth_std(int id) const { return truth_std_[id]; }

    CellResult run_cell(Variant variant, Scheme scheme, int budget);

  private:
    DayRange window() const { return {1, datagen::kObservationDays}; }

    std::vector<int> peaks_of(int id) const {
        const auto peaks = datagen::lh_peak_days(cohort_[id], window());
        if (peaks.size() < 2)
            throw data_error("individual " + cohort_[id].id +
                             ": fewer than two LH peaks in the observation window");
        return {peaks[0], peaks[1]};
    }

    const sampling::NormalizedSchedule& ed_template(int budget);
    const std::vector<sampling::Schedule>& schedules(Scheme scheme, int budget);
    mgp::ObservationSet observations(Scheme scheme, int budget, int id);
    const mgp::FitResult& fit_of(int kind, Scheme scheme, int budget, int id);
    void ensure_fits(Variant variant, Scheme scheme, int budget, const std::vector<int>& ids);
    mgp::PosteriorSeries posterior_of(Variant variant, Scheme scheme, int budget, int id);
    std::vector<Eigen::MatrixXd> streams_of(const mgp::PosteriorSeries& post, Scheme scheme,
                                            int budget, int id);

    struct DcnnStage {
        dcnn::TrainResult trained;
        std::vector<Eigen::MatrixXd> test_predictions;  // aligned with split_.test
    };
    const DcnnStage& dcnn_stage(Scheme scheme, int budget);

    void write_cell_artifacts(Variant variant, Scheme scheme, int budget,
                              const std::vector<Eigen::MatrixXd>& predictions,
                              const DcnnStage* stage);

    const std::vector<datagen::IndividualSeries>& cohort_;
    const Split& split_;
    const PipelineConfig& config_;
    Scaler scaler_;
    std::vector<Eigen::MatrixXd> truth_std_;

    std::map<int, sampling::NormalizedSchedule> ed_templates_;
    std::map<std::pair<int, int>, std::vector<sampling::Schedule>> schedules_;
    std::map<std::tuple<int, int, int>, std::vector<std::optional<mgp::FitResult>>> fits_;
    std::map<std::pair<int, int>, DcnnStage> dcnn_stages_;
};

const sampling::NormalizedSchedule& Runner::ed_template(int budget) {
    auto it = ed_templates_.find(budget);
    if (it != ed_templates_.end()) return it->second;

    // The phase template is learned on training individuals only.
    ensure_no_test_ids(split_.train, split_, "ED template construction");
    sampling::EdPlannerInput input;
    for (int id : split_.train)
        input.members.push_back(
            {truth_std_[id], cohort_[id].characteristics.cycle_length, peaks_of(id)});
    input.blocks = mgp::BlockStructure::blockwise();
    input.optimizer = config_.mgp_optimizer;
    input.rank = config_.mgp_rank;
    input.seed = chain_seed({config_.schedule_seed, split_.seed, 0xEDull,
                             static_cast<std::uint64_t>(budget)});
    input.jobs = config_.jobs;
    return ed_templates_.emplace(budget, sampling::ed_greedy(input, budget, window()))
        .first->second;
}

const std::vector<sampling::Schedule>& Runner::schedules(Scheme scheme, int budget) {
    const auto key = std::make_pair(static_cast<int>(scheme), budget);
    auto it = schedules_.find(key);
    if (it != schedules_.end()) return it->second;

    std::vector<sampling::Schedule> result(cohort_.size());
    if (scheme == Scheme::kRandom) {
        for (std::size_t i = 0; i < cohort_.size(); ++i) {
            Rng rng(chain_seed({config_.schedule_seed, split_.seed,
                                static_cast<std::uint64_t>(budget), i}));
            result[i] = sampling::random_schedule(budget, window(), peaks_of(static_cast<int>(i)),
                                                  rng);
        }
    } else {
        const auto& norm = ed_template(budget);
        for (std::size_t i = 0; i < cohort_.size(); ++i)
            result[i] = sampling::materialize(norm, cohort_[i].characteristics.cycle_length,
                                              peaks_of(static_cast<int>(i)), window());
    }
    return schedules_.emplace(key, std::move(result)).first->second;
}

mgp::ObservationSet Runner::observations(Scheme scheme, int budget, int id) {
    const auto& schedule = schedules(scheme, budget)[id];
    Eigen::MatrixXd values(schedule.days.size(), datagen::kNumHormones);
    for (std::size_t i = 0; i < schedule.days.size(); ++i)
        values.row(i) = truth_std_[id].col(schedule.days[i] - 1).transpose();
    return mgp::ObservationSet(schedule.days, std::move(values), cohort_[id].id);
}

void Runner::ensure_fits(Variant variant, Scheme scheme, int budget,
                         const std::vector<int>& ids) {
    const int kind = blocks_kind(variant);
    const auto key = std::make_tuple(kind, static_cast<int>(scheme), budget);
    auto& slot = fits_[key];
    slot.resize(cohort_.size());
    std::vector<int> missing;
    for (int id : ids)
        if (!slot[id].has_value()) missing.push_back(id);
    if (missing.empty()) return;

    schedules(scheme, budget);  // materialize before the parallel section
    const mgp::BlockStructure blocks = blocks_for(variant);
    parallel_for(missing.size(), config_.jobs, [&](std::size_t i) {
        const int id = missing[i];
        const auto obs = observations(scheme, budget, id);
        Rng init_rng(chain_seed({config_.mgp_seed, split_.seed, static_cast<std::uint64_t>(kind),
                                 static_cast<std::uint64_t>(budget),
                                 static_cast<std::uint64_t>(scheme),
                                 static_cast<std::uint64_t>(id), 1}));
        const auto init = mgp::MgpHyperparams::initial(
            blocks, cohort_[id].characteristics.cycle_length, config_.mgp_rank, init_rng);
        mgp::OptimizerConfig opt = config_.mgp_optimizer;
        opt.seed = chain_seed({config_.mgp_seed, split_.seed, static_cast<std::uint64_t>(kind),
                               static_cast<std::uint64_t>(budget),
                               static_cast<std::uint64_t>(scheme),
                               static_cast<std::uint64_t>(id), 2});
        slot[id] = mgp::fit(obs, blocks, init, opt);
    });
}

const mgp::FitResult& Runner::fit_of(int kind, Scheme scheme, int budget, int id) {
    const auto key = std::make_tuple(kind, static_cast<int>(scheme), budget);
    const auto& slot = fits_.at(key);
    if (!slot[id].has_value()) throw std::logic_error("fit_of: fit not computed");
    return *slot[id];
}

mgp::PosteriorSeries Runner::posterior_of(Variant variant, Scheme scheme, int budget, int id) {
    const auto& fit = fit_of(blocks_kind(variant), scheme, budget, id);
    return mgp::posterior(fit.hyper, blocks_for(variant), observations(scheme, budget, id),
                          datagen::kSeriesDays);
}

std::vector<Eigen::MatrixXd> Runner::streams_of(const mgp::PosteriorSeries& post, Scheme scheme,
                                                int budget, int id) {
    Rng rng(chain_seed({config_.stream_seed, split_.seed, static_cast<std::uint64_t>(budget),
                        static_cast<std::uint64_t>(scheme), static_cast<std::uint64_t>(id)}));
    return mgp::draw_streams(post, config_.streams, rng);
}

const Runner::DcnnStage& Runner::dcnn_stage(Scheme scheme, int budget) {
    const auto key = std::make_pair(static_cast<int>(scheme), budget);
    auto it = dcnn_stages_.find(key);
    if (it != dcnn_stages_.end()) return it->second;

    ensure_no_test_ids(split_.train, split_, "DCNN training");
    ensure_no_test_ids(split_.validation, split_, "DCNN validation");

    std::vector<int> fit_ids;
    fit_ids.insert(fit_ids.end(), split_.train.begin(), split_.train.end());
    fit_ids.insert(fit_ids.end(), split_.validation.begin(), split_.validation.end());
    fit_ids.insert(fit_ids.end(), split_.test.begin(), split_.test.end());
    ensure_fits(Variant::kBlockMgpDcnn, scheme, budget, fit_ids);

    // Posterior sample streams; posteriors are recomputed per individual and
    // released once their streams are drawn.
    const auto build_set = [&](const std::vector<int>& ids) {
        dcnn::TrainingSet set(ids.size());
        parallel_for(ids.size(), config_.jobs, [&](std::size_t i) {
            const int id = ids[i];
            const auto post = posterior_of(Variant::kBlockMgpDcnn, scheme, budget, id);
            set[i].streams = streams_of(post, scheme, budget, id);
            set[i].target = truth_std_[id];
        });
        return set;
    };
    const dcnn::TrainingSet train_set = build_set(split_.train);
    const dcnn::TrainingSet val_set = build_set(split_.validation);

    dcnn::DcnnConfig cfg = config_.dcnn;
    cfg.seed = chain_seed({config_.dcnn.seed, split_.seed, static_cast<std::uint64_t>(budget),
                           static_cast<std::uint64_t>(scheme), 1});
    Rng init_rng(chain_seed({config_.dcnn.seed, split_.seed, static_cast<std::uint64_t>(budget),
                             static_cast<std::uint64_t>(scheme), 2}));
    dcnn::DcnnModel model = dcnn::DcnnModel::init(cfg, datagen::kNumHormones, init_rng);

    DcnnStage stage;
    stage.trained = dcnn::train(std::move(model), train_set, val_set, overall_range());

    stage.test_predictions.resize(split_.test.size());
    parallel_for(split_.test.size(), config_.jobs, [&](std::size_t i) {
        const int id = split_.test[i];
        const auto post = posterior_of(Variant::kBlockMgpDcnn, scheme, budget, id);
        const auto streams = streams_of(post, scheme, budget, id);
        Eigen::MatrixXd pred =
            Eigen::MatrixXd::Zero(datagen::kNumHormones, datagen::kSeriesDays);
        for (const auto& stream : streams) pred += dcnn::forward(stage.trained.model, stream);
        stage.test_predictions[i] = pred / static_cast<double>(streams.size());
    });

    return dcnn_stages_.emplace(key, std::move(stage)).first->second;
}

CellResult Runner::run_cell(Variant variant, Scheme scheme, int budget) {
    std::vector<Eigen::MatrixXd> predictions(split_.test.size());
    const DcnnStage* stage = nullptr;

    if (variant == Variant::kBlockMgpDcnn) {
        stage = &dcnn_stage(scheme, budget);
        predictions = stage->test_predictions;
    } else {
        ensure_fits(variant, scheme, budget, split_.test);
        parallel_for(split_.test.size(), config_.jobs, [&](std::size_t i) {
            predictions[i] =
                posterior_of(variant, scheme, budget, split_.test[i]).mean();
        });
    }

    CellResult cell;
    for (std::size_t i = 0; i < split_.test.size(); ++i) {
        const auto& truth = truth_std_[split_.test[i]];
        cell.overall += mse(predictions[i], truth, overall_range(), kAllHormones);
        cell.reconstruction += mse(predictions[i], truth, reconstruction_range(), kAllHormones);
        cell.prediction += mse(predictions[i], truth, prediction_range(), kAllHormones);
        for (int h = 0; h < datagen::kNumHormones; ++h)
            cell.per_hormone_overall[h] += mse(predictions[i], truth, overall_range(), {h});
    }
    const double n = static_cast<double>(split_.test.size());
    cell.overall /= n;
    cell.reconstruction /= n;
    cell.prediction /= n;
    for (auto& v : cell.per_hormone_overall) v /= n;

    if (!config_.out_dir.empty()) write_cell_artifacts(variant, scheme, budget, predictions, stage);
    return cell;
}

void Runner::write_cell_artifacts(Variant variant, Scheme scheme, int budget,
                                  const std::vector<Eigen::MatrixXd>& predictions,
                                  const DcnnStage* stage) {
    const std::string label = variant_name(variant) +
                              (scheme == Scheme::kEd ? "_ed" : "_random") + "_b" +
                              std::to_string(budget);
    const fs::path dir = fs::path(config_.out_dir) / "cells" /
                         (label + "_seed" + std::to_string(split_.seed));
    fs::create_directories(dir / "models");
    const std::vector<std::string> names(datagen::kHormoneNames.begin(),
                                         datagen::kHormoneNames.end());

    {
        const auto& scheds = schedules(scheme, budget);
        std::vector<std::string> ids;
        std::vector<sampling::Schedule> days;
        for (std::size_t i = 0; i < cohort_.size(); ++i) {
            ids.push_back(cohort_[i].id);
            days.push_back(scheds[i]);
        }
        sampling::NormalizedSchedule norm;
        if (scheme == Scheme::kEd) norm = ed_template(budget);
        norm.budget = budget;
        sampling::write_schedule_json((dir / "schedule.json").string(), norm, ids, days,
                                      config_.schedule_seed);
    }

    for (int id : split_.test) {
        const auto& fit = fit_of(blocks_kind(variant), scheme, budget, id);
        mgp::write_model((dir / "models" / (cohort_[id].id + ".json")).string(),
                         blocks_for(variant), fit);
    }

    if (stage != nullptr) {
        dcnn::write_checkpoint((dir / "dcnn.json").string(), stage->trained.model);
        dcnn::write_history_csv((dir / "dcnn_history.csv").string(), stage->trained.history);
    }

    if (config_.emit_curves) {
        fs::create_directories(dir / "curves");
        for (std::size_t i = 0; i < split_.test.size(); ++i) {
            const int id = split_.test[i];
            const auto post = posterior_of(variant, scheme, budget, id);
            std::string out = "individual,day,hormone,truth,mgp_mean,mgp_var,dcnn_pred\n";
            for (int h = 0; h < datagen::kNumHormones; ++h) {
                for (int t = 1; t <= datagen::kSeriesDays; ++t) {
                    out += cohort_[id].id + ',' + std::to_string(t) + ',' + names[h] + ',' +
                           io_util::format_double(truth_std_[id](h, t - 1)) + ',' +
                           io_util::format_double(post.mean()(h, t - 1)) + ',' +
                           io_util::format_double(post.variance(h, t)) + ',';
                    out += stage != nullptr
                               ? io_util::format_double(predictions[i](h, t - 1))
                               : std::string("NA");
                    out += '\n';
                }
            }
            io_util::write_text_file((dir / "curves" / (cohort_[id].id + ".csv")).string(), out);
        }
    }
}

}  // namespace

CellResult run_pipeline(const std::vector<datagen::IndividualSeries>& cohort, const Split& split,
                        Variant variant, Scheme scheme, int budget, const PipelineConfig& config) {
    Runner runner(cohort, split, config);
    return runner.run_cell(variant, scheme, budget);
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
    if (config.split_seeds.empty()) throw data_error("run_experiment: no split seeds");
    const auto cohort = datagen::generate_cohort(
        config.cohort_size, datagen::default_population_gaussian(), config.waveform,
        config.cohort_seed);

    ExperimentResult result;
    for (const std::uint64_t split_seed : config.split_seeds) {
        const Split split = split_cohort(static_cast<int>(cohort.size()), split_seed);
        Runner runner(cohort, split, config.pipeline);
        ResultGrid grid;
        for (const int budget : config.budgets) {
            for (const Scheme scheme : config.schemes) {
                for (const Variant variant : config.variants) {
                    // The table layout defines ED rows for the blockwise models only.
                    if (scheme == Scheme::kEd && variant != Variant::kBlockMgp &&
                        variant != Variant::kBlockMgpDcnn)
                        continue;
                    grid.cells[row_label(variant, scheme)][budget] =
                        runner.run_cell(variant, scheme, budget);
                }
            }
        }
        result.per_seed[split_seed] = std::move(grid);
    }

    // Seed-averaged grid over cells present for every seed.
    const double num_seeds = static_cast<double>(config.split_seeds.size());
    const auto& first = result.per_seed.at(config.split_seeds.front());
    for (const auto& [row, by_budget] : first.cells) {
        for (const auto& [budget, cell0] : by_budget) {
            CellResult avg;
            bool complete = true;
            for (const std::uint64_t seed : config.split_seeds) {
                const auto& grid = result.per_seed.at(seed);
                const auto row_it = grid.cells.find(row);
                if (row_it == grid.cells.end() || !row_it->second.count(budget)) {
                    complete = false;
                    break;
                }
                const CellResult& c = row_it->second.at(budget);
                avg.overall += c.overall / num_seeds;
                avg.reconstruction += c.reconstruction / num_seeds;
                avg.prediction += c.prediction / num_seeds;
                for (int h = 0; h < datagen::kNumHormones; ++h)
                    avg.per_hormone_overall[h] += c.per_hormone_overall[h] / num_seeds;
            }
            if (complete) result.averaged.cells[row][budget] = avg;
        }
    }
    return result;
}

namespace {

const std::vector<std::string> kTableRows = {"LSTM",       "IndependentGP", "MGP",
                                             "B-MGP",      "B-MGP (ED)",    "B-MGP-DCNN",
                                             "B-MGP-DCNN (ED)"};
const std::vector<int> kTableBudgets = {10, 15, 25, 35, 70};

void write_table(const fs::path& path, const ResultGrid& grid, const std::vector<int>& budgets,
                 const std::function<double(const CellResult&)>& pick) {
    std::string out = "model";
    for (int b : budgets) out += ",budget_" + std::to_string(b);
    out += '\n';
    for (const auto& row : kTableRows) {
        out += row;
        const auto row_it = grid.cells.find(row);
        for (int b : budgets) {
            out += ',';
            if (row_it != grid.cells.end() && row_it->second.count(b))
                out += io_util::format_double(pick(row_it->second.at(b)));
            else
                out += row == "LSTM" ? "not_implemented" : "NA";
        }
        out += '\n';
    }
    io_util::write_text_file(path.string(), out);
}

}  // namespace

void emit_tables(const ExperimentResult& result, const std::string& out_dir) {
    if (result.averaged.cells.empty()) throw data_error("emit_tables: no results to report");
    fs::create_directories(fs::path(out_dir));

    // Budget columns: the canonical five plus anything extra that was run.
    std::set<int> budget_set(kTableBudgets.begin(), kTableBudgets.end());
    for (const auto& [row, by_budget] : result.averaged.cells)
        for (const auto& [budget, cell] : by_budget) budget_set.insert(budget);
    const std::vector<int> budgets(budget_set.begin(), budget_set.end());

    const fs::path dir(out_dir);
    write_table(dir / "table_overall.csv", result.averaged, budgets,
                [](const CellResult& c) { return c.overall; });
    write_table(dir / "table_reconstruction.csv", result.averaged, budgets,
                [](const CellResult& c) { return c.reconstruction; });
    write_table(dir / "table_prediction.csv", result.averaged, budgets,
                [](const CellResult& c) { return c.prediction; });
    for (int h = 0; h < datagen::kNumHormones; ++h) {
        write_table(dir / ("table_overall_" + std::string(datagen::kHormoneNames[h]) + ".csv"),
                    result.averaged, budgets,
                    [h](const CellResult& c) { return c.per_hormone_overall[h]; });
    }
}

namespace {

json cell_to_json(const CellResult& c) {
    return {{"overall", c.overall},
            {"reconstruction", c.reconstruction},
            {"prediction", c.prediction},
            {"per_hormone_overall", c.per_hormone_overall}};
}

CellResult cell_from_json(const json& j) {
    CellResult c;
    c.overall = j.at("overall").get<double>();
    c.reconstruction = j.at("reconstruction").get<double>();
    c.prediction = j.at("prediction").get<double>();
    const auto& ph = j.at("per_hormone_overall");
    for (int h = 0; h < datagen::kNumHormones; ++h) c.per_hormone_overall[h] = ph[h].get<double>();
    return c;
}

json grid_to_json(const ResultGrid& grid) {
    json rows = json::object();
    for (const auto& [row, by_budget] : grid.cells) {
        json cells = json::object();
        for (const auto& [budget, cell] : by_budget)
            cells[std::to_string(budget)] = cell_to_json(cell);
        rows[row] = cells;
    }
    return rows;
}

ResultGrid grid_from_json(const json& j) {
    ResultGrid grid;
    for (const auto& [row, cells] : j.items())
        for (const auto& [budget, cell] : cells.items())
            grid.cells[row][std::stoi(budget)] = cell_from_json(cell);
    return grid;
}

}  // namespace

void write_results_json(const std::string& path, const ExperimentResult& result) {
    json per_seed = json::object();
    for (const auto& [seed, grid] : result.per_seed)
        per_seed[std::to_string(seed)] = grid_to_json(grid);
    json j = {{"averaged", grid_to_json(result.averaged)}, {"per_seed", per_seed}};
    io_util::write_text_file(path, j.dump(2) + "\n");
}

ExperimentResult read_results_json(const std::string& path) {
    const json j = json::parse(io_util::read_text_file(path));
    ExperimentResult result;
    result.averaged = grid_from_json(j.at("averaged"));
    for (const auto& [seed, grid] : j.at("per_seed").items())
        result.per_seed[std::stoull(seed)] = grid_from_json(grid);
    return result;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    const json j = json::parse(io_util::read_text_file(path));
    ExperimentConfig config;
    if (j.count("cohort")) {
        const auto& c = j.at("cohort");
        if (c.count("size")) config.cohort_size = c.at("size").get<int>();
        if (c.count("seed")) config.cohort_seed = c.at("seed").get<std::uint64_t>();
    }
    if (j.count("split_seeds"))
        config.split_seeds = j.at("split_seeds").get<std::vector<std::uint64_t>>();
    if (j.count("budgets")) config.budgets = j.at("budgets").get<std::vector<int>>();
    if (j.count("schemes")) {
        config.schemes.clear();
        for (const auto& s : j.at("schemes")) {
            const std::string name = s.get<std::string>();
            if (name == "random") config.schemes.push_back(Scheme::kRandom);
            else if (name == "ed") config.schemes.push_back(Scheme::kEd);
            else throw data_error("unknown scheme: " + name);
        }
    }
    if (j.count("variants")) {
        config.variants.clear();
        for (const auto& v : j.at("variants"))
            config.variants.push_back(variant_from_name(v.get<std::string>()));
    }
    auto& p = config.pipeline;
    if (j.count("mgp")) {
        const auto& m = j.at("mgp");
        if (m.count("restarts")) p.mgp_optimizer.restarts = m.at("restarts").get<int>();
        if (m.count("max_iterations"))
            p.mgp_optimizer.max_iterations = m.at("max_iterations").get<int>();
        if (m.count("learning_rate"))
            p.mgp_optimizer.learning_rate = m.at("learning_rate").get<double>();
        if (m.count("tolerance")) p.mgp_optimizer.tolerance = m.at("tolerance").get<double>();
        if (m.count("patience")) p.mgp_optimizer.patience = m.at("patience").get<int>();
        if (m.count("rank")) p.mgp_rank = m.at("rank").get<int>();
    }
    if (j.count("dcnn")) {
        const auto& d = j.at("dcnn");
        if (d.count("layers")) p.dcnn.layers = d.at("layers").get<int>();
        if (d.count("dilation")) p.dcnn.dilation = d.at("dilation").get<int>();
        if (d.count("filter_size")) p.dcnn.filter_size = d.at("filter_size").get<int>();
        if (d.count("hidden_width")) p.dcnn.hidden_width = d.at("hidden_width").get<int>();
        if (d.count("schedule"))
            p.dcnn.schedule = d.at("schedule").get<std::string>() == "exponential"
                                  ? dcnn::DilationSchedule::kExponential
                                  : dcnn::DilationSchedule::kConstant;
        if (d.count("learning_rate")) p.dcnn.learning_rate = d.at("learning_rate").get<double>();
        if (d.count("max_iterations")) p.dcnn.max_iterations = d.at("max_iterations").get<int>();
        if (d.count("batch_size")) p.dcnn.batch_size = d.at("batch_size").get<int>();
        if (d.count("adaptive_updates"))
            p.dcnn.adaptive_updates = d.at("adaptive_updates").get<bool>();
        if (d.count("eval_interval")) p.dcnn.eval_interval = d.at("eval_interval").get<int>();
        if (d.count("patience")) p.dcnn.patience = d.at("patience").get<int>();
        if (d.count("val_streams")) p.dcnn.val_streams = d.at("val_streams").get<int>();
    }
    if (j.count("streams")) p.streams = j.at("streams").get<int>();
    if (j.count("seeds")) {
        const auto& s = j.at("seeds");
        if (s.count("schedule")) p.schedule_seed = s.at("schedule").get<std::uint64_t>();
        if (s.count("mgp")) p.mgp_seed = s.at("mgp").get<std::uint64_t>();
        if (s.count("stream")) p.stream_seed = s.at("stream").get<std::uint64_t>();
        if (s.count("dcnn")) p.dcnn.seed = s.at("dcnn").get<std::uint64_t>();
    }
    if (j.count("jobs")) p.jobs = j.at("jobs").get<int>();
    if (j.count("out_dir")) p.out_dir = j.at("out_dir").get<std::string>();
    if (j.count("emit_curves")) p.emit_curves = j.at("emit_curves").get<bool>();
    return config;
}

}  // namespace cyclefit::eval
