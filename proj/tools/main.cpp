#include <CLI11.hpp>
#include <Eigen/Dense>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>

#include "cyclefit/datagen.hpp"
#include "cyclefit/dcnn.hpp"
#include "cyclefit/eval.hpp"
#include "cyclefit/io_util.hpp"
#include "cyclefit/mgp.hpp"
#include "cyclefit/sampling.hpp"

#ifndef CYCLEFIT_VERSION
#define CYCLEFIT_VERSION "0.1.0"
#endif
#ifndef CYCLEFIT_COMPILER
#define CYCLEFIT_COMPILER "unknown compiler"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cyclefit;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct ScheduleFile {
    sampling::NormalizedSchedule norm;
    std::map<std::string, std::vector<int>> days_by_id;
};

ScheduleFile read_schedule_file(const std::string& path) {
    ScheduleFile file;
    file.norm = sampling::read_schedule_json(path);
    const json j = json::parse(io_util::read_text_file(path));
    for (const auto& ind : j.at("individuals"))
        file.days_by_id[ind.at("id").get<std::string>()] =
            ind.at("days").get<std::vector<int>>();
    return file;
}

void write_scaler(const std::string& path, const eval::Scaler& scaler) {
    json mean = json::array(), std = json::array();
    for (int h = 0; h < datagen::kNumHormones; ++h) {
        mean.push_back(scaler.mean[h]);
        std.push_back(scaler.std[h]);
    }
    io_util::write_text_file(path, json{{"mean", mean}, {"std", std}}.dump(2) + "\n");
}

eval::Scaler read_scaler(const std::string& path) {
    const json j = json::parse(io_util::read_text_file(path));
    eval::Scaler scaler;
    scaler.mean.resize(datagen::kNumHormones);
    scaler.std.resize(datagen::kNumHormones);
    for (int h = 0; h < datagen::kNumHormones; ++h) {
        scaler.mean[h] = j.at("mean")[h].get<double>();
        scaler.std[h] = j.at("std")[h].get<double>();
    }
    return scaler;
}

std::vector<datagen::IndividualSeries> load_data_dir(const std::string& dir) {
    return datagen::read_dataset((fs::path(dir) / "dataset.csv").string(),
                                 (fs::path(dir) / "metadata.json").string());
}

dcnn::DcnnConfig load_dcnn_config(const std::string& path) {
    dcnn::DcnnConfig config;
    if (path.empty()) return config;
    const json d = json::parse(io_util::read_text_file(path));
    if (d.count("layers")) config.layers = d.at("layers").get<int>();
    if (d.count("dilation")) config.dilation = d.at("dilation").get<int>();
    if (d.count("filter_size")) config.filter_size = d.at("filter_size").get<int>();
    if (d.count("hidden_width")) config.hidden_width = d.at("hidden_width").get<int>();
    if (d.count("schedule"))
        config.schedule = d.at("schedule").get<std::string>() == "exponential"
                              ? dcnn::DilationSchedule::kExponential
                              : dcnn::DilationSchedule::kConstant;
    if (d.count("learning_rate")) config.learning_rate = d.at("learning_rate").get<double>();
    if (d.count("max_iterations")) config.max_iterations = d.at("max_iterations").get<int>();
    if (d.count("batch_size")) config.batch_size = d.at("batch_size").get<int>();
    if (d.count("adaptive_updates"))
        config.adaptive_updates = d.at("adaptive_updates").get<bool>();
    if (d.count("streams")) {}  // consumed by the caller
    return config;
}

mgp::OptimizerConfig load_optimizer_config(const std::string& path) {
    mgp::OptimizerConfig opt;
    if (path.empty()) return opt;
    const json m = json::parse(io_util::read_text_file(path));
    if (m.count("restarts")) opt.restarts = m.at("restarts").get<int>();
    if (m.count("max_iterations")) opt.max_iterations = m.at("max_iterations").get<int>();
    if (m.count("learning_rate")) opt.learning_rate = m.at("learning_rate").get<double>();
    if (m.count("tolerance")) opt.tolerance = m.at("tolerance").get<double>();
    if (m.count("patience")) opt.patience = m.at("patience").get<int>();
    return opt;
}

mgp::BlockStructure blocks_from_name(const std::string& name) {
    if (name == "full") return mgp::BlockStructure::full(5);
    if (name == "blockwise") return mgp::BlockStructure::blockwise();
    if (name == "independent") return mgp::BlockStructure::independent(5);
    throw data_error("unknown block structure: " + name);
}

int cmd_generate(int n, std::uint64_t seed, const std::string& out,
                 const std::string& config_path) {
    datagen::WaveformParams wave = datagen::WaveformParams::defaults();
    if (!config_path.empty()) {
        const json j = json::parse(io_util::read_text_file(config_path));
        if (j.count("jitter")) wave.jitter = j.at("jitter").get<double>();
    }
    const auto cohort =
        datagen::generate_cohort(n, datagen::default_population_gaussian(), wave, seed);
    fs::create_directories(out);
    datagen::write_dataset_csv((fs::path(out) / "dataset.csv").string(), cohort);
    datagen::write_dataset_metadata((fs::path(out) / "metadata.json").string(), cohort, seed,
                                    wave);
    std::cout << "wrote " << cohort.size() << " individuals to " << out << "\n";
    return 0;
}

int cmd_fit_mgp(const std::string& data, const std::string& blocks_name,
                const std::string& schedule_path, const std::string& out,
                const std::string& config_path, std::uint64_t seed, int jobs) {
    const auto cohort = load_data_dir(data);
    const auto blocks = blocks_from_name(blocks_name);
    const auto schedule = read_schedule_file(schedule_path);
    const mgp::OptimizerConfig base_opt = load_optimizer_config(config_path);

    std::vector<const datagen::IndividualSeries*> all;
    for (const auto& s : cohort) all.push_back(&s);
    const eval::Scaler scaler = eval::fit_scaler(all);

    fs::create_directories(fs::path(out) / "models");
    fs::create_directories(fs::path(out) / "posteriors");
    write_scaler((fs::path(out) / "scaler.json").string(), scaler);
    fs::copy_file(schedule_path, fs::path(out) / "schedule.json",
                  fs::copy_options::overwrite_existing);

    std::vector<std::string> failures(cohort.size());
    parallel_for(cohort.size(), jobs, [&](std::size_t i) {
        const auto& series = cohort[i];
        const auto it = schedule.days_by_id.find(series.id);
        if (it == schedule.days_by_id.end()) {
            failures[i] = "no schedule entry";
            return;
        }
        try {
            const Eigen::MatrixXd truth_std = scaler.apply(series.values);
            Eigen::MatrixXd values(it->second.size(), datagen::kNumHormones);
            for (std::size_t r = 0; r < it->second.size(); ++r) {
                const int day = it->second[r];
                if (day < 1 || day > datagen::kObservationDays)
                    throw data_error("schedule day outside [1, 70]");
                values.row(r) = truth_std.col(day - 1).transpose();
            }
            mgp::ObservationSet obs(it->second, std::move(values), series.id);
            Rng init_rng(mix_seed(seed, i));
            const auto init = mgp::MgpHyperparams::initial(
                blocks, series.characteristics.cycle_length, 2, init_rng);
            mgp::OptimizerConfig opt = base_opt;
            opt.seed = mix_seed(mix_seed(seed, 0xF17ull), i);
            const auto fit = mgp::fit(obs, blocks, init, opt);
            mgp::write_model((fs::path(out) / "models" / (series.id + ".json")).string(), blocks,
                             fit);
            const auto post = mgp::posterior(fit.hyper, blocks, obs, datagen::kSeriesDays);
            mgp::write_posterior_csv(
                (fs::path(out) / "posteriors" / (series.id + ".csv")).string(), series.id, post,
                {datagen::kHormoneNames.begin(), datagen::kHormoneNames.end()});
        } catch (const std::exception& e) {
            failures[i] = e.what();
        }
    });

    int failed = 0;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        if (!failures[i].empty()) {
            ++failed;
            std::cerr << "fit failed for " << cohort[i].id << ": " << failures[i] << "\n";
        }
    }
    std::cout << "fitted " << (cohort.size() - failed) << "/" << cohort.size()
              << " individuals\n";
    return failed == 0 ? 0 : kExitNumerical;
}

int cmd_plan_ed(const std::string& data, int budget, const std::string& out,
                const std::string& config_path, std::uint64_t seed, int jobs) {
    const auto cohort = load_data_dir(data);
    std::vector<const datagen::IndividualSeries*> all;
    for (const auto& s : cohort) all.push_back(&s);
    const eval::Scaler scaler = eval::fit_scaler(all);

    const DayRange window{1, datagen::kObservationDays};
    sampling::EdPlannerInput input;
    for (const auto& series : cohort) {
        const auto peaks = datagen::lh_peak_days(series, window);
        if (peaks.size() < 2) throw data_error(series.id + ": fewer than two LH peaks");
        input.members.push_back({scaler.apply(series.values),
                                 series.characteristics.cycle_length,
                                 {peaks[0], peaks[1]}});
    }
    input.optimizer = load_optimizer_config(config_path);
    input.seed = seed;
    input.jobs = jobs;

    const auto norm = sampling::ed_greedy(input, budget, window);
    std::vector<std::string> ids;
    std::vector<sampling::Schedule> materialized;
    for (const auto& series : cohort) {
        const auto peaks = datagen::lh_peak_days(series, window);
        ids.push_back(series.id);
        materialized.push_back(sampling::materialize(norm, series.characteristics.cycle_length,
                                                     {peaks[0], peaks[1]}, window));
    }
    fs::create_directories(fs::path(out).parent_path().empty() ? "."
                                                               : fs::path(out).parent_path());
    sampling::write_schedule_json(out, norm, ids, materialized, seed);
    std::cout << "planned " << budget << "-day schedule (" << norm.phases.size()
              << " ED phases + " << norm.seed_peaks << " peak seeds) -> " << out << "\n";
    return 0;
}

int cmd_train_dcnn(const std::string& posteriors_dir, const std::string& targets,
                   const std::string& config_path, const std::string& out, std::uint64_t seed,
                   int streams) {
    const auto cohort = load_data_dir(targets);
    const eval::Scaler scaler =
        read_scaler((fs::path(posteriors_dir) / "scaler.json").string());
    const auto schedule =
        read_schedule_file((fs::path(posteriors_dir) / "schedule.json").string());

    dcnn::DcnnConfig config = load_dcnn_config(config_path);
    config.seed = mix_seed(seed, 1);
    if (!config_path.empty()) {
        const json j = json::parse(io_util::read_text_file(config_path));
        if (j.count("streams")) streams = j.at("streams").get<int>();
    }

    dcnn::TrainingSet train_set;
    for (const auto& series : cohort) {
        const fs::path model_path = fs::path(posteriors_dir) / "models" / (series.id + ".json");
        if (!fs::exists(model_path)) continue;
        mgp::BlockStructure blocks;
        const auto fit = mgp::read_model(model_path.string(), &blocks);
        const auto days_it = schedule.days_by_id.find(series.id);
        if (days_it == schedule.days_by_id.end()) continue;

        const Eigen::MatrixXd truth_std = scaler.apply(series.values);
        Eigen::MatrixXd values(days_it->second.size(), datagen::kNumHormones);
        for (std::size_t r = 0; r < days_it->second.size(); ++r)
            values.row(r) = truth_std.col(days_it->second[r] - 1).transpose();
        mgp::ObservationSet obs(days_it->second, std::move(values), series.id);
        const auto post = mgp::posterior(fit.hyper, blocks, obs, datagen::kSeriesDays);

        Rng rng(mix_seed(seed, std::hash<std::string>{}(series.id)));
        dcnn::StreamGroup group;
        group.streams = mgp::draw_streams(post, streams, rng);
        group.target = truth_std;
        train_set.push_back(std::move(group));
    }
    if (train_set.empty()) throw data_error("train-dcnn: no usable individuals");

    Rng init_rng(mix_seed(seed, 2));
    dcnn::DcnnModel model = dcnn::DcnnModel::init(config, datagen::kNumHormones, init_rng);
    const auto result = dcnn::train(std::move(model), train_set, {}, {1, datagen::kSeriesDays});

    fs::create_directories(out);
    dcnn::write_checkpoint((fs::path(out) / "dcnn.json").string(), result.model);
    dcnn::write_history_csv((fs::path(out) / "history.csv").string(), result.history);
    std::cout << "trained DCNN on " << train_set.size() << " individuals x " << streams
              << " streams, " << result.iterations_run << " iterations\n";
    return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& out, std::uint64_t seed,
                 bool seed_given, int jobs, bool jobs_given) {
    eval::ExperimentConfig config = eval::load_experiment_config(config_path);
    if (!out.empty()) config.pipeline.out_dir = out;
    if (seed_given) config.cohort_seed = seed;
    if (jobs_given) config.pipeline.jobs = jobs;

    const auto result = eval::run_experiment(config);
    if (!config.pipeline.out_dir.empty()) {
        fs::create_directories(config.pipeline.out_dir);
        eval::write_results_json(
            (fs::path(config.pipeline.out_dir) / "results.json").string(), result);
        eval::emit_tables(result, (fs::path(config.pipeline.out_dir) / "tables").string());
        std::cout << "results written to " << config.pipeline.out_dir << "\n";
    }
    for (const auto& [row, by_budget] : result.averaged.cells)
        for (const auto& [budget, cell] : by_budget)
            std::cout << row << " @ budget " << budget << ": overall MSE "
                      << io_util::format_double(cell.overall) << "\n";
    return 0;
}

int cmd_report(const std::string& results, const std::string& out) {
    const fs::path path = fs::is_directory(results) ? fs::path(results) / "results.json"
                                                    : fs::path(results);
    if (!fs::exists(path)) throw data_error("report: no results at " + path.string());
    const auto result = eval::read_results_json(path.string());
    eval::emit_tables(result, out);
    std::cout << "tables written to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hormone time-series reconstruction: cohort simulation, multi-task GP fitting,\n"
                 "dilated-convolution reconstruction and measurement-day planning"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string("cyclefit ") + CYCLEFIT_VERSION + " (" +
                                          __DATE__ + ", " + CYCLEFIT_COMPILER + ")");

    std::uint64_t seed = 0;
    std::string config_path, out, data, blocks_name = "blockwise", schedule_path;
    std::string posteriors_dir, targets, results;
    int n = 60, budget = 10, jobs = 1, streams = 100;

    auto* generate = app.add_subcommand("generate", "Simulate a synthetic cohort");
    generate->add_option("--n", n, "number of individuals")->check(CLI::PositiveNumber);
    generate->add_option("--seed", seed, "cohort seed");
    generate->add_option("--out", out, "output directory")->required();
    generate->add_option("--config", config_path, "waveform overrides (JSON)");

    auto* fit_mgp = app.add_subcommand("fit-mgp", "Fit per-individual multi-task GPs");
    fit_mgp->add_option("--data", data, "dataset directory")->required();
    fit_mgp->add_option("--blocks", blocks_name, "full | blockwise | independent")
        ->check(CLI::IsMember({"full", "blockwise", "independent"}));
    fit_mgp->add_option("--schedule", schedule_path, "schedule JSON")->required();
    fit_mgp->add_option("--out", out, "output directory")->required();
    fit_mgp->add_option("--config", config_path, "optimizer settings (JSON)");
    fit_mgp->add_option("--seed", seed, "fit seed");
    fit_mgp->add_option("--jobs", jobs, "parallel fits");

    auto* plan_ed = app.add_subcommand("plan-ed", "Greedy expected-distance day planning");
    plan_ed->add_option("--data", data, "dataset directory")->required();
    plan_ed->add_option("--budget", budget, "measurement days")->check(CLI::PositiveNumber);
    plan_ed->add_option("--out", out, "schedule JSON path")->required();
    plan_ed->add_option("--config", config_path, "optimizer settings (JSON)");
    plan_ed->add_option("--seed", seed, "planner seed");
    plan_ed->add_option("--jobs", jobs, "parallel refits");

    auto* train_dcnn = app.add_subcommand("train-dcnn", "Train the reconstruction network");
    train_dcnn->add_option("--posteriors", posteriors_dir, "fit-mgp output directory")
        ->required();
    train_dcnn->add_option("--targets", targets, "dataset directory")->required();
    train_dcnn->add_option("--config", config_path, "network settings (JSON)");
    train_dcnn->add_option("--out", out, "output directory")->required();
    train_dcnn->add_option("--seed", seed, "training seed");
    train_dcnn->add_option("--streams", streams, "posterior streams per individual");

    auto* evaluate = app.add_subcommand("evaluate", "Run an experiment grid");
    evaluate->add_option("--config", config_path, "experiment config (JSON)")->required();
    evaluate->add_option("--out", out, "output directory");
    auto* eval_seed = evaluate->add_option("--seed", seed, "cohort seed override");
    auto* eval_jobs = evaluate->add_option("--jobs", jobs, "parallel fits");

    auto* report = app.add_subcommand("report", "Emit result tables from stored results");
    report->add_option("--results", results, "results directory or results.json")->required();
    report->add_option("--out", out, "output directory")->required();
    report->add_option("--seed", seed, "unused; accepted for interface uniformity");
    report->add_option("--config", config_path, "unused; accepted for interface uniformity");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        if (generate->parsed()) return cmd_generate(n, seed, out, config_path);
        if (fit_mgp->parsed())
            return cmd_fit_mgp(data, blocks_name, schedule_path, out, config_path, seed, jobs);
        if (plan_ed->parsed()) return cmd_plan_ed(data, budget, out, config_path, seed, jobs);
        if (train_dcnn->parsed())
            return cmd_train_dcnn(posteriors_dir, targets, config_path, out, seed, streams);
        if (evaluate->parsed())
            return cmd_evaluate(config_path, out, seed, !eval_seed->empty(), jobs,
                                !eval_jobs->empty());
        if (report->parsed()) return cmd_report(results, out);
    } catch (const numerical_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const data_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return 0;
}
