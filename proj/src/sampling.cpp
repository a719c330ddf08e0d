#include "cyclefit/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <set>

#include "cyclefit/io_util.hpp"

namespace cyclefit::sampling {

using json = nlohmann::json;

double expected_distance(double y, double mu, double sigma) {
    if (sigma < 0.0) throw data_error("expected_distance: sigma must be nonnegative");
    const double delta = y - mu;
    if (sigma == 0.0) return std::abs(delta);
    const double z = delta / sigma;
    return delta * (2.0 * normal_cdf(z) - 1.0) + 2.0 * sigma * normal_pdf(z);
}

std::vector<NormalizedSchedule::Phase> candidate_phase_grid() {
    std::vector<NormalizedSchedule::Phase> grid;
    grid.reserve(70);
    for (int cycle = 0; cycle < 2; ++cycle)
        for (int k = 0; k < 35; ++k) grid.push_back({cycle, k / 35.0});
    return grid;
}

int phase_to_day(const NormalizedSchedule::Phase& p, double cycle_length, const DayRange& window) {
    const int day = static_cast<int>(std::llround((p.cycle + p.phase) * cycle_length));
    return std::clamp(day, window.first, window.last);
}

std::vector<double> population_ed(const std::vector<EdMember>& cohort,
                                  const std::vector<NormalizedSchedule::Phase>& candidates,
                                  const DayRange& window) {
    std::vector<double> scores(candidates.size(), 0.0);
    for (std::size_t c = 0; c < candidates.size(); ++c) {
        double score = 0.0;
        for (const auto& member : cohort) {
            const int raw_day =
                static_cast<int>(std::llround((candidates[c].cycle + candidates[c].phase) *
                                              member.cycle_length));
            if (raw_day < window.first || raw_day > window.last) continue;
            const int num_tasks = member.post->num_tasks();
            for (int h = 0; h < num_tasks; ++h) {
                const double mu = member.post->mean()(h, raw_day - 1);
                const double var = std::max(0.0, member.post->variance(h, raw_day));
                score += expected_distance((*member.truth)(h, raw_day - 1), mu, std::sqrt(var));
            }
        }
        scores[c] = score;
    }
    return scores;
}

namespace {

mgp::ObservationSet observations_at(const Eigen::MatrixXd& truth, const std::vector<int>& days) {
    Eigen::MatrixXd values(days.size(), truth.rows());
    for (std::size_t i = 0; i < days.size(); ++i)
        values.row(i) = truth.col(days[i] - 1).transpose();
    return mgp::ObservationSet(days, std::move(values));
}

}  // namespace

NormalizedSchedule ed_greedy(const EdPlannerInput& input, int budget, const DayRange& window) {
    if (budget < 2) throw data_error("ed_greedy: budget must cover the two seeded LH peaks");
    if (budget > window.size()) throw data_error("ed_greedy: budget exceeds the window size");
    if (input.members.empty()) throw data_error("ed_greedy: empty cohort");

    NormalizedSchedule norm;
    norm.budget = budget;
    norm.seed_peaks = 2;

    const auto grid = candidate_phase_grid();
    std::vector<bool> chosen(grid.size(), false);

    while (2 + static_cast<int>(norm.phases.size()) < budget) {
        // Refit every member on its current materialized schedule, then score
        // the remaining candidates against the cohort.
        std::vector<mgp::PosteriorSeries> posteriors(input.members.size(),
                                                     mgp::PosteriorSeries({}, {}, {}));
        parallel_for(input.members.size(), input.jobs, [&](std::size_t i) {
            const auto& member = input.members[i];
            const Schedule schedule =
                materialize(norm, member.cycle_length, member.lh_peaks, window);
            const auto obs = observations_at(member.truth, schedule.days);
            Rng init_rng(mix_seed(input.seed, i));
            const auto init = mgp::MgpHyperparams::initial(input.blocks, member.cycle_length,
                                                           input.rank, init_rng);
            mgp::OptimizerConfig opt = input.optimizer;
            opt.seed = mix_seed(mix_seed(input.seed, 0x9e3779b9), i);
            const auto fit = mgp::fit(obs, input.blocks, init, opt);
            posteriors[i] =
                mgp::posterior(fit.hyper, input.blocks, obs,
                               static_cast<int>(member.truth.cols()));
        });

        std::vector<EdMember> cohort;
        cohort.reserve(input.members.size());
        for (std::size_t i = 0; i < input.members.size(); ++i)
            cohort.push_back(
                {&input.members[i].truth, &posteriors[i], input.members[i].cycle_length});

        std::vector<NormalizedSchedule::Phase> open;
        std::vector<std::size_t> open_index;
        for (std::size_t c = 0; c < grid.size(); ++c) {
            if (!chosen[c]) {
                open.push_back(grid[c]);
                open_index.push_back(c);
            }
        }
        const std::vector<double> scores = population_ed(cohort, open, window);

        // Argmax with ties resolved to the earliest phase; the grid is
        // already ordered by (cycle, phase).
        std::size_t best = 0;
        for (std::size_t c = 1; c < scores.size(); ++c)
            if (scores[c] > scores[best]) best = c;
        chosen[open_index[best]] = true;
        // Keep the template sorted as it grows, so the schedules the loop
        // refits on are exactly what the emitted template materializes to.
        const auto before = [](const NormalizedSchedule::Phase& a,
                               const NormalizedSchedule::Phase& b) {
            return a.cycle != b.cycle ? a.cycle < b.cycle : a.phase < b.phase;
        };
        norm.phases.insert(
            std::upper_bound(norm.phases.begin(), norm.phases.end(), open[best], before),
            open[best]);
    }
    return norm;
}

Schedule random_schedule(int budget, const DayRange& window, const std::vector<int>& lh_peaks,
                         Rng& rng) {
    if (lh_peaks.size() < 2) throw data_error("random_schedule: need two LH-peak days");
    if (budget < 2) throw data_error("random_schedule: budget must cover the two LH peaks");
    if (budget > window.size()) throw data_error("random_schedule: budget exceeds window size");
    const int peak_a = lh_peaks[0];
    const int peak_b = lh_peaks[1];
    if (!window.contains(peak_a) || !window.contains(peak_b))
        throw data_error("random_schedule: LH peaks outside the window");

    std::vector<int> pool;
    for (int d = window.first; d <= window.last; ++d)
        if (d != peak_a && d != peak_b) pool.push_back(d);

    Schedule schedule;
    schedule.budget = budget;
    schedule.origin = Schedule::Origin::kRandom;
    schedule.days = {peak_a, peak_b};
    // Partial Fisher-Yates: draw budget-2 days without replacement.
    for (int i = 0; i < budget - 2; ++i) {
        const int j = rng.uniform_int(i, static_cast<int>(pool.size()) - 1);
        std::swap(pool[i], pool[j]);
        schedule.days.push_back(pool[i]);
    }
    std::sort(schedule.days.begin(), schedule.days.end());
    return schedule;
}

Schedule materialize(const NormalizedSchedule& norm, double cycle_length,
                     const std::vector<int>& lh_peaks, const DayRange& window) {
    if (static_cast<int>(lh_peaks.size()) < norm.seed_peaks)
        throw data_error("materialize: fewer LH peaks than schedule seeds");

    Schedule schedule;
    schedule.budget = norm.budget;
    schedule.origin = norm.phases.empty() ? Schedule::Origin::kSeedPeaks : Schedule::Origin::kEd;

    std::set<int> days;
    for (int s = 0; s < norm.seed_peaks; ++s) {
        if (!window.contains(lh_peaks[s]))
            throw data_error("materialize: seed LH peak outside the window");
        days.insert(lh_peaks[s]);
    }
    const auto insert_nearest_free = [&](int day) {
        if (days.insert(day).second) return;
        for (int step = 1; step <= window.size(); ++step) {
            const int lo = day - step, hi = day + step;
            if (window.contains(lo) && days.insert(lo).second) return;
            if (window.contains(hi) && days.insert(hi).second) return;
        }
        throw data_error("materialize: window exhausted while resolving duplicates");
    };
    for (const auto& phase : norm.phases)
        insert_nearest_free(phase_to_day(phase, cycle_length, window));

    schedule.days.assign(days.begin(), days.end());
    return schedule;
}

void write_schedule_json(const std::string& path, const NormalizedSchedule& norm,
                         const std::vector<std::string>& individual_ids,
                         const std::vector<Schedule>& materialized, std::uint64_t seed) {
    json phases = json::array();
    for (const auto& p : norm.phases) phases.push_back({{"cycle", p.cycle}, {"phase", p.phase}});
    json per_individual = json::array();
    for (std::size_t i = 0; i < materialized.size(); ++i) {
        per_individual.push_back(
            {{"id", i < individual_ids.size() ? individual_ids[i] : std::to_string(i)},
             {"days", materialized[i].days}});
    }
    json j = {{"budget", norm.budget},
              {"seed_peaks", norm.seed_peaks},
              {"origin", "ed"},
              {"phases", phases},
              {"individuals", per_individual},
              {"seed", seed}};
    io_util::write_text_file(path, j.dump(2) + "\n");
}

NormalizedSchedule read_schedule_json(const std::string& path) {
    const json j = json::parse(io_util::read_text_file(path));
    NormalizedSchedule norm;
    norm.budget = j.at("budget").get<int>();
    norm.seed_peaks = j.at("seed_peaks").get<int>();
    for (const auto& p : j.at("phases"))
        norm.phases.push_back({p.at("cycle").get<int>(), p.at("phase").get<double>()});
    return norm;
}

}  // namespace cyclefit::sampling
