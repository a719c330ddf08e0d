#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "cyclefit/common.hpp"
#include "cyclefit/mgp.hpp"

namespace cyclefit::sampling {

/// Concrete measurement days for one individual.
struct Schedule {
    enum class Origin { kRandom, kEd, kSeedPeaks };

    std::vector<int> days;  // sorted, unique, inside the window
    int budget = 0;
    Origin origin = Origin::kRandom;
};

/// Cohort-level schedule on the normalized cycle clock: two implicit LH-peak
/// seeds (materialized from each individual's own peak days) plus ED-chosen
/// (cycle, phase) entries.
struct NormalizedSchedule {
    struct Phase {
        int cycle = 0;       // 0-based cycle index within the window
        double phase = 0.0;  // fraction of cycle length, [0, 1)
    };

    int budget = 0;             // total days per individual, seeds included
    int seed_peaks = 2;         // leading LH peaks taken from the individual
    std::vector<Phase> phases;  // budget - seed_peaks entries
};

/// Closed-form E|y - z| for z ~ N(mu, sigma^2):
/// (y-mu)(2 Phi((y-mu)/sigma) - 1) + 2 sigma phi((y-mu)/sigma),
/// with the continuous limit |y - mu| at sigma = 0. Nonnegative.
double expected_distance(double y, double mu, double sigma);

/// Daily-resolution candidate grid over the two observed cycles:
/// (cycle, k/35) for cycle in {0,1}, k in 0..34.
std::vector<NormalizedSchedule::Phase> candidate_phase_grid();

/// Maps a normalized phase to this individual's day:
/// round((cycle + phase) * cycle_length), clamped to the window.
int phase_to_day(const NormalizedSchedule::Phase& p, double cycle_length, const DayRange& window);

/// One cohort member as seen by the planner: standardized truth, the fitted
/// posterior given the current schedule, and the cycle length used to map
/// phases to days.
struct EdMember {
    const Eigen::MatrixXd* truth = nullptr;          // H x T standardized
    const mgp::PosteriorSeries* post = nullptr;
    double cycle_length = 0.0;
};

/// Sum over individuals and hormones of the expected distance at each
/// candidate's mapped day. Candidates mapping outside the window for an
/// individual skip that individual's contribution.
std::vector<double> population_ed(const std::vector<EdMember>& cohort,
                                  const std::vector<NormalizedSchedule::Phase>& candidates,
                                  const DayRange& window);

/// Cohort data and fitting configuration for the greedy planner, which
/// refits every individual's MGP after each accepted phase.
struct EdPlannerInput {
    struct Member {
        Eigen::MatrixXd truth;      // H x T standardized
        double cycle_length = 0.0;
        std::vector<int> lh_peaks;  // first two LH-peak days inside the window
    };
    std::vector<Member> members;
    mgp::BlockStructure blocks = mgp::BlockStructure::blockwise();
    mgp::OptimizerConfig optimizer;
    int rank = 2;
    std::uint64_t seed = 0;
    int jobs = 1;
};

/// Greedy budgeted selection: start from the two seeded LH peaks, then add
/// the argmax-population-ED phase (ties to the earliest candidate) until the
/// budget is reached. Throws data_error if budget < 2 or exceeds the window.
NormalizedSchedule ed_greedy(const EdPlannerInput& input, int budget, const DayRange& window);

/// budget days: the two LH peaks plus budget-2 days drawn uniformly without
/// replacement from the remaining window days.
Schedule random_schedule(int budget, const DayRange& window, const std::vector<int>& lh_peaks,
                         Rng& rng);

/// Per-individual days for a normalized schedule; duplicates resolve to the
/// nearest free day inside the window.
Schedule materialize(const NormalizedSchedule& norm, double cycle_length,
                     const std::vector<int>& lh_peaks, const DayRange& window);

// Schedule JSON: budget, origin, normalized phases, per-individual days, seed.
void write_schedule_json(const std::string& path, const NormalizedSchedule& norm,
                         const std::vector<std::string>& individual_ids,
                         const std::vector<Schedule>& materialized, std::uint64_t seed);
NormalizedSchedule read_schedule_json(const std::string& path);

}  // namespace cyclefit::sampling
