#pragma once

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "cyclefit/common.hpp"

namespace cyclefit::datagen {

// Hormone index order is fixed across all modules and file formats.
enum class Hormone : int { E = 0, P = 1, Ih = 2, FSH = 3, LH = 4 };

inline constexpr int kNumHormones = 5;
inline constexpr int kSeriesDays = 105;        // T
inline constexpr int kObservationDays = 70;    // observed window [1, 70]

inline constexpr std::array<const char*, kNumHormones> kHormoneNames = {"E", "P", "Ih", "FSH",
                                                                        "LH"};

int hormone_index(const std::string& name);

/// One individual's high-level cycle descriptors, in days.
struct CycleCharacteristics {
    double ovulation_day = 0.0;
    double cycle_length = 0.0;

    bool valid() const {
        return ovulation_day >= 3.0 && ovulation_day <= cycle_length - 3.0 &&
               cycle_length >= 21.0 && cycle_length <= 45.0;
    }
};

/// Bivariate Gaussian over (ovulation day, cycle length).
struct PopulationGaussian {
    Eigen::Vector2d mean;
    Eigen::Matrix2d covariance;
};

/// Gaussian fit of the self-reported cohort distribution:
/// mean [15.5, 29.1], covariance [[25.5, 8.0], [8.0, 12.6]].
PopulationGaussian default_population_gaussian();

// Bump shapes per hormone in normalized cycle time u in [0,1); one entry per
// additive component. Centers tagged kOvulation are offsets from the
// ovulation phase, kMidLuteal sits halfway between ovulation and cycle end,
// kAbsolute is a fixed phase.
struct WaveformParams {
    struct Bump {
        enum class Anchor { kOvulation, kMidLuteal, kAbsolute };
        Anchor anchor;
        double phase_offset;  // added to the anchor phase
        double width;         // sigma, fraction of cycle length
        double amplitude;     // raw hormone units
    };
    struct HormoneShape {
        double baseline;
        std::vector<Bump> bumps;
    };

    std::array<HormoneShape, kNumHormones> shapes;
    double jitter = 0.1;  // lognormal sigma applied per individual to amplitudes/widths/baselines

    static WaveformParams defaults();
};

/// Ground-truth daily hormone matrix for one simulated individual.
struct IndividualSeries {
    std::string id;
    Eigen::MatrixXd values;  // kNumHormones x kSeriesDays, raw units, noise-free
    CycleCharacteristics characteristics;
    std::vector<int> ovulation_day_per_cycle;  // 1-based day of the LH max, complete cycles only

    int num_complete_cycles() const { return static_cast<int>(ovulation_day_per_cycle.size()); }
    /// 1-based inclusive day span of complete cycle c (0-based cycle index).
    DayRange cycle_span(int c) const;
};

/// Draws one (ovulation day, cycle length) pair from pop, rejecting draws
/// outside the physiologic box (ovulation at least 3 days from either cycle
/// end, cycle length in [21, 35] so that T=105 always holds 3 full cycles).
/// Throws data_error after 10,000 rejected draws.
CycleCharacteristics sample_characteristics(const PopulationGaussian& pop, Rng& rng);

IndividualSeries generate_series(const CycleCharacteristics& chars, const WaveformParams& wave,
                                 Rng& rng, std::string id = "");

/// n individuals, each drawn via sample_characteristics + generate_series.
/// Individual k uses the sub-seed mix_seed(seed, k), so cohorts are
/// prefix-stable in n.
std::vector<IndividualSeries> generate_cohort(int n, const PopulationGaussian& pop,
                                              const WaveformParams& wave, std::uint64_t seed);

/// Day of the LH maximum for every complete cycle whose span lies inside
/// `within`. Empty if no complete cycle fits.
std::vector<int> lh_peak_days(const IndividualSeries& series, const DayRange& within);

// Dataset files: CSV rows individual_id,day,E,P,Ih,FSH,LH plus a JSON sidecar
// with per-individual characteristics, ovulation days, seed and waveform.
void write_dataset_csv(const std::string& path, const std::vector<IndividualSeries>& cohort);
void write_dataset_metadata(const std::string& path, const std::vector<IndividualSeries>& cohort,
                            std::uint64_t seed, const WaveformParams& wave);
std::vector<IndividualSeries> read_dataset(const std::string& csv_path,
                                           const std::string& metadata_path);

}  // namespace cyclefit::datagen
