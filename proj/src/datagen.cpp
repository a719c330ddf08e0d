#include "cyclefit/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <nlohmann/json.hpp>

#include "cyclefit/io_util.hpp"

namespace cyclefit::datagen {

using json = nlohmann::json;

namespace {

// Sampler rejection box. The upper cycle-length bound is T/3 so every
// individual holds three full cycles in 105 days (and therefore two LH peaks
// inside the 70-day observation window).
constexpr double kMinCycleLength = 21.0;
constexpr double kMaxSampledCycleLength = 35.0;
constexpr double kOvulationMargin = 3.0;
constexpr int kMaxRejections = 10000;

double anchor_phase(const WaveformParams::Bump& bump, double ovulation_phase) {
    switch (bump.anchor) {
        case WaveformParams::Bump::Anchor::kOvulation:
            return ovulation_phase + bump.phase_offset;
        case WaveformParams::Bump::Anchor::kMidLuteal:
            return 0.5 * (ovulation_phase + 1.0) + bump.phase_offset;
        case WaveformParams::Bump::Anchor::kAbsolute:
            return bump.phase_offset;
    }
    return bump.phase_offset;
}

std::string anchor_name(WaveformParams::Bump::Anchor a) {
    switch (a) {
        case WaveformParams::Bump::Anchor::kOvulation: return "ovulation";
        case WaveformParams::Bump::Anchor::kMidLuteal: return "mid_luteal";
        case WaveformParams::Bump::Anchor::kAbsolute: return "absolute";
    }
    return "absolute";
}

WaveformParams::Bump::Anchor anchor_from_name(const std::string& name) {
    if (name == "ovulation") return WaveformParams::Bump::Anchor::kOvulation;
    if (name == "mid_luteal") return WaveformParams::Bump::Anchor::kMidLuteal;
    if (name == "absolute") return WaveformParams::Bump::Anchor::kAbsolute;
    throw data_error("unknown bump anchor: " + name);
}

}  // namespace

int hormone_index(const std::string& name) {
    for (int h = 0; h < kNumHormones; ++h)
        if (name == kHormoneNames[h]) return h;
    throw data_error("unknown hormone name: " + name);
}

PopulationGaussian default_population_gaussian() {
    PopulationGaussian pop;
    pop.mean << 15.5, 29.1;
    pop.covariance << 25.5, 8.0, 8.0, 12.6;
    return pop;
}

WaveformParams WaveformParams::defaults() {
    using Anchor = Bump::Anchor;
    WaveformParams w;
    w.shapes[static_cast<int>(Hormone::E)] = {
        40.0,
        {{Anchor::kOvulation, -0.08, 0.04, 180.0}, {Anchor::kMidLuteal, 0.0, 0.10, 90.0}}};
    w.shapes[static_cast<int>(Hormone::P)] = {0.7, {{Anchor::kMidLuteal, 0.0, 0.12, 12.0}}};
    w.shapes[static_cast<int>(Hormone::Ih)] = {40.0, {{Anchor::kMidLuteal, 0.0, 0.12, 80.0}}};
    w.shapes[static_cast<int>(Hormone::FSH)] = {
        5.0, {{Anchor::kOvulation, 0.0, 0.03, 12.0}, {Anchor::kAbsolute, 0.05, 0.03, 3.0}}};
    w.shapes[static_cast<int>(Hormone::LH)] = {4.0, {{Anchor::kOvulation, 0.0, 0.015, 40.0}}};
    w.jitter = 0.1;
    return w;
}

DayRange IndividualSeries::cycle_span(int c) const {
    const double len = characteristics.cycle_length;
    return {static_cast<int>(std::floor(c * len)) + 1,
            static_cast<int>(std::floor((c + 1) * len))};
}

CycleCharacteristics sample_characteristics(const PopulationGaussian& pop, Rng& rng) {
    // Eigen-based square root instead of Cholesky: tolerates the degenerate
    // (zero-covariance) case.
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(pop.covariance);
    if (es.info() != Eigen::Success) throw data_error("population covariance decomposition failed");
    Eigen::Vector2d evals = es.eigenvalues();
    const double scale = std::max(1.0, pop.covariance.cwiseAbs().maxCoeff());
    for (int i = 0; i < 2; ++i) {
        if (evals[i] < -1e-10 * scale)
            throw data_error("population covariance is not positive semi-definite");
        evals[i] = std::max(evals[i], 0.0);
    }
    const Eigen::Matrix2d root =
        es.eigenvectors() * evals.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();

    int rejections = 0;
    for (;;) {
        Eigen::Vector2d z;
        z << rng.normal(), rng.normal();
        const Eigen::Vector2d draw = pop.mean + root * z;
        CycleCharacteristics chars{draw[0], draw[1]};
        if (chars.valid() && chars.cycle_length >= kMinCycleLength &&
            chars.cycle_length <= kMaxSampledCycleLength &&
            chars.ovulation_day >= kOvulationMargin &&
            chars.ovulation_day <= chars.cycle_length - kOvulationMargin) {
            return chars;
        }
        if (++rejections >= kMaxRejections)
            throw data_error("sample_characteristics: 10000 rejected draws; "
                             "degenerate population parameters");
    }
}

IndividualSeries generate_series(const CycleCharacteristics& chars, const WaveformParams& wave,
                                 Rng& rng, std::string id) {
    const double len = chars.cycle_length;
    const double ovulation_phase = chars.ovulation_day / len;

    // Per-individual lognormal jitter, constant across cycles. Draw order is
    // fixed: per hormone the baseline factor, then per bump (amplitude,
    // width). jitter == 0 consumes no randomness at all.
    struct BumpFactors {
        double amplitude = 1.0;
        double width = 1.0;
    };
    std::array<double, kNumHormones> baseline_factor;
    baseline_factor.fill(1.0);
    std::array<std::vector<BumpFactors>, kNumHormones> bump_factors;
    for (int h = 0; h < kNumHormones; ++h) {
        bump_factors[h].resize(wave.shapes[h].bumps.size());
        if (wave.jitter > 0.0) {
            baseline_factor[h] = std::exp(wave.jitter * rng.normal());
            for (auto& f : bump_factors[h]) {
                f.amplitude = std::exp(wave.jitter * rng.normal());
                f.width = std::exp(wave.jitter * rng.normal());
            }
        }
    }

    IndividualSeries series;
    series.id = std::move(id);
    series.characteristics = chars;
    series.values.resize(kNumHormones, kSeriesDays);

    // Cycles -1 .. n+1 so edge days see the same bump pattern as interior
    // ones; the continuous signal is then exactly cycle-periodic.
    const int last_cycle = static_cast<int>(std::ceil(kSeriesDays / len)) + 1;
    for (int h = 0; h < kNumHormones; ++h) {
        const auto& shape = wave.shapes[h];
        for (int t = 1; t <= kSeriesDays; ++t) {
            double value = shape.baseline * baseline_factor[h];
            for (std::size_t b = 0; b < shape.bumps.size(); ++b) {
                const auto& bump = shape.bumps[b];
                const double amp = bump.amplitude * bump_factors[h][b].amplitude;
                const double sigma_days = bump.width * bump_factors[h][b].width * len;
                const double u = anchor_phase(bump, ovulation_phase);
                for (int c = -1; c <= last_cycle; ++c) {
                    const double center = (c + u) * len;
                    const double dist = (t - center) / sigma_days;
                    value += amp * std::exp(-0.5 * dist * dist);
                }
            }
            series.values(h, t - 1) = value;
        }
    }

    // Record the LH argmax of each complete cycle; sharp surge centers make
    // this the rounded ovulation day in practice.
    const int lh = static_cast<int>(Hormone::LH);
    for (int c = 0;; ++c) {
        const DayRange span = series.cycle_span(c);
        if (span.last > kSeriesDays) break;
        int best_day = span.first;
        double best = series.values(lh, span.first - 1);
        for (int t = span.first + 1; t <= span.last; ++t) {
            if (series.values(lh, t - 1) > best) {
                best = series.values(lh, t - 1);
                best_day = t;
            }
        }
        series.ovulation_day_per_cycle.push_back(best_day);
    }
    return series;
}

std::vector<IndividualSeries> generate_cohort(int n, const PopulationGaussian& pop,
                                              const WaveformParams& wave, std::uint64_t seed) {
    if (n < 1) throw data_error("generate_cohort: n must be >= 1");
    std::vector<IndividualSeries> cohort;
    cohort.reserve(n);
    for (int k = 0; k < n; ++k) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(k)));
        const CycleCharacteristics chars = sample_characteristics(pop, rng);
        char id[16];
        std::snprintf(id, sizeof(id), "I%03d", k);
        cohort.push_back(generate_series(chars, wave, rng, id));
    }
    return cohort;
}

std::vector<int> lh_peak_days(const IndividualSeries& series, const DayRange& within) {
    if (within.first < 1 || within.last > kSeriesDays || within.first > within.last)
        throw data_error("lh_peak_days: range outside [1, T]");
    std::vector<int> peaks;
    for (int c = 0; c < series.num_complete_cycles(); ++c) {
        const DayRange span = series.cycle_span(c);
        if (span.first >= within.first && span.last <= within.last)
            peaks.push_back(series.ovulation_day_per_cycle[c]);
    }
    return peaks;
}

void write_dataset_csv(const std::string& path, const std::vector<IndividualSeries>& cohort) {
    std::string out = "individual_id,day,E,P,Ih,FSH,LH\n";
    for (const auto& ind : cohort) {
        for (int t = 1; t <= kSeriesDays; ++t) {
            out += ind.id + ',' + std::to_string(t);
            for (int h = 0; h < kNumHormones; ++h)
                out += ',' + io_util::format_double(ind.values(h, t - 1));
            out += '\n';
        }
    }
    io_util::write_text_file(path, out);
}

namespace {

json waveform_to_json(const WaveformParams& wave) {
    json shapes = json::array();
    for (int h = 0; h < kNumHormones; ++h) {
        json bumps = json::array();
        for (const auto& bump : wave.shapes[h].bumps) {
            bumps.push_back({{"anchor", anchor_name(bump.anchor)},
                             {"phase_offset", bump.phase_offset},
                             {"width", bump.width},
                             {"amplitude", bump.amplitude}});
        }
        shapes.push_back({{"hormone", kHormoneNames[h]},
                          {"baseline", wave.shapes[h].baseline},
                          {"bumps", bumps}});
    }
    return {{"jitter", wave.jitter}, {"shapes", shapes}};
}

WaveformParams waveform_from_json(const json& j) {
    WaveformParams wave;
    wave.jitter = j.at("jitter").get<double>();
    for (const auto& shape : j.at("shapes")) {
        const int h = hormone_index(shape.at("hormone").get<std::string>());
        wave.shapes[h].baseline = shape.at("baseline").get<double>();
        wave.shapes[h].bumps.clear();
        for (const auto& bump : shape.at("bumps")) {
            wave.shapes[h].bumps.push_back({anchor_from_name(bump.at("anchor").get<std::string>()),
                                            bump.at("phase_offset").get<double>(),
                                            bump.at("width").get<double>(),
                                            bump.at("amplitude").get<double>()});
        }
    }
    return wave;
}

}  // namespace

void write_dataset_metadata(const std::string& path, const std::vector<IndividualSeries>& cohort,
                            std::uint64_t seed, const WaveformParams& wave) {
    json individuals = json::array();
    for (const auto& ind : cohort) {
        individuals.push_back({{"id", ind.id},
                               {"ovulation_day", ind.characteristics.ovulation_day},
                               {"cycle_length", ind.characteristics.cycle_length},
                               {"ovulation_day_per_cycle", ind.ovulation_day_per_cycle}});
    }
    json j = {{"seed", seed},
              {"num_days", kSeriesDays},
              {"waveform", waveform_to_json(wave)},
              {"individuals", individuals}};
    io_util::write_text_file(path, j.dump(2) + "\n");
}

std::vector<IndividualSeries> read_dataset(const std::string& csv_path,
                                           const std::string& metadata_path) {
    const json meta = json::parse(io_util::read_text_file(metadata_path));

    std::vector<IndividualSeries> cohort;
    std::map<std::string, int> index_of;
    for (const auto& ind : meta.at("individuals")) {
        IndividualSeries series;
        series.id = ind.at("id").get<std::string>();
        series.characteristics.ovulation_day = ind.at("ovulation_day").get<double>();
        series.characteristics.cycle_length = ind.at("cycle_length").get<double>();
        series.ovulation_day_per_cycle = ind.at("ovulation_day_per_cycle").get<std::vector<int>>();
        series.values = Eigen::MatrixXd::Zero(kNumHormones, kSeriesDays);
        index_of[series.id] = static_cast<int>(cohort.size());
        cohort.push_back(std::move(series));
    }

    std::istringstream in(io_util::read_text_file(csv_path));
    std::string line;
    if (!std::getline(in, line) || line != "individual_id,day,E,P,Ih,FSH,LH")
        throw data_error("dataset CSV: bad header in " + csv_path);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto fields = io_util::split_csv_line(line);
        if (fields.size() != 2 + kNumHormones) throw data_error("dataset CSV: malformed row");
        const auto it = index_of.find(fields[0]);
        if (it == index_of.end()) throw data_error("dataset CSV: unknown individual " + fields[0]);
        const int day = std::stoi(fields[1]);
        if (day < 1 || day > kSeriesDays) throw data_error("dataset CSV: day out of range");
        for (int h = 0; h < kNumHormones; ++h)
            cohort[it->second].values(h, day - 1) = std::stod(fields[2 + h]);
    }
    return cohort;
}

}  // namespace cyclefit::datagen
