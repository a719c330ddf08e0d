#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace cyclefit {

// Exit-code-relevant error categories (see tools/main.cpp).
struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct numerical_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double kPi = 3.14159265358979323846;

inline double normal_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
}

inline double normal_cdf(double x) {
    return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derives an independent sub-seed from (seed, index); used to give each
/// individual / restart / stream its own RNG stream.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    return splitmix64(seed ^ splitmix64(index));
}

/// Seedable random source. Gaussian draws use an explicit Box-Muller
/// transform so the byte stream is identical across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform on [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Uniform on (0, 1]; safe as a log() argument.
    double uniform_open() {
        return static_cast<double>((engine_() >> 11) + 1) * 0x1.0p-53;
    }

    double normal() {
        const double u1 = uniform_open();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(engine_() % span);
    }

    std::uint64_t next_u64() { return engine_(); }

  private:
    std::mt19937_64 engine_;
};

/// Runs fn(i) for i in [0, n). Each index must be an independent task that
/// writes only to its own output slot; results are then identical for any
/// job count, which keeps multi-job runs bit-reproducible.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::atomic<std::size_t> counter{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = counter.fetch_add(1);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

/// Inclusive 1-based day interval.
struct DayRange {
    int first = 1;
    int last = 1;

    int size() const { return last - first + 1; }
    bool contains(int day) const { return day >= first && day <= last; }
};

}  // namespace cyclefit
