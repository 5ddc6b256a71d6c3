#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace alden {

std::uint64_t splitmix64(std::uint64_t x);

/// Mix a base seed with a stream salt so independent consumers
/// (per-slice noise, per-step sampling, ...) never share a stream.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t salt);

/// Explicitly seeded RNG. Every random operation in the project goes
/// through an instance of this; there is no global generator.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() {
        // 53-bit mantissa fill; stable across platforms unlike
        // std::uniform_real_distribution.
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
    std::uint64_t uniform_index(std::uint64_t n);

    /// Standard normal via Box-Muller (stateless: the spare value is discarded).
    double normal();
    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    long long poisson(double mean) {
        std::poisson_distribution<long long> dist(mean);
        return dist(engine_);
    }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct values from [0, n), order random. O(n) scratch.
    std::vector<int> sample_without_replacement(int n, int k);

    Rng child(std::uint64_t salt) const;

    std::string serialize_state() const;
    void restore_state(const std::string& text);

private:
    std::mt19937_64 engine_;
};

} // namespace alden
