#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace difftraj {

/// SplitMix64 counter RNG. Fixed output sequence on every platform, which is
/// what the determinism contracts (datasets, sampling, training) lean on;
/// std::distributions are implementation-defined and unusable here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(uniform() * static_cast<double>(n));
    }

    /// Uniform integer in [lo, hi] inclusive.
    int uniform_int_range(int lo, int hi) {
        return lo + static_cast<int>(uniform_int(static_cast<std::int64_t>(hi) - lo + 1));
    }

    /// Standard normal via Box-Muller (no cached spare; keeps state trivially copyable).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    template <class It>
    void shuffle(It first, It last) {
        auto n = last - first;
        for (auto i = n - 1; i > 0; --i) {
            auto j = uniform_int(i + 1);
            std::swap(first[i], first[j]);
        }
    }

private:
    std::uint64_t state_;
};

/// Stable seed derivation for parallel-safe substreams: fold extra stream ids
/// into the seed through one SplitMix64 round each.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) {
    Rng r(seed);
    std::uint64_t s = r.next_u64();
    for (std::uint64_t id : ids) {
        Rng ri(s ^ (id + 0x9E3779B97F4A7C15ULL));
        s = ri.next_u64();
    }
    return s;
}

}  // namespace difftraj
