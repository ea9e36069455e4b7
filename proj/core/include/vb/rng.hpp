#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace vb {

// Deterministic seed derivation. Every random stream in the project is
// derived from one master seed through mix() with a stage tag, so that
// work items (cases, slices, folds, epochs) own independent streams and
// parallel execution cannot change results.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix(uint64_t seed, uint64_t tag) {
    return splitmix64(seed ^ splitmix64(tag));
}

inline uint64_t mix(uint64_t seed, std::string_view tag) {
    // FNV-1a over the tag bytes, then diffuse.
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return mix(seed, h);
}

inline uint64_t mix(uint64_t seed, std::string_view tag, uint64_t n) {
    return mix(mix(seed, tag), n);
}

// Random stream with explicit, platform-independent distributions.
// std::mt19937_64 output is fully specified by the standard; the standard
// library *distributions* are not, so uniform/normal are implemented here.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(gen_() % span);
    }

    // Standard normal via Box-Muller (no cached spare: two u64 per draw,
    // so the stream position is easy to reason about).
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 gen_;
};

} // namespace vb
