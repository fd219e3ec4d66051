#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace ntok {

// splitmix64 step; used for seed derivation and as a stable string hash mixer.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t seed_combine(uint64_t a, uint64_t b) {
    return splitmix64(splitmix64(a) ^ (0x9e3779b97f4a7c15ull + b));
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distribution transforms are hand-rolled because std:: distributions are
// implementation-defined and would break cross-run reproducibility.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    int uniform_int(int n) {
        return static_cast<int>(static_cast<uint64_t>(n * uniform()));
    }

    // Box-Muller; second value discarded so each call consumes a fixed
    // number of engine draws.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // N(0, stddev) resampled until inside +/- clip.
    double truncated_normal(double stddev, double clip) {
        double v = stddev * normal();
        while (v < -clip || v > clip) v = stddev * normal();
        return v;
    }

private:
    std::mt19937_64 engine_;
};

} // namespace ntok
