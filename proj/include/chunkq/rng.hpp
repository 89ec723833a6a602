#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace chunkq {

// Deterministic RNG utilities. All sampling in the project goes through
// Rng so that results are bit-reproducible for a given root seed, across
// platforms and regardless of thread scheduling: parallel loops derive one
// independent stream per work item instead of sharing a generator.

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Hash-combine a seed with stream tags (step index, item index, purpose id).
inline uint64_t derive_seed(uint64_t seed, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = splitmix64(seed ^ 0x243f6a8885a308d3ULL);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    s = splitmix64(s ^ c);
    return s;
}

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    static Rng stream(uint64_t seed, uint64_t a = 0, uint64_t b = 0, uint64_t c = 0) {
        return Rng(derive_seed(seed, a, b, c));
    }

    uint64_t bits() { return gen_(); }

    // Uniform in [0,1). 53-bit mantissa, identical on every platform since
    // mt19937_64 output is fully specified by the standard.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n).
    uint64_t integer(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller (no cached state, so results do not
    // depend on call parity).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

private:
    std::mt19937_64 gen_;
};

}  // namespace chunkq
