#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace patchflow {

// Deterministic RNG. All distributions are derived from raw mt19937_64 output
// by explicit formulas, so streams do not depend on the standard library's
// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    // Mixes a seed with a stream id (e.g. step number) into a fresh engine.
    static Rng for_stream(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t x = seed ^ (0x9e3779b97f4a7c15ull + stream);
        x ^= x >> 30; x *= 0xbf58476d1ce4e5b9ull;
        x ^= x >> 27; x *= 0x94d049bb133111ebull;
        x ^= x >> 31;
        return Rng(x);
    }

    std::uint64_t raw() { return eng_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        // rejection sampling to avoid modulo bias
        std::uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = eng_(); } while (x >= lim);
        return x % n;
    }

    // standard normal via Box-Muller; caches the second draw
    double normal() {
        if (has_spare_) { has_spare_ = false; return spare_; }
        double u1, u2;
        do { u1 = uniform(); } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    float normalf() { return static_cast<float>(normal()); }
    float uniformf() { return static_cast<float>(uniform()); }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace patchflow
