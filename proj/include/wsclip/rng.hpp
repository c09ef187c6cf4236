#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace wsclip {

// Deterministic random source. The engine is std::mt19937_64 (Mersenne
// Twister, 19937-bit state), whose output sequence is fixed by the C++
// standard. Standard-library *distributions* are not portable across
// implementations, so all mappings from raw 64-bit draws to values are
// defined here:
//   uniform double in [0,1): (x >> 11) * 2^-53
//   bounded integer in [0,n): multiply-shift  (x * n) >> 64, via 128-bit mul
//   normal(0,1): Box-Muller on two uniform draws
class Rng {
   public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), n > 0
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) {
        return mean + stddev * normal();
    }

    // Child stream with an independent seed. Advances the parent once.
    Rng fork(std::uint64_t stream) { return Rng(mix(engine_(), stream)); }

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        // splitmix64 finalizer over a combined word
        std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

   private:
    std::mt19937_64 engine_;
};

}  // namespace wsclip
