#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace catair {

// splitmix64, used to derive independent substream seeds from (seed, id) pairs.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream));
}

// Deterministic random stream. Distribution transforms are written out by hand
// (instead of std::*_distribution) so sequences are identical across standard
// library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(seed) {}

    // Independent substream; deterministic function of (construction seed, id).
    Rng stream(std::uint64_t id) const { return Rng(derive_seed(seed_, id)); }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    int uniform_int(int n) {  // [0, n)
        return static_cast<int>(gen_() % static_cast<std::uint64_t>(n));
    }

    // Standard normal via Box-Muller. One spare value is cached.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        have_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    // Standard Gumbel(0, 1) noise, -log(-log(U)) with U in (0, 1).
    double gumbel() {
        double u = uniform();
        while (u <= 0.0) u = uniform();
        return -std::log(-std::log(u));
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace catair
