#pragma once

#include <cstdint>
#include <cmath>

namespace densefew {

// Deterministic splittable RNG built on SplitMix64. std:: distributions are
// not bit-stable across standard library implementations, so uniform and
// normal variates are generated here directly.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    // Derives an independent stream keyed by (this seed, stream id).
    Rng stream(std::uint64_t id) const {
        Rng child(mix(state_ ^ 0x9e3779b97f4a7c15ull) ^ mix(id + 0x6a09e667f3bcc909ull));
        return child;
    }

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller; the spare variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        spare_ = mag * std::sin(6.283185307179586 * u2);
        has_spare_ = true;
        return mag * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates shuffle of [0, n) indices stored in `idx`.
    template <typename Vec>
    void shuffle(Vec& idx) {
        for (std::size_t i = idx.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(idx[i - 1], idx[j]);
        }
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace densefew
