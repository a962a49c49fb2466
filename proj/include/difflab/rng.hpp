#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>

#include "difflab/types.hpp"

namespace difflab {

// Deterministic stream mixer for deriving independent sub-seeds
// (per step, per example, per phase). splitmix64 finalizer.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL + (b << 1 | 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
    return mix_seed(mix_seed(a, b), c);
}

// mt19937_64 with hand-rolled draws so the sampled values depend only on the
// engine, not on library distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // uniform in [0, 1)
    Real uniform() {
        return Real(engine_() >> 11) * Real(1.0 / 9007199254740992.0); // 2^-53
    }

    Real uniform(Real lo, Real hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n) {
        if (n == 0) throw std::invalid_argument("uniform_index: empty range");
        // rejection sampling keeps the draw unbiased
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    bool bernoulli(Real p) { return uniform() < p; }

    Real gaussian(Real mean, Real stddev) {
        // Box-Muller, no cached spare so the stream stays position-independent
        Real u1 = uniform();
        Real u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        Real r = std::sqrt(Real(-2) * std::log(u1));
        return mean + stddev * r * std::cos(Real(6.283185307179586477) * u2);
    }

    // Inverse-CDF categorical draw over an (assumed normalized) row.
    size_t categorical(std::span<const Real> probs) {
        Real u = uniform();
        Real cum = 0;
        for (size_t i = 0; i < probs.size(); ++i) {
            cum += probs[i];
            if (u < cum) return i;
        }
        // guard against accumulated rounding at the tail
        for (size_t i = probs.size(); i-- > 0;) {
            if (probs[i] > 0) return i;
        }
        return probs.size() - 1;
    }

private:
    std::mt19937_64 engine_;
};

} // namespace difflab
