#pragma once

#include <cstdint>
#include <vector>

#include "difflab/types.hpp"

namespace difflab {

struct NoiseSpec {
    enum class Mode { kFixed, kUniformRange };

    Mode mode{Mode::kFixed};
    Real t_fixed{0.75};
    Real t_low{0.2};
    Real t_high{0.9};
    uint64_t rng_seed{0};

    void validate() const;
};

struct CorruptedSequence {
    TokenSequence tokens;
    std::vector<bool> corruption_mask; // per position, true = corrupted
    Real noise_level{0};

    size_t corrupted_count() const {
        size_t n = 0;
        for (bool b : corruption_mask) n += b ? 1 : 0;
        return n;
    }
};

Real sample_noise_level(const NoiseSpec& spec, uint64_t seed);

// Each response position independently becomes MASK with probability t.
// The prompt is never touched.
CorruptedSequence mask_corrupt(const TokenSequence& clean, const Vocabulary& vocab, Real t,
                               uint64_t seed);

// Each response position independently, with probability t, is replaced by a
// token drawn uniformly from the vocabulary minus MASK/PAD/EOS.
CorruptedSequence uniform_corrupt(const TokenSequence& clean, const Vocabulary& vocab, Real t,
                                  uint64_t seed);

} // namespace difflab
