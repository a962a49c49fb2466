#include "difflab/corruption.hpp"

#include <stdexcept>

#include "difflab/rng.hpp"

namespace difflab {

void NoiseSpec::validate() const {
    if (mode == Mode::kFixed) {
        if (t_fixed < 0 || t_fixed > 1) throw std::invalid_argument("noise spec: t_fixed outside [0,1]");
    } else {
        if (t_low < 0 || t_high > 1 || t_low > t_high) {
            throw std::invalid_argument("noise spec: need 0 <= t_low <= t_high <= 1");
        }
    }
}

Real sample_noise_level(const NoiseSpec& spec, uint64_t seed) {
    spec.validate();
    if (spec.mode == NoiseSpec::Mode::kFixed) return spec.t_fixed;
    Rng rng(mix_seed(spec.rng_seed, seed));
    return rng.uniform(spec.t_low, spec.t_high);
}

namespace {

void check_corruptible(const TokenSequence& clean, const Vocabulary& vocab, Real t) {
    if (t < 0 || t > 1) throw std::invalid_argument("corrupt: noise level outside [0,1]");
    if (clean.response_len() == 0) throw std::invalid_argument("corrupt: empty response region");
    for (TokenId tok : clean.tokens) {
        if (tok == vocab.mask_id) {
            throw std::invalid_argument("corrupt: clean sequence already contains MASK");
        }
    }
}

} // namespace

CorruptedSequence mask_corrupt(const TokenSequence& clean, const Vocabulary& vocab, Real t,
                               uint64_t seed) {
    check_corruptible(clean, vocab, t);
    Rng rng(seed);
    CorruptedSequence out;
    out.tokens = clean;
    out.corruption_mask.assign(clean.size(), false);
    out.noise_level = t;
    for (size_t i = clean.prompt_len; i < clean.size(); ++i) {
        if (rng.bernoulli(t)) {
            out.tokens.tokens[i] = vocab.mask_id;
            out.corruption_mask[i] = true;
        }
    }
    return out;
}

CorruptedSequence uniform_corrupt(const TokenSequence& clean, const Vocabulary& vocab, Real t,
                                  uint64_t seed) {
    check_corruptible(clean, vocab, t);

    // replacement pool: the vocabulary minus reserved control symbols
    std::vector<TokenId> pool;
    pool.reserve(vocab.size());
    for (size_t id = 0; id < vocab.size(); ++id) {
        const TokenId tid = static_cast<TokenId>(id);
        if (tid == vocab.mask_id || tid == vocab.pad_id || tid == vocab.eos_id) continue;
        pool.push_back(tid);
    }
    if (pool.empty()) throw std::invalid_argument("uniform_corrupt: no usable replacement symbols");

    Rng rng(seed);
    CorruptedSequence out;
    out.tokens = clean;
    out.corruption_mask.assign(clean.size(), false);
    out.noise_level = t;
    for (size_t i = clean.prompt_len; i < clean.size(); ++i) {
        if (rng.bernoulli(t)) {
            out.tokens.tokens[i] = pool[rng.uniform_index(pool.size())];
            // a draw may coincide with the original token; such a position is
            // not corrupted
            out.corruption_mask[i] = out.tokens.tokens[i] != clean.tokens[i];
        }
    }
    return out;
}

} // namespace difflab
