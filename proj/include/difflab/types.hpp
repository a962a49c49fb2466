#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace difflab {

// Declared scalar width for all training and decoding math. Double keeps
// finite-difference gradient checks well conditioned at desk scale.
using Real = double;

using TokenId = int32_t;

// Ordered symbol list with the reserved control symbols pinned by id.
struct Vocabulary {
    std::vector<std::string> tokens;
    TokenId mask_id{0};
    TokenId eos_id{0};
    TokenId pad_id{0};

    size_t size() const { return tokens.size(); }

    void validate() const {
        if (tokens.size() < 8) {
            throw std::invalid_argument("vocabulary must hold at least 8 symbols");
        }
        auto in_range = [&](TokenId id) { return id >= 0 && static_cast<size_t>(id) < tokens.size(); };
        if (!in_range(mask_id) || !in_range(eos_id) || !in_range(pad_id)) {
            throw std::invalid_argument("reserved symbol id out of range");
        }
        if (mask_id == eos_id || mask_id == pad_id || eos_id == pad_id) {
            throw std::invalid_argument("mask/eos/pad ids must be distinct");
        }
    }
};

// Prompt + response token sequence. tokens[0, prompt_len) is the prompt,
// the rest is the response region.
struct TokenSequence {
    std::vector<TokenId> tokens;
    size_t prompt_len{0};

    size_t size() const { return tokens.size(); }
    size_t response_len() const { return tokens.size() - prompt_len; }

    std::span<const TokenId> prompt() const {
        return {tokens.data(), prompt_len};
    }
    std::span<const TokenId> response() const {
        return {tokens.data() + prompt_len, tokens.size() - prompt_len};
    }
};

// Dense row-major matrix of Real. Deliberately minimal; all model math is
// explicit loops over this storage.
struct Matrix {
    size_t rows{0};
    size_t cols{0};
    std::vector<Real> data;

    Matrix() = default;
    Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, Real(0)) {}

    Real* row(size_t i) { return data.data() + i * cols; }
    const Real* row(size_t i) const { return data.data() + i * cols; }

    Real& at(size_t i, size_t j) { return data[i * cols + j]; }
    Real at(size_t i, size_t j) const { return data[i * cols + j]; }

    void zero() { data.assign(data.size(), Real(0)); }
};

// Read-only view over the input embedding parameters. The mask vector is an
// alias of the mask_id row, never a copy.
class EmbeddingTable {
public:
    EmbeddingTable() = default;
    EmbeddingTable(const Real* data, size_t vocab_size, size_t dim, TokenId mask_id)
        : data_(data), vocab_size_(vocab_size), dim_(dim), mask_id_(mask_id) {}

    std::span<const Real> row(TokenId id) const {
        if (id < 0 || static_cast<size_t>(id) >= vocab_size_) {
            throw std::invalid_argument("embedding lookup: token id out of range");
        }
        return {data_ + static_cast<size_t>(id) * dim_, dim_};
    }
    std::span<const Real> mask_vector() const { return row(mask_id_); }

    size_t vocab_size() const { return vocab_size_; }
    size_t dim() const { return dim_; }
    TokenId mask_id() const { return mask_id_; }

private:
    const Real* data_{nullptr};
    size_t vocab_size_{0};
    size_t dim_{0};
    TokenId mask_id_{0};
};

// Thrown for file and serialization failures; maps to a dedicated C status.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace difflab
