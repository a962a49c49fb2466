#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "difflab/types.hpp"

namespace difflab {

struct ModelConfig {
    size_t vocab_size{32};
    size_t embed_dim{64};
    size_t num_layers{3};
    size_t num_heads{4};
    size_t max_seq_len{128};
    size_t block_size{32};
    uint64_t rng_seed{0};

    void validate() const;
};

// Attention scopes for semi-autoregressive block diffusion. Prompt positions
// see the prompt; positions in generation block k see the prompt, all earlier
// blocks, and their own block bidirectionally. Scopes are contiguous from
// position 0, so one end index per position captures the whole mask.
struct AttentionPlan {
    size_t prompt_len{0};
    size_t block_size{0};
    std::vector<size_t> scope_end; // position i attends j iff j < scope_end[i]

    size_t total_len() const { return scope_end.size(); }
    bool allowed(size_t i, size_t j) const { return j < scope_end[i]; }
};

// num_blocks full blocks of block_size. final_block_len trims the last block
// (0 keeps it full) for response budgets that are not a block multiple.
AttentionPlan build_attention_plan(size_t prompt_len, size_t num_blocks, size_t block_size,
                                   size_t final_block_len = 0);

struct ModelOutput {
    Matrix logits; // T x V
    Matrix probs;  // row-wise softmax of logits
};

// Model parameters as named tensors. Layout is fixed; enumeration order is
// the checkpoint serialization order.
struct Parameters {
    struct Layer {
        std::vector<Real> ln1_g, ln1_b;
        std::vector<Real> qkv_w, qkv_b;   // D x 3D, 3D
        std::vector<Real> proj_w, proj_b; // D x D, D
        std::vector<Real> ln2_g, ln2_b;
        std::vector<Real> fc_w, fc_b;     // D x F, F
        std::vector<Real> fc2_w, fc2_b;   // F x D, D
    };

    std::vector<Real> tok_emb; // V x D (input table; output head is untied)
    std::vector<Real> pos_emb; // S x D
    std::vector<Layer> layers;
    std::vector<Real> lnf_g, lnf_b;
    std::vector<Real> out_w, out_b; // D x V, V

    void for_each_tensor(const std::function<void(const std::string&, std::vector<Real>&)>& fn);
    void for_each_tensor(const std::function<void(const std::string&, const std::vector<Real>&)>& fn) const;

    size_t total_elements() const;
};

// Per-sequence activations kept for the backward pass.
struct ForwardCache {
    Matrix input;                // T x D raw inputs (before position add)
    std::vector<Matrix> xs;      // layer inputs; xs[0] includes positions, xs[L] feeds final LN
    struct LayerCache {
        Matrix ln1_out;
        std::vector<Real> ln1_mean, ln1_rstd;
        Matrix qkv;              // T x 3D
        std::vector<Matrix> att; // per head, T x T post-softmax weights
        Matrix att_concat;       // T x D before output projection
        Matrix res1;             // T x D after attention residual
        Matrix ln2_out;
        std::vector<Real> ln2_mean, ln2_rstd;
        Matrix fc_pre;           // T x F before activation
        Matrix fc_act;           // T x F after activation
    };
    std::vector<LayerCache> layers;
    Matrix lnf_out;
    std::vector<Real> lnf_mean, lnf_rstd;
    ModelOutput output;
    AttentionPlan plan;
};

/// Bidirectional transformer over raw embedding vectors with block-diffusion
/// attention. Forward passes are pure functions of (parameters, inputs);
/// sessions holding const references may run concurrently.
class Model {
public:
    explicit Model(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    Parameters& params() { return params_; }
    const Parameters& params() const { return params_; }

    EmbeddingTable embedding_table(TokenId mask_id) const {
        return EmbeddingTable(params_.tok_emb.data(), cfg_.vocab_size, cfg_.embed_dim, mask_id);
    }

    // Token lookup; MASK positions reproduce the mask row bitwise.
    Matrix embed_tokens(std::span<const TokenId> seq) const;

    // inputs: T x D arbitrary real vectors (token rows, mask rows, or decode-time
    // hybrids). Rejects non-finite entries and sequences past max_seq_len.
    ModelOutput forward(const Matrix& inputs, const AttentionPlan& plan) const;
    ModelOutput forward(const Matrix& inputs, const AttentionPlan& plan, ForwardCache& cache) const;

    // Accumulates parameter gradients from d(loss)/d(logits); returns the
    // gradient w.r.t. the raw input rows (for embedding-table scatter).
    Matrix backward(const ForwardCache& cache, const Matrix& dlogits, Parameters& grads) const;

    // Zero-valued gradient/optimizer-state buffers shaped like the parameters.
    Parameters make_zero_like() const;

private:
    void init_parameters();

    ModelConfig cfg_;
    Parameters params_;
};

// Checkpoint container: header (config, untied flag, seed, scalar width,
// format version) followed by named tensors with explicit shapes,
// little-endian. Loading reproduces identical forward outputs.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

} // namespace difflab
