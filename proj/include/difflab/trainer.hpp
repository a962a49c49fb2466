#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "difflab/corruption.hpp"
#include "difflab/model.hpp"
#include "difflab/types.hpp"

namespace difflab {

enum class Objective { kMdlm, kUdlm, kOnPolicy };
enum class RolloutSampling { kCategorical, kGreedy };
enum class LrSchedule { kCosine, kConstant };

struct TrainConfig {
    Objective objective{Objective::kOnPolicy};
    size_t epochs{2};
    size_t batch_size{8};
    Real learning_rate{3e-4}; // desk-scale default; 2e-6 is the large-model fine-tune preset
    LrSchedule lr_schedule{LrSchedule::kCosine};
    bool separate_iterations{true};
    RolloutSampling rollout_sampling{RolloutSampling::kCategorical};
    uint64_t rng_seed{0};

    // fixed optimizer constants, echoed into run reports
    Real adam_beta1{0.9};
    Real adam_beta2{0.99};
    Real adam_eps{1e-8};

    void validate() const;
};

struct LossReport {
    Real loss_mask{0};
    Real loss_pred{0};
    Real loss_total{0};
    struct Term {
        size_t position;
        char branch; // 'm' = mask input, 'p' = predicted input
        Real value;  // negative log-likelihood
    };
    std::vector<Term> per_position;
};

// Eq.-style per-sequence losses, computed from a model output. These are the
// reference implementations the training loop is cross-checked against.

// Masked-denoising loss: (1/t) * sum over masked response positions of
// -log p(x0_i). Unmasked positions contribute zero.
LossReport mdlm_loss(const TokenSequence& clean, const CorruptedSequence& corrupted,
                     const ModelOutput& output, const Vocabulary& vocab);

// Uniform-denoising loss: sum over all response positions of -log p(x0_i),
// with no noise-level weighting.
LossReport udlm_loss(const TokenSequence& clean, const CorruptedSequence& corrupted,
                     const ModelOutput& output);

// All-response-position cross entropy for one branch of the on-policy pair.
LossReport all_position_loss(const TokenSequence& clean, const ModelOutput& output,
                             size_t prompt_len, char branch);

// Builds the predicted noisy sequence: non-masked positions copied verbatim,
// masked positions filled by a (seeded) draw from the model's distribution or
// its argmax. The draw is never differentiated through.
CorruptedSequence rollout_predicted_sequence(const CorruptedSequence& masked,
                                             const ModelOutput& output, const Vocabulary& vocab,
                                             RolloutSampling sampling, uint64_t seed);

struct TrainLogRecord {
    size_t step;
    std::string phase; // mask | pred | joint
    Real loss;
    Real t;
    Real lr;
    uint64_t seed;
};

struct TrainSummary {
    size_t steps{0};
    size_t skipped_too_long{0};
    Real final_loss{0};
    std::vector<TrainLogRecord> log;
};

class AdamOptimizer {
public:
    AdamOptimizer(const Model& model, Real beta1, Real beta2, Real eps);
    void step(Model& model, const Parameters& grads, Real lr);
    size_t updates() const { return t_; }

private:
    Parameters m_, v_;
    Real beta1_, beta2_, eps_;
    size_t t_{0};
};

/// Single-writer training loop over the three objectives. Per-example
/// corruption and rollout seeds derive from (cfg seed, epoch, step, index),
/// so identical configs replay bitwise.
class Trainer {
public:
    Trainer(Model& model, const Vocabulary& vocab, TrainConfig cfg, NoiseSpec noise);

    // One on-policy update cycle on a single example: corrupt, dual forward
    // passes, dual all-position losses, one or two optimizer updates.
    LossReport oput_step(const TokenSequence& clean);

    TrainSummary train(const std::vector<TokenSequence>& dataset,
                       const std::string& log_path = "");

private:
    struct PhaseResult {
        Real loss_sum{0};
        Real t_sum{0};
        size_t examples{0};
    };

    Real mask_branch_example(const TokenSequence& clean, Real t, uint64_t seed, Parameters& grads,
                             LossReport* report);
    Real pred_branch_example(const TokenSequence& clean, Real t, uint64_t seed, Parameters& grads,
                             LossReport* report);
    Real mdlm_example(const TokenSequence& clean, Real t, uint64_t seed, Parameters& grads);
    Real udlm_example(const TokenSequence& clean, Real t, uint64_t seed, Parameters& grads);

    void scatter_token_grads(std::span<const TokenId> seq, const Matrix& dinput,
                             Parameters& grads) const;
    Real current_lr() const;
    void apply_update(Parameters& grads, size_t batch_examples);

    Model& model_;
    const Vocabulary& vocab_;
    TrainConfig cfg_;
    NoiseSpec noise_;
    AdamOptimizer opt_;
    size_t planned_updates_{1};
};

// Loss gradient helper shared with tests: dlogits = probs - onehot(target),
// scaled, at the given positions.
Matrix cross_entropy_dlogits(const ModelOutput& output, std::span<const TokenId> targets,
                             const std::vector<size_t>& positions, Real scale);

} // namespace difflab
