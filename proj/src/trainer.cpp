#include "difflab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "difflab/rng.hpp"

namespace difflab {

namespace {

Real row_nll(const Matrix& logits, size_t pos, TokenId target) {
    const Real* l = logits.row(pos);
    Real maxl = l[0];
    for (size_t k = 1; k < logits.cols; ++k) maxl = std::max(maxl, l[k]);
    Real sum = 0;
    for (size_t k = 0; k < logits.cols; ++k) sum += std::exp(l[k] - maxl);
    return maxl + std::log(sum) - l[static_cast<size_t>(target)];
}

void check_shapes(const TokenSequence& clean, const ModelOutput& output) {
    if (output.logits.rows != clean.size() || output.probs.rows != clean.size()) {
        throw std::invalid_argument("loss: model output length mismatch");
    }
}

std::vector<size_t> response_positions(const TokenSequence& seq) {
    std::vector<size_t> out;
    out.reserve(seq.response_len());
    for (size_t i = seq.prompt_len; i < seq.size(); ++i) out.push_back(i);
    return out;
}

} // namespace

void TrainConfig::validate() const {
    if (learning_rate <= 0) throw std::invalid_argument("train config: learning_rate must be > 0");
    if (epochs < 1) throw std::invalid_argument("train config: epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
}

LossReport mdlm_loss(const TokenSequence& clean, const CorruptedSequence& corrupted,
                     const ModelOutput& output, const Vocabulary& vocab) {
    check_shapes(clean, output);
    const Real t = corrupted.noise_level;

    std::vector<size_t> masked;
    for (size_t i = clean.prompt_len; i < clean.size(); ++i) {
        if (corrupted.tokens.tokens[i] == vocab.mask_id) masked.push_back(i);
    }
    if (t <= 0 && !masked.empty()) {
        throw std::invalid_argument("mdlm_loss: masked positions present at noise level 0");
    }

    LossReport report;
    const Real weight = masked.empty() ? Real(0) : Real(1) / t;
    for (size_t i : masked) {
        const Real term = weight * row_nll(output.logits, i, clean.tokens[i]);
        report.loss_mask += term;
        report.per_position.push_back({i, 'm', term});
    }
    report.loss_total = report.loss_mask;
    return report;
}

LossReport udlm_loss(const TokenSequence& clean, const CorruptedSequence& corrupted,
                     const ModelOutput& output) {
    (void)corrupted; // Eq.-level loss has no dependence on the noise level
    return all_position_loss(clean, output, clean.prompt_len, 'm');
}

LossReport all_position_loss(const TokenSequence& clean, const ModelOutput& output,
                             size_t prompt_len, char branch) {
    check_shapes(clean, output);
    LossReport report;
    for (size_t i = prompt_len; i < clean.size(); ++i) {
        const Real term = row_nll(output.logits, i, clean.tokens[i]);
        if (branch == 'p') {
            report.loss_pred += term;
        } else {
            report.loss_mask += term;
        }
        report.per_position.push_back({i, branch, term});
    }
    report.loss_total = report.loss_mask + report.loss_pred;
    return report;
}

CorruptedSequence rollout_predicted_sequence(const CorruptedSequence& masked,
                                             const ModelOutput& output, const Vocabulary& vocab,
                                             RolloutSampling sampling, uint64_t seed) {
    if (output.probs.rows != masked.tokens.size()) {
        throw std::invalid_argument("rollout: model output length mismatch");
    }

    CorruptedSequence predicted = masked;
    Rng rng(seed);
    for (size_t i = 0; i < masked.tokens.size(); ++i) {
        if (masked.tokens.tokens[i] != vocab.mask_id) continue; // copied verbatim
        const Real* p = output.probs.row(i);
        const size_t v = output.probs.cols;
        Real sum = 0;
        for (size_t k = 0; k < v; ++k) sum += p[k];
        if (std::abs(sum - Real(1)) > 1e-5) {
            throw std::invalid_argument("rollout: output row is not a normalized distribution");
        }
        size_t pick;
        if (sampling == RolloutSampling::kGreedy) {
            pick = 0;
            for (size_t k = 1; k < v; ++k) {
                if (p[k] > p[pick]) pick = k;
            }
        } else {
            pick = rng.categorical({p, v});
        }
        predicted.tokens.tokens[i] = static_cast<TokenId>(pick);
    }
    return predicted;
}

Matrix cross_entropy_dlogits(const ModelOutput& output, std::span<const TokenId> targets,
                             const std::vector<size_t>& positions, Real scale) {
    Matrix d(output.probs.rows, output.probs.cols);
    for (size_t i : positions) {
        const Real* p = output.probs.row(i);
        Real* di = d.row(i);
        for (size_t k = 0; k < output.probs.cols; ++k) di[k] = scale * p[k];
        di[static_cast<size_t>(targets[i])] -= scale;
    }
    return d;
}

AdamOptimizer::AdamOptimizer(const Model& model, Real beta1, Real beta2, Real eps)
    : m_(model.make_zero_like()), v_(model.make_zero_like()), beta1_(beta1), beta2_(beta2),
      eps_(eps) {}

void AdamOptimizer::step(Model& model, const Parameters& grads, Real lr) {
    ++t_;
    const Real bc1 = Real(1) - std::pow(beta1_, Real(t_));
    const Real bc2 = Real(1) - std::pow(beta2_, Real(t_));

    std::vector<std::vector<Real>*> ps, ms, vs;
    std::vector<const std::vector<Real>*> gs;
    model.params().for_each_tensor(
        [&](const std::string&, std::vector<Real>& t) { ps.push_back(&t); });
    const_cast<Parameters&>(grads).for_each_tensor(
        [&](const std::string&, std::vector<Real>& t) { gs.push_back(&t); });
    m_.for_each_tensor([&](const std::string&, std::vector<Real>& t) { ms.push_back(&t); });
    v_.for_each_tensor([&](const std::string&, std::vector<Real>& t) { vs.push_back(&t); });

    for (size_t ti = 0; ti < ps.size(); ++ti) {
        std::vector<Real>& p = *ps[ti];
        const std::vector<Real>& g = *gs[ti];
        std::vector<Real>& m = *ms[ti];
        std::vector<Real>& v = *vs[ti];
        for (size_t k = 0; k < p.size(); ++k) {
            m[k] = beta1_ * m[k] + (Real(1) - beta1_) * g[k];
            v[k] = beta2_ * v[k] + (Real(1) - beta2_) * g[k] * g[k];
            const Real mhat = m[k] / bc1;
            const Real vhat = v[k] / bc2;
            p[k] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

Trainer::Trainer(Model& model, const Vocabulary& vocab, TrainConfig cfg, NoiseSpec noise)
    : model_(model), vocab_(vocab), cfg_(cfg), noise_(noise),
      opt_(model, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) {
    cfg_.validate();
    noise_.validate();
    if (vocab_.size() != model_.config().vocab_size) {
        throw std::invalid_argument("trainer: vocabulary size does not match model");
    }
}

namespace {

AttentionPlan plan_for_sequence(const TokenSequence& seq, size_t block_size) {
    const size_t resp = seq.response_len();
    const size_t num_blocks = (resp + block_size - 1) / block_size;
    const size_t final_len = resp - (num_blocks - 1) * block_size;
    return build_attention_plan(seq.prompt_len, num_blocks, block_size, final_len);
}

} // namespace

void Trainer::scatter_token_grads(std::span<const TokenId> seq, const Matrix& dinput,
                                  Parameters& grads) const {
    const size_t d = model_.config().embed_dim;
    for (size_t i = 0; i < seq.size(); ++i) {
        Real* row = grads.tok_emb.data() + static_cast<size_t>(seq[i]) * d;
        const Real* di = dinput.row(i);
        for (size_t k = 0; k < d; ++k) row[k] += di[k];
    }
}

Real Trainer::mask_branch_example(const TokenSequence& clean, Real t, uint64_t seed,
                                  Parameters& grads, LossReport* report) {
    const CorruptedSequence x_m = mask_corrupt(clean, vocab_, t, seed);
    const AttentionPlan plan = plan_for_sequence(clean, model_.config().block_size);
    ForwardCache cache;
    model_.forward(model_.embed_tokens(x_m.tokens.tokens), plan, cache);

    LossReport r = all_position_loss(clean, cache.output, clean.prompt_len, 'm');
    const Matrix d = cross_entropy_dlogits(cache.output, clean.tokens,
                                           response_positions(clean), Real(1));
    const Matrix dinput = model_.backward(cache, d, grads);
    scatter_token_grads(x_m.tokens.tokens, dinput, grads);
    if (report) *report = std::move(r);
    return report ? report->loss_mask : r.loss_mask;
}

Real Trainer::pred_branch_example(const TokenSequence& clean, Real t, uint64_t seed,
                                  Parameters& grads, LossReport* report) {
    // rollout distribution comes from the current parameters; the draw itself
    // is outside the differentiated path
    const CorruptedSequence x_m = mask_corrupt(clean, vocab_, t, seed);
    const AttentionPlan plan = plan_for_sequence(clean, model_.config().block_size);
    const ModelOutput rollout_src = model_.forward(model_.embed_tokens(x_m.tokens.tokens), plan);
    const CorruptedSequence x_p = rollout_predicted_sequence(
        x_m, rollout_src, vocab_, cfg_.rollout_sampling, mix_seed(seed, 0x726f6cULL));

    ForwardCache cache;
    model_.forward(model_.embed_tokens(x_p.tokens.tokens), plan, cache);
    LossReport r = all_position_loss(clean, cache.output, clean.prompt_len, 'p');
    const Matrix d = cross_entropy_dlogits(cache.output, clean.tokens,
                                           response_positions(clean), Real(1));
    const Matrix dinput = model_.backward(cache, d, grads);
    scatter_token_grads(x_p.tokens.tokens, dinput, grads);
    if (report) *report = std::move(r);
    return report ? report->loss_pred : r.loss_pred;
}

void Trainer::oput_joint_example(const TokenSequence& clean, Real t, uint64_t seed,
                                 Parameters& grads, LossReport& mask_r, LossReport& pred_r) {
    // one forward yields both the mask-branch loss and the rollout source
    const CorruptedSequence x_m = mask_corrupt(clean, vocab_, t, seed);
    const AttentionPlan plan = plan_for_sequence(clean, model_.config().block_size);
    ForwardCache cache_m;
    model_.forward(model_.embed_tokens(x_m.tokens.tokens), plan, cache_m);
    mask_r = all_position_loss(clean, cache_m.output, clean.prompt_len, 'm');
    const Matrix dm = cross_entropy_dlogits(cache_m.output, clean.tokens,
                                            response_positions(clean), Real(1));
    const Matrix dinput_m = model_.backward(cache_m, dm, grads);
    scatter_token_grads(x_m.tokens.tokens, dinput_m, grads);

    const CorruptedSequence x_p = rollout_predicted_sequence(
        x_m, cache_m.output, vocab_, cfg_.rollout_sampling, mix_seed(seed, 0x726f6cULL));
    ForwardCache cache_p;
    model_.forward(model_.embed_tokens(x_p.tokens.tokens), plan, cache_p);
    pred_r = all_position_loss(clean, cache_p.output, clean.prompt_len, 'p');
    const Matrix dp = cross_entropy_dlogits(cache_p.output, clean.tokens,
                                            response_positions(clean), Real(1));
    const Matrix dinput_p = model_.backward(cache_p, dp, grads);
    scatter_token_grads(x_p.tokens.tokens, dinput_p, grads);
}

Real Trainer::mdlm_example(const TokenSequence& clean, Real t, uint64_t seed, Parameters& grads) {
    const CorruptedSequence x_m = mask_corrupt(clean, vocab_, t, seed);
    const AttentionPlan plan = plan_for_sequence(clean, model_.config().block_size);
    ForwardCache cache;
    model_.forward(model_.embed_tokens(x_m.tokens.tokens), plan, cache);

    const LossReport r = mdlm_loss(clean, x_m, cache.output, vocab_);
    std::vector<size_t> masked;
    for (size_t i = clean.prompt_len; i < clean.size(); ++i) {
        if (x_m.tokens.tokens[i] == vocab_.mask_id) masked.push_back(i);
    }
    if (!masked.empty()) {
        const Matrix d = cross_entropy_dlogits(cache.output, clean.tokens, masked, Real(1) / t);
        const Matrix dinput = model_.backward(cache, d, grads);
        scatter_token_grads(x_m.tokens.tokens, dinput, grads);
    }
    return r.loss_total;
}

Real Trainer::udlm_example(const TokenSequence& clean, Real t, uint64_t seed, Parameters& grads) {
    const CorruptedSequence x_u = uniform_corrupt(clean, vocab_, t, seed);
    const AttentionPlan plan = plan_for_sequence(clean, model_.config().block_size);
    ForwardCache cache;
    model_.forward(model_.embed_tokens(x_u.tokens.tokens), plan, cache);

    const LossReport r = udlm_loss(clean, x_u, cache.output);
    const Matrix d = cross_entropy_dlogits(cache.output, clean.tokens,
                                           response_positions(clean), Real(1));
    const Matrix dinput = model_.backward(cache, d, grads);
    scatter_token_grads(x_u.tokens.tokens, dinput, grads);
    return r.loss_total;
}

Real Trainer::current_lr() const {
    if (cfg_.lr_schedule == LrSchedule::kConstant) return cfg_.learning_rate;
    const Real u = Real(opt_.updates()) / Real(std::max<size_t>(planned_updates_, 1));
    return cfg_.learning_rate * Real(0.5) * (Real(1) + std::cos(Real(3.14159265358979323846) * u));
}

void Trainer::apply_update(Parameters& grads, size_t batch_examples) {
    if (batch_examples > 1) {
        const Real inv = Real(1) / Real(batch_examples);
        grads.for_each_tensor([&](const std::string&, std::vector<Real>& t) {
            for (Real& x : t) x *= inv;
        });
    }
    opt_.step(model_, grads, current_lr());
}

LossReport Trainer::oput_step(const TokenSequence& clean) {
    const uint64_t seed = mix_seed(cfg_.rng_seed, 0x6f70757473746570ULL, opt_.updates());
    const Real t = sample_noise_level(noise_, mix_seed(seed, 1));
    const uint64_t corrupt_seed = mix_seed(seed, 2);

    LossReport combined;
    if (cfg_.separate_iterations) {
        Parameters grads = model_.make_zero_like();
        LossReport mask_r;
        mask_branch_example(clean, t, corrupt_seed, grads, &mask_r);
        apply_update(grads, 1);

        grads = model_.make_zero_like();
        LossReport pred_r;
        pred_branch_example(clean, t, corrupt_seed, grads, &pred_r);
        apply_update(grads, 1);

        combined.loss_mask = mask_r.loss_mask;
        combined.loss_pred = pred_r.loss_pred;
        combined.per_position = std::move(mask_r.per_position);
        combined.per_position.insert(combined.per_position.end(), pred_r.per_position.begin(),
                                     pred_r.per_position.end());
    } else {
        Parameters grads = model_.make_zero_like();
        LossReport mask_r, pred_r;
        oput_joint_example(clean, t, corrupt_seed, grads, mask_r, pred_r);
        apply_update(grads, 1);
        combined.loss_mask = mask_r.loss_mask;
        combined.loss_pred = pred_r.loss_pred;
        combined.per_position = std::move(mask_r.per_position);
        combined.per_position.insert(combined.per_position.end(), pred_r.per_position.begin(),
                                     pred_r.per_position.end());
    }
    combined.loss_total = combined.loss_mask + combined.loss_pred;
    if (!std::isfinite(combined.loss_total)) {
        throw std::runtime_error("on-policy step: non-finite loss (mask=" +
                                 std::to_string(combined.loss_mask) +
                                 ", pred=" + std::to_string(combined.loss_pred) + ")");
    }
    return combined;
}

TrainSummary Trainer::train(const std::vector<TokenSequence>& dataset,
                            const std::string& log_path) {
    if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");

    TrainSummary summary;
    std::vector<size_t> usable;
    for (size_t i = 0; i < dataset.size(); ++i) {
        if (dataset[i].size() > model_.config().max_seq_len) {
            std::cerr << "warning: skipping sequence " << i << " (length " << dataset[i].size()
                      << " exceeds max_seq_len " << model_.config().max_seq_len << ")\n";
            ++summary.skipped_too_long;
        } else if (dataset[i].response_len() == 0) {
            std::cerr << "warning: skipping sequence " << i << " (empty response)\n";
            ++summary.skipped_too_long;
        } else {
            usable.push_back(i);
        }
    }
    if (usable.empty()) throw std::invalid_argument("train: no usable sequences in dataset");

    const size_t batches_per_epoch = (usable.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    const bool dual_phase =
        cfg_.objective == Objective::kOnPolicy && cfg_.separate_iterations;
    planned_updates_ = cfg_.epochs * batches_per_epoch *
                       (cfg_.objective == Objective::kOnPolicy && dual_phase ? 2 : 1);

    auto log_row = [&](const std::string& phase, Real loss, Real t, Real lr, uint64_t seed) {
        summary.log.push_back({opt_.updates(), phase, loss, t, lr, seed});
        summary.final_loss = loss;
    };

    for (size_t epoch = 0; epoch < cfg_.epochs; ++epoch) {
        // seeded shuffle, deterministic across reruns
        std::vector<size_t> order = usable;
        Rng shuffle_rng(mix_seed(cfg_.rng_seed, 0x73687566ULL, epoch));
        for (size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.uniform_index(i)]);
        }

        for (size_t b = 0; b < batches_per_epoch; ++b) {
            const size_t begin = b * cfg_.batch_size;
            const size_t end = std::min(begin + cfg_.batch_size, order.size());
            const uint64_t step_seed = mix_seed(cfg_.rng_seed, epoch, b);

            std::vector<Real> ts(end - begin);
            std::vector<uint64_t> seeds(end - begin);
            for (size_t k = 0; k < end - begin; ++k) {
                seeds[k] = mix_seed(step_seed, k);
                ts[k] = sample_noise_level(noise_, mix_seed(seeds[k], 1));
            }
            auto mean_t = [&] {
                Real s = 0;
                for (Real t : ts) s += t;
                return s / Real(ts.size());
            };

            switch (cfg_.objective) {
            case Objective::kMdlm: {
                Parameters grads = model_.make_zero_like();
                Real loss = 0;
                for (size_t k = 0; k < end - begin; ++k) {
                    loss += mdlm_example(dataset[order[begin + k]], ts[k], mix_seed(seeds[k], 2),
                                         grads);
                }
                loss /= Real(end - begin);
                const Real lr = current_lr();
                apply_update(grads, end - begin);
                log_row("mask", loss, mean_t(), lr, step_seed);
                break;
            }
            case Objective::kUdlm: {
                Parameters grads = model_.make_zero_like();
                Real loss = 0;
                for (size_t k = 0; k < end - begin; ++k) {
                    loss += udlm_example(dataset[order[begin + k]], ts[k], mix_seed(seeds[k], 2),
                                         grads);
                }
                loss /= Real(end - begin);
                const Real lr = current_lr();
                apply_update(grads, end - begin);
                log_row("joint", loss, mean_t(), lr, step_seed);
                break;
            }
            case Objective::kOnPolicy: {
                if (cfg_.separate_iterations) {
                    Parameters grads = model_.make_zero_like();
                    Real loss = 0;
                    for (size_t k = 0; k < end - begin; ++k) {
                        loss += mask_branch_example(dataset[order[begin + k]], ts[k],
                                                    mix_seed(seeds[k], 2), grads, nullptr);
                    }
                    loss /= Real(end - begin);
                    Real lr = current_lr();
                    apply_update(grads, end - begin);
                    log_row("mask", loss, mean_t(), lr, step_seed);

                    grads = model_.make_zero_like();
                    loss = 0;
                    for (size_t k = 0; k < end - begin; ++k) {
                        loss += pred_branch_example(dataset[order[begin + k]], ts[k],
                                                    mix_seed(seeds[k], 2), grads, nullptr);
                    }
                    loss /= Real(end - begin);
                    lr = current_lr();
                    apply_update(grads, end - begin);
                    log_row("pred", loss, mean_t(), lr, step_seed);
                } else {
                    Parameters grads = model_.make_zero_like();
                    Real loss = 0;
                    for (size_t k = 0; k < end - begin; ++k) {
                        LossReport rm, rp;
                        oput_joint_example(dataset[order[begin + k]], ts[k], mix_seed(seeds[k], 2),
                                           grads, rm, rp);
                        loss += rm.loss_mask + rp.loss_pred;
                    }
                    loss /= Real(end - begin);
                    const Real lr = current_lr();
                    apply_update(grads, end - begin);
                    log_row("joint", loss, mean_t(), lr, step_seed);
                }
                break;
            }
            }
            ++summary.steps;
            if (!std::isfinite(summary.final_loss)) {
                throw std::runtime_error("train: non-finite loss at step " +
                                         std::to_string(summary.steps));
            }
        }
    }

    if (!log_path.empty()) {
        std::ofstream out(log_path, std::ios::trunc);
        if (!out) throw IoError("cannot open training log for writing: " + log_path);
        for (const TrainLogRecord& r : summary.log) {
            nlohmann::ordered_json row;
            row["step"] = r.step;
            row["phase"] = r.phase;
            row["loss"] = r.loss;
            row["t"] = r.t;
            row["lr"] = r.lr;
            row["seed"] = r.seed;
            out << row.dump() << "\n";
        }
    }
    return summary;
}

} // namespace difflab
