#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "oneactor/denoiser.hpp"
#include "oneactor/projector.hpp"
#include "oneactor/sampler.hpp"
#include "oneactor/schedule.hpp"
#include "oneactor/semantics.hpp"
#include "oneactor/tune.hpp"
#include "oneactor/world.hpp"

namespace oneactor {

/// Condition used by plain CFG outside the guidance window.
enum class FallbackCondition { Offset, Raw };

inline std::string to_string(FallbackCondition f) { return f == FallbackCondition::Offset ? "offset" : "raw"; }

inline FallbackCondition fallback_condition_from_string(const std::string& s) {
    if (s == "offset") return FallbackCondition::Offset;
    if (s == "raw") return FallbackCondition::Raw;
    throw std::invalid_argument("unknown fallback condition '" + s + "' (expected offset or raw)");
}

struct GuidanceConfig {
    double eta1 = 8.5;
    double eta2 = 1.0;
    double v = 0.8;
    /// Inclusive range of sampling steps (1 = noisiest) receiving cluster guidance.
    int window_begin = 1;
    int window_end = 20;
    int steps = kDefaultSamplingSteps;
    double fallback_scale = 7.5;
    FallbackCondition fallback = FallbackCondition::Offset;
    /// Use c'_aver in place of the empty condition.
    bool aver_as_empty = false;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("guidance: steps must be positive");
        if (window_begin < 1 || window_end > steps || window_begin > window_end)
            throw std::invalid_argument("guidance: window must satisfy 1 <= begin <= end <= steps");
        if (!(eta1 >= 0.0) || !(eta2 >= 0.0)) throw std::invalid_argument("guidance: eta1 and eta2 must be non-negative");
    }

    bool in_window(int step) const { return step >= window_begin && step <= window_end; }
    bool operator==(const GuidanceConfig&) const = default;
};

/// Per-base-word semantic offsets for one subject prompt, plus the features
/// they were computed from.
struct TargetContext {
    std::vector<Vector> delta_tar;
    std::vector<Vector> delta_aver;
    std::vector<Vector> h_tar;
    std::vector<std::vector<Vector>> aux_h;
};

/// c_delta^tar = phi(h_tar, c_sub) and c_delta^aver = mean over the auxiliary
/// features, placed on the projector's slots of `n_base` base words.
inline void add_representations(TargetContext& ctx, const TunedProjector& tp, const BaseSet& bs, const Vector& pooled_sub,
                                std::size_t n_base) {
    const auto m = tp.proj.spec.embed_dim;
    if (ctx.delta_tar.empty()) {
        ctx.delta_tar.assign(n_base, Vector::Zero(static_cast<Eigen::Index>(m)));
        ctx.delta_aver.assign(n_base, Vector::Zero(static_cast<Eigen::Index>(m)));
    }
    const auto& tar = bs.target();
    std::vector<Vector> aux;
    for (std::size_t i : bs.auxiliary_indices()) aux.push_back(bs.entries[i].h);
    const auto d_tar = projector_forward(tp.proj, tar.h, pooled_sub, NormMode::Running);
    const auto d_aver = average_condition(tp.proj, aux, pooled_sub, NormMode::Running);
    for (std::size_t j = 0; j < tp.slots.size(); ++j) {
        if (tp.slots[j] >= n_base) throw std::invalid_argument("build_representations: projector slot exceeds base words");
        ctx.delta_tar[tp.slots[j]] += d_tar[j];
        ctx.delta_aver[tp.slots[j]] += d_aver[j];
    }
    ctx.h_tar.push_back(tar.h);
    ctx.aux_h.push_back(std::move(aux));
}

inline TargetContext build_representations(const TunedProjector& tp, const BaseSet& bs, const PromptEmbedding& c_sub) {
    TargetContext ctx;
    add_representations(ctx, tp, bs, pool_condition(c_sub), c_sub.base_indices.size());
    return ctx;
}

/// Eq. (19) noise predictor over a batch of chains. Denoiser evaluations are
/// counted per sampling step.
class GuidedPredictor {
public:
    GuidedPredictor(const Denoiser& den, const PromptEmbedding& c_sub, const TargetContext& ctx, const GuidanceConfig& g)
        : den_(den), g_(g), calls_(static_cast<std::size_t>(g.steps) + 1, 0) {
        g.validate();
        if (ctx.delta_tar.size() != c_sub.base_indices.size())
            throw std::invalid_argument("guided predictor: offsets do not match the prompt's base words");
        c_raw_ = pool_condition(c_sub);
        c_tar_ = pool_condition(offset_base(c_sub, ctx.delta_tar, g.v));
        c_aver_ = pool_condition(offset_base(c_sub, ctx.delta_aver, g.v));
        c_empty_ = Vector::Zero(c_raw_.size());
        same_ = c_tar_ == c_aver_;
    }

    Matrix operator()(const Matrix& z, int t, int step) {
        if (step < 1 || step > g_.steps) throw std::invalid_argument("guided predictor: step index out of range");
        if (!g_.in_window(step)) {
            const Vector& c = g_.fallback == FallbackCondition::Offset ? c_tar_ : c_raw_;
            return cfg_combine(eval(z, t, c_empty_, step), eval(z, t, c, step), g_.fallback_scale);
        }
        if (g_.aver_as_empty) {
            // The exclusion term vanishes once c'_aver is the reference.
            return cfg_combine(eval(z, t, c_aver_, step), eval(z, t, c_tar_, step), g_.eta1);
        }
        const Matrix e0 = eval(z, t, c_empty_, step);
        const Matrix e1 = eval(z, t, c_tar_, step);
        if (g_.eta2 == 0.0) return cfg_combine(e0, e1, g_.eta1);
        if (same_) return cfg_combine(e0, e1, g_.eta1 - g_.eta2);
        const Matrix e2 = eval(z, t, c_aver_, step);
        return combine(e0, e1, e2, g_.eta1, g_.eta2);
    }

    /// e0 + eta1 (e1 - e0) - eta2 (e2 - e0), grouped per evaluation.
    static Matrix combine(const Matrix& e0, const Matrix& e1, const Matrix& e2, double eta1, double eta2) {
        return (1.0 - eta1 + eta2) * e0 + eta1 * e1 - eta2 * e2;
    }

    /// calls()[k] is the number of denoiser evaluations made at step k.
    const std::vector<int>& calls() const { return calls_; }
    const Vector& c_tar() const { return c_tar_; }
    const Vector& c_aver() const { return c_aver_; }
    const Vector& c_raw() const { return c_raw_; }

private:
    Matrix eval(const Matrix& z, int t, const Vector& c, int step) {
        ++calls_[static_cast<std::size_t>(step)];
        return den_.predict(z, t, c);
    }

    const Denoiser& den_;
    GuidanceConfig g_;
    Vector c_raw_, c_tar_, c_aver_, c_empty_;
    bool same_ = false;
    std::vector<int> calls_;
};

struct SampleSet {
    Prompt prompt;
    Matrix z0;
    /// Sub-cluster of each subject factor, per sample.
    std::vector<std::vector<int>> assigned;
    std::vector<int> calls_per_step;
};

inline SampleSet finish_samples(const WorldSpec& world, const Prompt& prompt, Matrix z0, std::vector<int> calls) {
    SampleSet out{prompt, std::move(z0), {}, std::move(calls)};
    for (Eigen::Index j = 0; j < out.z0.cols(); ++j) out.assigned.push_back(assign_prompt(world, prompt, out.z0.col(j)));
    return out;
}

/// n independent chains with the cluster-guided predictor; chain j draws
/// from Rng(seed, j).
inline SampleSet sample_with_context(const Denoiser& den, const WorldSpec& world, const Vocabulary& vocab,
                                     const TargetContext& ctx, const Prompt& prompt_sub, const GuidanceConfig& g,
                                     std::size_t n, const NoiseSchedule& sched, std::uint64_t seed) {
    if (prompt_sub.base_indices.empty()) throw std::invalid_argument("sample_consistent: prompt has no base word");
    GuidedPredictor pred(den, embed_prompt(vocab, prompt_sub), ctx, g);
    Matrix z0 = sample_chains([&](const Matrix& z, int t, int step) { return pred(z, t, step); }, sched, g.steps, seed, n,
                              den.latent_dim());
    return finish_samples(world, prompt_sub, std::move(z0), pred.calls());
}

inline SampleSet sample_consistent(const Denoiser& den, const TunedProjector& tp, const BaseSet& bs, const WorldSpec& world,
                                   const Vocabulary& vocab, const Prompt& prompt_sub, const GuidanceConfig& g, std::size_t n,
                                   const NoiseSchedule& sched, std::uint64_t seed) {
    if (prompt_sub.base_indices.empty()) throw std::invalid_argument("sample_consistent: prompt has no base word");
    const auto ctx = build_representations(tp, bs, embed_prompt(vocab, prompt_sub));
    return sample_with_context(den, world, vocab, ctx, prompt_sub, g, n, sched, seed);
}

/// Unguided reference: CFG on the raw prompt (scale 1 is plain conditional
/// sampling).
inline SampleSet sample_unguided(const Denoiser& den, const WorldSpec& world, const Vocabulary& vocab, const Prompt& prompt,
                                 std::size_t n, const NoiseSchedule& sched, std::uint64_t seed, double scale = 1.0,
                                 int steps = kDefaultSamplingSteps) {
    const Vector c = pool_condition(embed_prompt(vocab, prompt));
    const Vector c_empty = Vector::Zero(c.size());
    std::vector<int> calls(static_cast<std::size_t>(steps) + 1, 0);
    Matrix z0 = sample_chains(
        [&](const Matrix& z, int t, int step) {
            calls[static_cast<std::size_t>(step)] += 2;
            return cfg_predict(den, z, t, c, c_empty, scale);
        },
        sched, steps, seed, n, den.latent_dim());
    return finish_samples(world, prompt, std::move(z0), std::move(calls));
}

// ---------------------------------------------------------------------------
// Multiple subjects

/// Joins single-subject prompts [s_j, ctx...] into [s_1, ..., s_L, ctx] with
/// the context of the first prompt.
inline Prompt combine_prompts(std::span<const Prompt> prompts) {
    if (prompts.size() < 2) throw std::invalid_argument("combine_prompts: need at least 2 subject prompts");
    std::vector<std::string> subjects;
    for (const auto& p : prompts) {
        if (p.base_indices.size() != 1) throw std::invalid_argument("combine_prompts: each prompt needs exactly one base word");
        const auto& s = p.tokens.at(p.base_indices[0]);
        if (std::find(subjects.begin(), subjects.end(), s) != subjects.end())
            throw std::invalid_argument("combine_prompts: overlapping base word '" + s + "'");
        subjects.push_back(s);
    }
    return multi_subject_prompt(subjects, context_token_of(prompts[0]));
}

/// Variant 1: one projector with an L-output head tuned on the combined
/// prompt. The subject set is fixed at tuning time.
struct MultiSubjectV1 {
    TunedProjector tuned;
    BaseSet base;
    std::vector<TuneRecord> curve;

    std::size_t num_subjects() const { return tuned.slots.size(); }

    /// Always rejects: a multi-output head cannot take a new subject without
    /// re-tuning on the grown prompt.
    [[noreturn]] void add_subject(const std::string& subject) const {
        throw std::invalid_argument("variant 1 cannot add subject '" + subject +
                                    "' after tuning; re-tune with the combined prompt");
    }

    SampleSet sample(const Denoiser& den, const WorldSpec& world, const Vocabulary& vocab, const Prompt& prompt,
                     const GuidanceConfig& g, std::size_t n, const NoiseSchedule& sched, std::uint64_t seed) const {
        if (prompt.base_indices.size() != num_subjects())
            throw std::invalid_argument("variant 1: prompt has " + std::to_string(prompt.base_indices.size()) +
                                        " base words, projector was tuned for " + std::to_string(num_subjects()));
        return sample_consistent(den, tuned, base, world, vocab, prompt, g, n, sched, seed);
    }
};

/// Generates the base set for the combined prompt, picks the target and tunes
/// an L-output projector offsetting every base word.
inline MultiSubjectV1 multi_subject_variant1(const Denoiser& den, const Vocabulary& vocab, const WorldSpec& world,
                                             std::span<const Prompt> prompts, const std::vector<std::string>& templates,
                                             const TuneConfig& cfg, const NoiseSchedule& sched, std::uint64_t seed,
                                             std::optional<std::size_t> target_index = std::nullopt,
                                             std::size_t N = kDefaultBaseSetSize, double cfg_scale = 1.0) {
    const Prompt combined = combine_prompts(prompts);
    Rng rng(seed, 0x7461726774ULL);
    auto bs = choose_target(generate_base_set(den, vocab, world, combined, N, sched, seed, cfg_scale), target_index, rng);
    auto res = tune(den, vocab, bs, templates, cfg, sched);
    return {std::move(res.tuned), std::move(bs), std::move(res.curve)};
}

/// Variant 2 component: projector for base word `slot` with its own base set.
struct SubjectProjector {
    TunedProjector tuned;
    BaseSet base;
};

/// How variant 2 keeps subjects apart. TokenScoped offsets every base word
/// inside one shared guided prediction. FactorMasked runs one guided
/// prediction per subject, carrying only that subject's offset, and keeps
/// its latent factor block (the product-latent counterpart of a subject mask).
enum class Variant2Mode { FactorMasked, TokenScoped };

inline std::string to_string(Variant2Mode m) { return m == Variant2Mode::FactorMasked ? "factor_masked" : "token_scoped"; }

inline Variant2Mode variant2_mode_from_string(const std::string& s) {
    if (s == "factor_masked") return Variant2Mode::FactorMasked;
    if (s == "token_scoped") return Variant2Mode::TokenScoped;
    throw std::invalid_argument("unknown variant-2 mode '" + s + "' (expected factor_masked or token_scoped)");
}

/// One representation per projector, each touching only its own base word.
inline std::vector<TargetContext> variant2_contexts(std::span<const SubjectProjector> projectors, const PromptEmbedding& c) {
    const std::size_t L = c.base_indices.size();
    if (projectors.size() != L)
        throw std::invalid_argument("variant 2: " + std::to_string(projectors.size()) + " projectors for " +
                                    std::to_string(L) + " base words");
    std::set<std::size_t> seen;
    for (const auto& sp : projectors) {
        if (sp.tuned.slots.size() != 1) throw std::invalid_argument("variant 2: each projector must own exactly one base word");
        if (!seen.insert(sp.tuned.slots[0]).second) throw std::invalid_argument("variant 2: two projectors share a base word");
    }
    std::vector<TargetContext> out;
    const Vector pooled = pool_condition(c);
    for (const auto& sp : projectors) {
        TargetContext ctx;
        add_representations(ctx, sp.tuned, sp.base, pooled, L);
        out.push_back(std::move(ctx));
    }
    return out;
}

/// Sum of the per-projector contexts (all offsets in one prompt).
inline TargetContext merge_contexts(std::span<const TargetContext> parts) {
    if (parts.empty()) throw std::invalid_argument("merge_contexts: nothing to merge");
    TargetContext out = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) {
        for (std::size_t j = 0; j < out.delta_tar.size(); ++j) {
            out.delta_tar[j] += parts[i].delta_tar.at(j);
            out.delta_aver[j] += parts[i].delta_aver.at(j);
        }
        out.h_tar.insert(out.h_tar.end(), parts[i].h_tar.begin(), parts[i].h_tar.end());
        out.aux_h.insert(out.aux_h.end(), parts[i].aux_h.begin(), parts[i].aux_h.end());
    }
    return out;
}

/// Factor j of the latent follows the guided prediction built from parts[j]
/// alone; the factor blocks have `factor_dim` coordinates each.
inline SampleSet sample_factor_masked(const Denoiser& den, const WorldSpec& world, const Vocabulary& vocab,
                                      std::span<const TargetContext> parts, const Prompt& prompt, const GuidanceConfig& g,
                                      std::size_t n, const NoiseSchedule& sched, std::uint64_t seed) {
    const std::size_t L = prompt.base_indices.size();
    if (parts.size() != L) throw std::invalid_argument("factor-masked sampling: one context per base word required");
    if (den.latent_dim() != world.latent_dim * L)
        throw std::invalid_argument("factor-masked sampling: latent is not one factor per subject");
    const auto c = embed_prompt(vocab, prompt);
    std::vector<GuidedPredictor> preds;
    for (const auto& part : parts) preds.emplace_back(den, c, part, g);
    const auto fd = static_cast<Eigen::Index>(world.latent_dim);
    Matrix z0 = sample_chains(
        [&](const Matrix& z, int t, int step) {
            Matrix out(z.rows(), z.cols());
            for (std::size_t j = 0; j < L; ++j) {
                const auto r0 = static_cast<Eigen::Index>(j) * fd;
                out.middleRows(r0, fd) = preds[j](z, t, step).middleRows(r0, fd);
            }
            return out;
        },
        sched, g.steps, seed, n, den.latent_dim());
    std::vector<int> calls(static_cast<std::size_t>(g.steps) + 1, 0);
    for (const auto& p : preds)
        for (std::size_t k = 0; k < calls.size(); ++k) calls[k] += p.calls()[k];
    return finish_samples(world, prompt, std::move(z0), std::move(calls));
}

/// Samples the multi-subject prompt from per-subject representations.
inline SampleSet sample_variant2(const Denoiser& den, const WorldSpec& world, const Vocabulary& vocab,
                                 std::span<const TargetContext> parts, const Prompt& prompt, const GuidanceConfig& g,
                                 std::size_t n, const NoiseSchedule& sched, std::uint64_t seed,
                                 Variant2Mode mode = Variant2Mode::FactorMasked) {
    if (mode == Variant2Mode::FactorMasked) return sample_factor_masked(den, world, vocab, parts, prompt, g, n, sched, seed);
    return sample_with_context(den, world, vocab, merge_contexts(parts), prompt, g, n, sched, seed);
}

inline SampleSet multi_subject_variant2(const Denoiser& den, std::span<const SubjectProjector> projectors,
                                        const WorldSpec& world, const Vocabulary& vocab, const Prompt& prompt,
                                        const GuidanceConfig& g, std::size_t n, const NoiseSchedule& sched,
                                        std::uint64_t seed, Variant2Mode mode = Variant2Mode::FactorMasked) {
    const auto parts = variant2_contexts(projectors, embed_prompt(vocab, prompt));
    return sample_variant2(den, world, vocab, parts, prompt, g, n, sched, seed, mode);
}

/// Loss weights selecting latent factor `slot` out of `n_factors` blocks of
/// `factor_dim` coordinates.
inline std::vector<double> factor_loss_mask(std::size_t factor_dim, std::size_t n_factors, std::size_t slot) {
    if (slot >= n_factors) throw std::invalid_argument("factor_loss_mask: slot out of range");
    std::vector<double> mask(factor_dim * n_factors, 0.0);
    for (std::size_t i = 0; i < factor_dim; ++i) mask[slot * factor_dim + i] = 1.0;
    return mask;
}

/// Tunes the variant-2 projector of base word `slot`: only that word is
/// offset and only that subject's latent factor enters the loss.
inline SubjectProjector tune_subject_projector(const Denoiser& den, const Vocabulary& vocab, const WorldSpec& world,
                                               const Prompt& combined, std::size_t slot,
                                               const std::vector<std::string>& templates, TuneConfig cfg,
                                               const NoiseSchedule& sched, std::uint64_t seed,
                                               std::optional<std::size_t> target_index = std::nullopt,
                                               std::size_t N = kDefaultBaseSetSize, double cfg_scale = 1.0) {
    const std::size_t L = combined.base_indices.size();
    if (slot >= L) throw std::invalid_argument("variant 2: slot out of range");
    Rng rng(seed, 0x7461726774ULL);
    auto bs = choose_target(generate_base_set(den, vocab, world, combined, N, sched, seed, cfg_scale), target_index, rng);
    cfg.loss_mask = factor_loss_mask(world.latent_dim, L, slot);
    auto res = tune(den, vocab, bs, templates, cfg, sched, std::vector<std::size_t>{slot});
    return {std::move(res.tuned), std::move(bs)};
}

} // namespace oneactor
