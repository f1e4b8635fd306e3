#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "oneactor/denoiser.hpp"
#include "oneactor/errors.hpp"
#include "oneactor/numcore.hpp"
#include "oneactor/rng.hpp"
#include "oneactor/schedule.hpp"
#include "oneactor/semantics.hpp"
#include "oneactor/world.hpp"

namespace oneactor {

struct TrainConfig {
    int steps = 30000;
    int batch_size = 64;
    /// Probability of replacing the condition by c_empty.
    double p_uncond = 0.1;
    /// Probability that a caption carries the identity descriptor of the
    /// drawn sub-cluster on its subject word.
    double p_describe = 0.5;
    AdamWConfig opt{1e-3, 0.9, 0.999, 1e-8, 0.01};
    /// Cosine decay of the learning rate down to this fraction of opt.lr.
    double lr_final_fraction = 0.05;
    std::uint64_t seed = 0;
    DenoiserArch arch{};

    void validate() const {
        if (steps < 0 || batch_size < 1) throw std::invalid_argument("train config: steps >= 0 and batch_size >= 1 required");
        if (!(p_uncond >= 0.0 && p_uncond < 1.0)) throw std::invalid_argument("train config: p_uncond must be in [0, 1)");
        if (!(p_describe >= 0.0 && p_describe <= 1.0))
            throw std::invalid_argument("train config: p_describe must be in [0, 1]");
    }
};

/// Everything needed to continue a training run bit-identically.
struct TrainState {
    Denoiser denoiser;
    AdamWState opt;
    int step = 0;
    std::vector<double> losses;
};

/// Clean latent and pooled condition of one training caption.
struct CaptionedLatent {
    Vector z0;
    Vector cond;
};

using CaptionSampler = std::function<CaptionedLatent(Rng&)>;

inline double scheduled_lr(const TrainConfig& cfg, int step) {
    if (cfg.steps <= 1) return cfg.opt.lr;
    const double x = static_cast<double>(step) / static_cast<double>(cfg.steps - 1);
    const double f = cfg.lr_final_fraction + (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
    return cfg.opt.lr * f;
}

/// Runs steps state.step .. cfg.steps - 1 (or up to `stop_at` if that is
/// smaller). Step s draws everything from Rng(seed, 2^32 + s), so stopping
/// and resuming reproduces the one-shot run.
inline void train_denoiser(TrainState& state, const CaptionSampler& captions, const TrainConfig& cfg,
                           const NoiseSchedule& sched, int stop_at = -1) {
    cfg.validate();
    auto& den = state.denoiser;
    if (state.opt.first_moment.empty()) state.opt = AdamWState::zeros_like(den.params);
    std::vector<DenoiseExample> batch(static_cast<std::size_t>(cfg.batch_size));
    const Vector c_empty = Vector::Zero(static_cast<Eigen::Index>(den.embed_dim));
    const int end = stop_at >= 0 ? std::min(stop_at, cfg.steps) : cfg.steps;
    for (; state.step < end; ++state.step) {
        Rng rng(cfg.seed, (std::uint64_t{1} << 32) + static_cast<std::uint64_t>(state.step));
        for (auto& ex : batch) {
            auto cap = captions(rng);
            ex.z0 = std::move(cap.z0);
            ex.cond = rng.uniform() < cfg.p_uncond ? c_empty : std::move(cap.cond);
            ex.t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
            ex.eps.resize(static_cast<Eigen::Index>(den.latent));
            for (Eigen::Index i = 0; i < ex.eps.size(); ++i) ex.eps[i] = rng.normal();
        }
        auto lg = denoise_loss(den, batch, sched);
        if (!std::isfinite(lg.loss))
            throw NumericError("train: loss is not finite at step " + std::to_string(state.step));
        AdamWConfig opt = cfg.opt;
        opt.lr = scheduled_lr(cfg, state.step);
        adamw_step(den.params, lg.grads, state.opt, opt);
        state.losses.push_back(lg.loss);
    }
}

/// Captions of the single-subject world: uniform subject and context; the
/// null context is phrased with itself or any template; the subject word
/// carries the sub-cluster's descriptor with probability p_describe.
inline CaptionSampler world_captions(const WorldSpec& world, const Vocabulary& vocab,
                                     const std::vector<std::string>& templates, double p_describe) {
    return [&world, &vocab, templates, p_describe](Rng& rng) {
        const auto& subject = world.subjects[rng.below(world.subjects.size())];
        const auto& context = world.contexts[rng.below(world.contexts.size())];
        std::string ctx_token = context.token;
        if (context.offset.isZero(0.0)) {
            const auto pick = rng.below(templates.size() + 1);
            if (pick > 0) ctx_token = templates[pick - 1];
        }
        auto draw = sample_world(world, subject.token, context.token, rng);
        auto emb = embed_prompt(vocab, subject_prompt(subject.token, ctx_token));
        if (rng.uniform() < p_describe) emb = offset_base(emb, vocab.at(descriptor_token(subject.token, draw.subcluster)), 1.0);
        return CaptionedLatent{std::move(draw.z0), pool_condition(emb)};
    };
}

/// Captions of the product world: [subject_1, ..., subject_L, context], each
/// subject word independently carrying its factor's descriptor. The null
/// context is phrased as in world_captions.
inline CaptionSampler product_captions(const ProductWorld& pw, const Vocabulary& vocab,
                                       const std::vector<std::string>& templates, double p_describe) {
    return [&pw, &vocab, templates, p_describe](Rng& rng) {
        const auto& context = pw.base.contexts[rng.below(pw.base.contexts.size())];
        std::string ctx_token = context.token;
        if (context.offset.isZero(0.0)) {
            const auto pick = rng.below(templates.size() + 1);
            if (pick > 0) ctx_token = templates[pick - 1];
        }
        auto draw = sample_product(pw, context.token, rng);
        const auto prompt = multi_subject_prompt(pw.subjects, ctx_token);
        auto emb = embed_prompt(vocab, prompt);
        std::vector<Vector> deltas;
        for (std::size_t j = 0; j < pw.subjects.size(); ++j) {
            if (rng.uniform() < p_describe) {
                deltas.push_back(vocab.at(descriptor_token(pw.subjects[j], draw.subclusters[j])));
            } else {
                deltas.push_back(Vector::Zero(static_cast<Eigen::Index>(vocab.embed_dim)));
            }
        }
        emb = offset_base(emb, deltas, 1.0);
        return CaptionedLatent{std::move(draw.z0), pool_condition(emb)};
    };
}

inline TrainState init_train_state(std::size_t latent_dim, const Vocabulary& vocab, const TrainConfig& cfg,
                                   const NoiseSchedule& sched) {
    Rng rng(cfg.seed, 0x696e6974ULL);
    TrainState st;
    st.denoiser = make_denoiser(latent_dim, vocab.embed_dim, sched.T, cfg.arch, rng);
    st.opt = AdamWState::zeros_like(st.denoiser.params);
    return st;
}

/// Trains the base conditional denoiser on the world with condition dropout.
inline TrainState train_base(const WorldSpec& world, const Vocabulary& vocab, const std::vector<std::string>& templates,
                             const TrainConfig& cfg, const NoiseSchedule& sched) {
    world.validate();
    auto st = init_train_state(world.latent_dim, vocab, cfg, sched);
    train_denoiser(st, world_captions(world, vocab, templates, cfg.p_describe), cfg, sched);
    return st;
}

inline TrainState train_product_base(const ProductWorld& pw, const Vocabulary& vocab,
                                     const std::vector<std::string>& templates, const TrainConfig& cfg,
                                     const NoiseSchedule& sched) {
    pw.base.validate();
    auto st = init_train_state(pw.latent_dim(), vocab, cfg, sched);
    train_denoiser(st, product_captions(pw, vocab, templates, cfg.p_describe), cfg, sched);
    return st;
}

} // namespace oneactor
