#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "oneactor/denoiser.hpp"
#include "oneactor/errors.hpp"
#include "oneactor/numcore.hpp"
#include "oneactor/projector.hpp"
#include "oneactor/rng.hpp"
#include "oneactor/sampler.hpp"
#include "oneactor/schedule.hpp"
#include "oneactor/semantics.hpp"
#include "oneactor/world.hpp"

namespace oneactor {

inline constexpr std::size_t kDefaultBaseSetSize = 11;

/// One base sample: its clean latent, the latent entering the last sampling
/// step (t = 1) where the feature is read, the feature h, and the world
/// sub-cluster per subject (evaluation only, tuning never reads it).
struct BaseEntry {
    Vector z0;
    Vector z_feat;
    Vector h;
    std::vector<int> assigned;
};

struct BaseSet {
    Prompt prompt_tar;
    std::vector<BaseEntry> entries;
    std::optional<std::size_t> target_index;
    int feature_t = 1;
    double cfg_scale = 1.0;

    const BaseEntry& target() const {
        if (!target_index) throw std::invalid_argument("base set has no target");
        return entries.at(*target_index);
    }

    std::vector<std::size_t> auxiliary_indices() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < entries.size(); ++i)
            if (!target_index || i != *target_index) idx.push_back(i);
        return idx;
    }
};

/// Subjects named by the base words of a prompt, in base-index order.
inline std::vector<std::string> base_subjects(const Prompt& p) {
    std::vector<std::string> out;
    for (std::size_t b : p.base_indices) out.push_back(p.tokens.at(b));
    return out;
}

/// First non-base token (the context or template word).
inline std::string context_token_of(const Prompt& p) {
    for (std::size_t i = 0; i < p.tokens.size(); ++i)
        if (std::find(p.base_indices.begin(), p.base_indices.end(), i) == p.base_indices.end()) return p.tokens[i];
    throw std::invalid_argument("prompt has no context token");
}

/// Same prompt with every non-base token replaced.
inline Prompt with_context(const Prompt& p, const std::string& token) {
    Prompt out = p;
    for (std::size_t i = 0; i < out.tokens.size(); ++i)
        if (std::find(p.base_indices.begin(), p.base_indices.end(), i) == p.base_indices.end()) out.tokens[i] = token;
    return out;
}

/// World sub-cluster of each subject factor of z0 under the prompt's context.
inline std::vector<int> assign_prompt(const WorldSpec& world, const Prompt& prompt, const Vector& z0) {
    const auto subjects = base_subjects(prompt);
    const auto& ctx = context_of_token(world, context_token_of(prompt));
    std::vector<int> ks;
    const auto d = static_cast<Eigen::Index>(world.latent_dim);
    if (static_cast<std::size_t>(z0.size()) != world.latent_dim * subjects.size())
        throw std::invalid_argument("assign_prompt: latent does not match the prompt's subject count");
    for (std::size_t j = 0; j < subjects.size(); ++j)
        ks.push_back(assign_subcluster(world, subjects[j], ctx.token, z0.segment(static_cast<Eigen::Index>(j) * d, d)));
    return ks;
}

/// N samples of the frozen base model for prompt_tar (CFG at `cfg_scale`),
/// with the feature h = E(z_1, t = 1, c) captured at the last sampling step.
template <class Den = Denoiser>
BaseSet generate_base_set(const Den& den, const Vocabulary& vocab, const WorldSpec& world, const Prompt& prompt_tar,
                          std::size_t N, const NoiseSchedule& sched, std::uint64_t seed, double cfg_scale = 1.0,
                          int steps = kDefaultSamplingSteps) {
    if (N < 2) throw std::invalid_argument("generate_base_set: need at least 2 base samples");
    if (prompt_tar.base_indices.empty()) throw std::invalid_argument("generate_base_set: prompt has no base word");
    const Vector c = pool_condition(embed_prompt(vocab, prompt_tar));
    const Vector c_empty = Vector::Zero(c.size());
    std::vector<Matrix> traj;
    const Matrix z0 = sample_chains([&](const Matrix& z, int t, int) { return cfg_predict(den, z, t, c, c_empty, cfg_scale); },
                                    sched, steps, seed, N, den.latent_dim(), &traj);
    const int t_feat = sampling_timesteps(sched.T, steps).back();
    const Matrix& z_feat = traj.at(static_cast<std::size_t>(steps) - 1);
    BaseSet bs{prompt_tar, {}, std::nullopt, t_feat, cfg_scale};
    for (std::size_t i = 0; i < N; ++i) {
        const auto j = static_cast<Eigen::Index>(i);
        BaseEntry e{z0.col(j), z_feat.col(j), den.features(z_feat.col(j), t_feat, c), {}};
        e.assigned = assign_prompt(world, prompt_tar, e.z0);
        bs.entries.push_back(std::move(e));
    }
    return bs;
}

/// Marks the target; the remaining N - 1 entries form the auxiliary set.
inline BaseSet choose_target(BaseSet bs, std::optional<std::size_t> index, Rng& rng) {
    if (index) {
        if (*index >= bs.entries.size())
            throw std::invalid_argument("choose_target: index " + std::to_string(*index) + " out of range");
        bs.target_index = *index;
    } else {
        bs.target_index = static_cast<std::size_t>(rng.below(bs.entries.size()));
    }
    return bs;
}

/// M jittered copies of the target latent; every copy keeps h_tar.
struct AugmentedTarget {
    std::vector<Vector> z;
    Vector h;
};

inline AugmentedTarget augment_target(const BaseSet& bs, std::size_t M, double sigma_aug, Rng& rng) {
    if (M < 1) throw std::invalid_argument("augment_target: M must be at least 1");
    const auto& tar = bs.target();
    AugmentedTarget out{{}, tar.h};
    for (std::size_t i = 0; i < M; ++i) {
        Vector z = tar.z0;
        for (Eigen::Index k = 0; k < z.size(); ++k) z[k] += sigma_aug * rng.normal();
        out.z.push_back(std::move(z));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tuning

struct TuneConfig {
    std::size_t K = 3;
    std::size_t M = 2;
    double lambda1 = 0.5;
    double lambda2 = 0.2;
    int max_steps = 3000;
    int plateau_patience = 200;
    /// The plateau rule is only consulted from this step on.
    int min_steps = 1000;
    int ma_window = 50;
    double plateau_tol = 1e-4;
    double sigma_aug = 0.1 * kDefaultSubclusterSigma;
    AdamWConfig opt{1e-4, 0.9, 0.999, 1e-8, 0.01};
    std::uint64_t seed = 0;
    std::size_t width = 64;
    std::size_t blocks = 5;
    bool batch_norm = true;
    /// Per-coordinate weights of the denoising error (empty = all ones). A
    /// projector tuned for one factor of a product latent masks the others.
    std::vector<double> loss_mask;

    void validate(std::size_t n_entries) const {
        if (K < 1 || K + 1 > n_entries) throw std::invalid_argument("tune config: need 1 <= K <= N - 1");
        if (M < 1) throw std::invalid_argument("tune config: M must be at least 1");
        if (lambda1 < 0.0 || lambda2 < 0.0) throw std::invalid_argument("tune config: lambdas must be non-negative");
    }
};

/// Projector output slot j offsets base word `slots[j]` of the prompt.
struct TunedProjector {
    Projector proj;
    std::vector<std::size_t> slots;
};

/// Per-base-word offsets of a prompt with `n_base` base words, zero outside
/// the projector's slots.
inline std::vector<Vector> slot_offsets(const Matrix& out_col, const std::vector<std::size_t>& slots, std::size_t n_base,
                                        std::size_t embed_dim) {
    std::vector<Vector> deltas(n_base, Vector::Zero(static_cast<Eigen::Index>(embed_dim)));
    const auto m = static_cast<Eigen::Index>(embed_dim);
    for (std::size_t j = 0; j < slots.size(); ++j) deltas.at(slots[j]) = out_col.col(0).segment(static_cast<Eigen::Index>(j) * m, m);
    return deltas;
}

/// One tuning batch: the target (an augmented copy) in member 0, K auxiliary
/// samples after it, each with its own noise draw, and one extra noise draw
/// for the average-condition term applied to member `aver_member`.
struct TuneBatch {
    std::vector<Vector> z0;  // K + 1
    std::vector<Vector> h;   // K + 1
    std::vector<int> t;      // K + 1
    std::vector<Vector> eps; // K + 1
    std::size_t aver_member = 0;
    int aver_t = 1;
    Vector aver_eps;
    PromptEmbedding c;       // template prompt
};

inline TuneBatch draw_tune_batch(const BaseSet& bs, const AugmentedTarget& aug, const PromptEmbedding& c,
                                 std::size_t K, const NoiseSchedule& sched, Rng& rng) {
    TuneBatch b;
    b.c = c;
    b.z0.push_back(aug.z[rng.below(aug.z.size())]);
    b.h.push_back(aug.h);
    auto aux = bs.auxiliary_indices();
    for (std::size_t i = 0; i < K; ++i) {
        const auto pick = i + rng.below(aux.size() - i);
        std::swap(aux[i], aux[pick]);
        b.z0.push_back(bs.entries[aux[i]].z0);
        b.h.push_back(bs.entries[aux[i]].h);
    }
    const auto d = b.z0.front().size();
    auto noise = [&] {
        Vector e(d);
        for (Eigen::Index k = 0; k < d; ++k) e[k] = rng.normal();
        return e;
    };
    for (std::size_t i = 0; i <= K; ++i) {
        b.t.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T))));
        b.eps.push_back(noise());
    }
    b.aver_member = static_cast<std::size_t>(rng.below(K + 1));
    b.aver_t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
    b.aver_eps = noise();
    return b;
}

struct TuneLoss {
    double total = 0.0;
    double tar = 0.0;
    double aux = 0.0;
    double aver = 0.0;
    ParamSet grads;
    ProjectorTrace trace;
};

/// L = L_tar + lambda1 L_aux + lambda2 L_aver for one batch, with gradients
/// for the projector only. Each term is the per-sample denoising MSE under
/// the template prompt whose base word(s) are offset by that sample's c_delta
/// (the average offset of the auxiliary members for L_aver).
inline TuneLoss tune_loss(const Denoiser& den, const TunedProjector& tp, const TuneBatch& batch, double lambda1,
                          double lambda2, const NoiseSchedule& sched, NormMode mode = NormMode::Batch,
                          std::span<const double> loss_mask = {}) {
    const auto& proj = tp.proj;
    const std::size_t B = batch.z0.size();
    if (B < 2) throw std::invalid_argument("tune_loss: batch needs a target and at least one auxiliary sample");
    const std::size_t K = B - 1;
    const auto m = static_cast<Eigen::Index>(proj.spec.embed_dim);
    const std::size_t n_base = batch.c.base_indices.size();
    const double inv_tokens = 1.0 / static_cast<double>(batch.c.tokens.size());
    const Vector c_pool = pool_condition(batch.c);

    Matrix H(static_cast<Eigen::Index>(proj.spec.feature_dim), static_cast<Eigen::Index>(B));
    for (std::size_t i = 0; i < B; ++i) H.col(static_cast<Eigen::Index>(i)) = batch.h[i];
    const Matrix C = c_pool.replicate(1, static_cast<Eigen::Index>(B));
    TuneLoss out;
    const Matrix O = projector_forward_batch(proj, H, C, mode, &out.trace);
    const Matrix O_aver = O.rightCols(static_cast<Eigen::Index>(K)).rowwise().mean();

    // Pooled condition after offsetting: pool(c) + (1/L) sum_j delta_j.
    auto offset_cond = [&](const Matrix& col) {
        Vector cond = c_pool;
        for (std::size_t j = 0; j < tp.slots.size(); ++j) {
            if (tp.slots[j] >= n_base) throw std::invalid_argument("tune_loss: projector slot exceeds base words");
            cond += inv_tokens * col.col(0).segment(static_cast<Eigen::Index>(j) * m, m);
        }
        return cond;
    };

    Matrix X(static_cast<Eigen::Index>(den.input_width()), static_cast<Eigen::Index>(B + 1));
    Matrix E(static_cast<Eigen::Index>(den.latent), static_cast<Eigen::Index>(B + 1));
    for (std::size_t i = 0; i < B; ++i) {
        const auto j = static_cast<Eigen::Index>(i);
        den.write_column(X, j, forward_noise(batch.z0[i], batch.t[i], batch.eps[i], sched), batch.t[i],
                         offset_cond(O.col(j)));
        E.col(j) = batch.eps[i];
    }
    const auto ja = static_cast<Eigen::Index>(B);
    den.write_column(X, ja, forward_noise(batch.z0.at(batch.aver_member), batch.aver_t, batch.aver_eps, sched),
                     batch.aver_t, offset_cond(O_aver));
    E.col(ja) = batch.aver_eps;

    MlpTrace dtrace;
    Matrix R = mlp_forward_batch(den.mlp, den.params, X, &dtrace) - E;
    double d = static_cast<double>(den.latent);
    if (!loss_mask.empty()) {
        if (loss_mask.size() != den.latent) throw std::invalid_argument("tune_loss: loss mask has wrong dimension");
        const Eigen::Map<const Vector> w(loss_mask.data(), static_cast<Eigen::Index>(loss_mask.size()));
        d = w.sum();
        if (!(d > 0.0)) throw std::invalid_argument("tune_loss: loss mask is all zero");
        R = (R.array().colwise() * w.array().sqrt()).matrix();
    }
    const Eigen::RowVectorXd mse = R.colwise().squaredNorm() / d;
    out.tar = mse(0);
    out.aux = mse.segment(1, static_cast<Eigen::Index>(K)).mean();
    out.aver = mse(ja);
    out.total = out.tar + lambda1 * out.aux + lambda2 * out.aver;

    Eigen::RowVectorXd weight(static_cast<Eigen::Index>(B + 1));
    weight(0) = 1.0;
    weight.segment(1, static_cast<Eigen::Index>(K)).setConstant(lambda1 / static_cast<double>(K));
    weight(ja) = lambda2;
    const Matrix upstream = (R.array().rowwise() * (2.0 / d * weight).array()).matrix();
    Matrix dX;
    mlp_backward_batch(den.mlp, den.params, dtrace, upstream, nullptr, &dX);
    const Matrix dcond = dX.bottomRows(static_cast<Eigen::Index>(den.embed_dim)) * inv_tokens;

    Matrix G = Matrix::Zero(O.rows(), O.cols());
    for (std::size_t j = 0; j < tp.slots.size(); ++j) {
        const auto r0 = static_cast<Eigen::Index>(j) * m;
        G.middleRows(r0, m) = dcond.leftCols(static_cast<Eigen::Index>(B));
        G.middleRows(r0, m).rightCols(static_cast<Eigen::Index>(K)).colwise() += dcond.col(ja) / static_cast<double>(K);
    }
    out.grads = zeros_like(proj.params);
    projector_backward_batch(proj, out.trace, C, G, mode, out.grads);
    return out;
}

/// c_aver = mean of phi(h_i, c) over the given features.
inline std::vector<Vector> average_condition(const Projector& proj, std::span<const Vector> features, const Vector& pooled_c,
                                             NormMode mode = NormMode::Running) {
    if (features.empty()) throw std::invalid_argument("average_condition: no auxiliary features");
    Matrix H(static_cast<Eigen::Index>(proj.spec.feature_dim), static_cast<Eigen::Index>(features.size()));
    for (std::size_t i = 0; i < features.size(); ++i) H.col(static_cast<Eigen::Index>(i)) = features[i];
    const Matrix O = projector_forward_batch(proj, H, pooled_c.replicate(1, H.cols()), mode);
    const Vector mean = O.rowwise().mean();
    std::vector<Vector> out;
    const auto m = static_cast<Eigen::Index>(proj.spec.embed_dim);
    for (std::size_t j = 0; j < proj.spec.outputs; ++j) out.push_back(mean.segment(static_cast<Eigen::Index>(j) * m, m));
    return out;
}

struct TuneRecord {
    int step = 0;
    double total = 0.0;
    double tar = 0.0;
    double aux = 0.0;
    double aver = 0.0;
};

struct TuneResult {
    TunedProjector tuned;
    std::vector<TuneRecord> curve;
    int stopped_at = 0;
    bool plateaued = false;
};

inline ProjectorSpec projector_spec_for(const Denoiser& den, const TuneConfig& cfg, std::size_t outputs) {
    ProjectorSpec sp;
    sp.feature_dim = den.mlp.layer_widths.at(*den.mlp.feature_layer_index + 1);
    sp.embed_dim = den.embed_dim;
    sp.width = cfg.width;
    sp.blocks = cfg.blocks;
    sp.outputs = outputs;
    sp.batch_norm = cfg.batch_norm;
    return sp;
}

/// One-shot tuning of a fresh projector with the backbone frozen. Each step
/// picks a template, fills it with the base word(s), draws a batch and takes
/// an AdamW step. Stops at max_steps, or (after min_steps) once the moving
/// average of the loss has not improved by plateau_tol for plateau_patience
/// steps.
/// `slots` lists the base words the projector offsets (all by default).
inline TuneResult tune(const Denoiser& den, const Vocabulary& vocab, const BaseSet& bs,
                       const std::vector<std::string>& templates, const TuneConfig& cfg, const NoiseSchedule& sched,
                       std::optional<std::vector<std::size_t>> slots = std::nullopt) {
    if (!bs.target_index) throw std::invalid_argument("tune: base set has no target");
    if (templates.empty()) throw std::invalid_argument("tune: no templates");
    cfg.validate(bs.entries.size());
    const std::size_t n_base = bs.prompt_tar.base_indices.size();
    std::vector<std::size_t> sl;
    if (slots) {
        sl = *slots;
    } else {
        for (std::size_t j = 0; j < n_base; ++j) sl.push_back(j);
    }
    if (sl.empty()) throw std::invalid_argument("tune: projector must offset at least one base word");

    Rng init_rng(cfg.seed, 0x70726f6aULL);
    TuneResult res{{make_projector(projector_spec_for(den, cfg, sl.size()), init_rng), sl}, {}, 0, false};
    Rng aug_rng(cfg.seed, 0x617567ULL);
    const auto aug = augment_target(bs, cfg.M, cfg.sigma_aug, aug_rng);
    AdamWState opt = AdamWState::zeros_like(res.tuned.proj.params);

    std::deque<double> window;
    double window_sum = 0.0;
    double best_ma = std::numeric_limits<double>::infinity();
    int last_improvement = 0;
    for (int step = 0; step < cfg.max_steps; ++step) {
        Rng rng(cfg.seed, (std::uint64_t{2} << 32) + static_cast<std::uint64_t>(step));
        const auto& tmpl = templates[rng.below(templates.size())];
        const auto c = embed_prompt(vocab, with_context(bs.prompt_tar, tmpl));
        const auto batch = draw_tune_batch(bs, aug, c, cfg.K, sched, rng);
        auto loss = tune_loss(den, res.tuned, batch, cfg.lambda1, cfg.lambda2, sched, NormMode::Batch, cfg.loss_mask);
        if (!std::isfinite(loss.total)) throw NumericError("tune: loss is not finite at step " + std::to_string(step));
        adamw_step(res.tuned.proj.params, loss.grads, opt, cfg.opt);
        update_running_stats(res.tuned.proj, loss.trace, static_cast<Eigen::Index>(batch.z0.size()));
        res.curve.push_back({step, loss.total, loss.tar, loss.aux, loss.aver});
        res.stopped_at = step + 1;

        window.push_back(loss.total);
        window_sum += loss.total;
        if (static_cast<int>(window.size()) > cfg.ma_window) {
            window_sum -= window.front();
            window.pop_front();
        }
        if (static_cast<int>(window.size()) == cfg.ma_window) {
            const double ma = window_sum / cfg.ma_window;
            if (ma < best_ma - cfg.plateau_tol) {
                best_ma = ma;
                last_improvement = step;
            } else if (step + 1 >= cfg.min_steps && step - last_improvement >= cfg.plateau_patience) {
                res.plateaued = true;
                break;
            }
        }
    }
    return res;
}

/// Moving average of the total loss over `window` records ending at `end`
/// (exclusive).
inline double loss_moving_average(const std::vector<TuneRecord>& curve, std::size_t end, std::size_t window = 50) {
    if (end == 0 || end > curve.size()) throw std::invalid_argument("loss_moving_average: bad range");
    const std::size_t begin = end > window ? end - window : 0;
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += curve[i].total;
    return s / static_cast<double>(end - begin);
}

} // namespace oneactor
