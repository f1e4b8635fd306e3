#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "oneactor/denoiser.hpp"
#include "oneactor/numcore.hpp"
#include "oneactor/projector.hpp"
#include "oneactor/rng.hpp"
#include "oneactor/tune.hpp"

namespace oneactor::testing {

inline constexpr double kFdStep = 1e-5;

/// Central differences of f over every parameter entry, by plain loops.
inline ParamSet fd_gradient(ParamSet& params, const std::function<double()>& f, double h = kFdStep) {
    ParamSet g = params;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].data.size(); ++j) {
            const double x = params[i].data[j];
            params[i].data[j] = x + h;
            const double up = f();
            params[i].data[j] = x - h;
            const double down = f();
            params[i].data[j] = x;
            g[i].data[j] = (up - down) / (2.0 * h);
        }
    }
    return g;
}

/// ||a - b|| / max(||a||, ||b||) over all entries; 0 when both vanish.
inline double relative_error(const ParamSet& a, const ParamSet& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[i].data.size(); ++j) {
            const double x = a[i].data[j], y = b[i].data[j];
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    const double scale = std::sqrt(std::max(na, nb));
    return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

/// Fills every parameter with Normal(0, sd^2) so that zero-initialized blocks
/// take part in gradient checks.
inline void randomize(ParamSet& params, Rng& rng, double sd = 0.5) {
    for (auto& p : params)
        for (double& x : p.data) x = sd * rng.normal();
}

inline Vector random_vector(std::size_t n, Rng& rng, double sd = 1.0) {
    Vector v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = sd * rng.normal();
    return v;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng, double sd = 1.0) {
    Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = sd * rng.normal();
    return m;
}

/// Small random denoiser whose condition columns are non-zero.
inline Denoiser small_denoiser(Rng& rng, std::size_t latent = 2, std::size_t embed = 4, int T = 20,
                               std::vector<std::size_t> hidden = {12, 10}, Activation act = Activation::SiLU) {
    DenoiserArch arch{std::move(hidden), act, 0};
    Denoiser d = make_denoiser(latent, embed, T, arch, rng);
    randomize(d.params, rng, 0.4);
    return d;
}

/// Result of one gradient configuration.
struct GradCheck {
    std::string label;
    double rel_error = 0.0;
};

/// Denoising loss gradient on a random batch.
inline GradCheck check_denoiser_gradient(std::uint64_t seed) {
    Rng rng(seed, 0x64656e);
    const std::size_t latent = 1 + rng.below(3);
    const std::size_t embed = 2 + rng.below(4);
    std::vector<std::size_t> hidden;
    const auto layers = 1 + rng.below(3);
    for (std::size_t l = 0; l < layers; ++l) hidden.push_back(4 + rng.below(10));
    const Activation act = rng.below(2) == 0 ? Activation::SiLU : Activation::Tanh;
    const int T = 10 + static_cast<int>(rng.below(40));
    Denoiser d = small_denoiser(rng, latent, embed, T, hidden, act);
    const auto sched = make_schedule(rng.below(2) == 0 ? ScheduleKind::LinearBeta : ScheduleKind::Cosine, T);
    std::vector<DenoiseExample> batch;
    const auto B = 1 + rng.below(5);
    for (std::size_t b = 0; b < B; ++b)
        batch.push_back({random_vector(latent, rng, 2.0), random_vector(embed, rng), 1 + static_cast<int>(rng.below(T)),
                         random_vector(latent, rng)});
    const auto analytic = denoise_loss(d, batch, sched).grads;
    const auto numeric = fd_gradient(d.params, [&] { return denoise_loss(d, batch, sched).loss; });
    return {"denoiser seed " + std::to_string(seed), relative_error(analytic, numeric)};
}

/// sum(W .* phi(H, C)) for a fixed random W, in the given normalization mode.
inline GradCheck check_projector_gradient(std::uint64_t seed) {
    Rng rng(seed, 0x70726f);
    ProjectorSpec sp;
    sp.feature_dim = 3 + rng.below(6);
    sp.embed_dim = 2 + rng.below(3);
    sp.width = 3 + rng.below(6);
    sp.blocks = 1 + rng.below(3);
    sp.outputs = 1 + rng.below(2);
    sp.batch_norm = rng.below(4) != 0;
    const NormMode mode = rng.below(2) == 0 ? NormMode::Batch : NormMode::Running;
    Projector p = make_projector(sp, rng);
    randomize(p.params, rng, 0.5);
    for (std::size_t r = 0; r < sp.blocks; ++r) {
        p.running_mean[r] = random_vector(sp.width, rng, 0.3);
        p.running_var[r] = random_vector(sp.width, rng).array().square() + 0.5;
    }
    const auto B = 2 + rng.below(4);
    const Matrix H = random_matrix(sp.feature_dim, B, rng);
    const Matrix C = random_matrix(sp.embed_dim, B, rng);
    const Matrix W = random_matrix(sp.output_dim(), B, rng);
    auto value = [&] { return (projector_forward_batch(p, H, C, mode).array() * W.array()).sum(); };
    ProjectorTrace tr;
    projector_forward_batch(p, H, C, mode, &tr);
    ParamSet analytic = zeros_like(p.params);
    projector_backward_batch(p, tr, C, W, mode, analytic);
    const auto numeric = fd_gradient(p.params, value);
    return {"projector seed " + std::to_string(seed) + (mode == NormMode::Batch ? " batch" : " running") +
                (sp.batch_norm ? "" : " no-bn"),
            relative_error(analytic, numeric)};
}

/// Full tuning objective through the frozen denoiser, gradient w.r.t. the
/// projector.
inline GradCheck check_tune_gradient(std::uint64_t seed) {
    Rng rng(seed, 0x74756e);
    const std::size_t latent = 2, embed = 3;
    Denoiser d = small_denoiser(rng, latent, embed, 20, {8, 6});
    const auto sched = make_schedule(ScheduleKind::LinearBeta, 20);
    const std::size_t n_base = 1 + rng.below(2);
    ProjectorSpec sp;
    sp.feature_dim = 8;
    sp.embed_dim = embed;
    sp.width = 5;
    sp.blocks = 2;
    sp.outputs = n_base;
    TunedProjector tp{make_projector(sp, rng), {}};
    for (std::size_t j = 0; j < n_base; ++j) tp.slots.push_back(j);
    randomize(tp.proj.params, rng, 0.5);

    TuneBatch b;
    const std::size_t K = 2 + rng.below(2);
    for (std::size_t i = 0; i <= K; ++i) {
        b.z0.push_back(random_vector(latent * 1, rng, 2.0));
        b.h.push_back(random_vector(sp.feature_dim, rng));
        b.t.push_back(1 + static_cast<int>(rng.below(20)));
        b.eps.push_back(random_vector(latent, rng));
    }
    b.aver_member = rng.below(K + 1);
    b.aver_t = 1 + static_cast<int>(rng.below(20));
    b.aver_eps = random_vector(latent, rng);
    for (std::size_t j = 0; j < n_base + 1; ++j) b.c.tokens.push_back(random_vector(embed, rng));
    for (std::size_t j = 0; j < n_base; ++j) b.c.base_indices.push_back(j);
    std::vector<double> mask;
    if (rng.below(2) == 0) mask = {1.0, 0.0};
    const double l1 = 0.5, l2 = 0.2;
    const auto analytic = tune_loss(d, tp, b, l1, l2, sched, NormMode::Batch, mask).grads;
    const auto numeric = fd_gradient(tp.proj.params, [&] { return tune_loss(d, tp, b, l1, l2, sched, NormMode::Batch, mask).total; });
    return {"tune loss seed " + std::to_string(seed) + (mask.empty() ? "" : " masked"), relative_error(analytic, numeric)};
}

} // namespace oneactor::testing
