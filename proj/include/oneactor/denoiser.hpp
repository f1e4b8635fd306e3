#pragma once

#include <cmath>
#include <concepts>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "oneactor/numcore.hpp"
#include "oneactor/schedule.hpp"

namespace oneactor {

inline constexpr std::size_t kTimeEmbedDim = 8;

/// Sinusoidal features of t/T: sin and cos at frequencies (pi/2) 2^k.
inline Vector time_embedding(int t, int T, std::size_t dim = kTimeEmbedDim) {
    Vector e(static_cast<Eigen::Index>(dim));
    const double x = static_cast<double>(t) / static_cast<double>(T);
    for (std::size_t k = 0; k < dim / 2; ++k) {
        const double f = std::numbers::pi / 2.0 * std::ldexp(1.0, static_cast<int>(k));
        e[static_cast<Eigen::Index>(2 * k)] = std::sin(f * x);
        e[static_cast<Eigen::Index>(2 * k + 1)] = std::cos(f * x);
    }
    return e;
}

/// Anything that predicts noise for a batch of latents (columns) at a shared
/// timestep and pooled condition.
template <class M>
concept NoiseModel = requires(const M& m, const Matrix& z, int t, const Vector& c) {
    { m.predict(z, t, c) } -> std::convertible_to<Matrix>;
    { m.latent_dim() } -> std::convertible_to<std::size_t>;
};

/// Conditional noise-prediction network. Input column layout is
/// [z_t ; time embedding ; pooled condition].
struct Denoiser {
    MlpSpec mlp;
    ParamSet params;
    std::size_t latent = 2;
    std::size_t embed_dim = 8;
    int T = 100;

    std::size_t latent_dim() const { return latent; }
    std::size_t input_width() const { return latent + kTimeEmbedDim + embed_dim; }

    void validate() const {
        validate_mlp_params(mlp, params);
        if (mlp.input_width() != input_width())
            throw std::invalid_argument("denoiser: network input width does not equal latent + time + embed dims");
        if (mlp.output_width() != latent) throw std::invalid_argument("denoiser: network output width must be latent_dim");
        if (!mlp.feature_layer_index) throw std::invalid_argument("denoiser: no feature layer");
    }

    void write_column(Matrix& x, Eigen::Index col, const Vector& z, int t, const Vector& c) const {
        if (static_cast<std::size_t>(z.size()) != latent) throw std::invalid_argument("denoiser: latent has wrong dimension");
        if (static_cast<std::size_t>(c.size()) != embed_dim)
            throw std::invalid_argument("denoiser: condition has wrong dimension");
        const auto L = static_cast<Eigen::Index>(latent);
        const auto E = static_cast<Eigen::Index>(kTimeEmbedDim);
        x.col(col).head(L) = z;
        x.col(col).segment(L, E) = time_embedding(t, T);
        x.col(col).tail(static_cast<Eigen::Index>(embed_dim)) = c;
    }

    Matrix inputs(const Matrix& z, int t, const Vector& c) const {
        Matrix x(static_cast<Eigen::Index>(input_width()), z.cols());
        for (Eigen::Index j = 0; j < z.cols(); ++j) write_column(x, j, z.col(j), t, c);
        return x;
    }

    Matrix predict(const Matrix& z, int t, const Vector& c) const {
        return mlp_forward_batch(mlp, params, inputs(z, t, c));
    }

    Vector predict_one(const Vector& z, int t, const Vector& c) const { return predict(Matrix(z), t, c).col(0); }

    /// Activation of the feature layer at (z, t, c): the "h" handed to the
    /// projector.
    Vector features(const Vector& z, int t, const Vector& c) const {
        MlpTrace trace;
        mlp_forward_batch(mlp, params, inputs(Matrix(z), t, c), &trace);
        return trace.post.at(*mlp.feature_layer_index + 1).col(0);
    }
};

struct DenoiserArch {
    std::vector<std::size_t> hidden{128, 128, 128};
    Activation activation = Activation::SiLU;
    std::size_t feature_layer = 1;
};

/// Glorot-initialized denoiser. The first-layer columns reading the
/// condition start at zero, so a network that never sees a non-empty
/// condition ignores it exactly.
inline Denoiser make_denoiser(std::size_t latent_dim, std::size_t embed_dim, int T, const DenoiserArch& arch, Rng& rng) {
    Denoiser d;
    d.latent = latent_dim;
    d.embed_dim = embed_dim;
    d.T = T;
    d.mlp.layer_widths.push_back(d.input_width());
    for (std::size_t w : arch.hidden) d.mlp.layer_widths.push_back(w);
    d.mlp.layer_widths.push_back(latent_dim);
    d.mlp.activation = arch.activation;
    d.mlp.feature_layer_index = arch.feature_layer;
    d.params = init_mlp(d.mlp, rng);
    auto w0 = as_matrix(d.params[0]);
    w0.rightCols(static_cast<Eigen::Index>(embed_dim)).setZero();
    d.validate();
    return d;
}

/// One training example of the denoising objective.
struct DenoiseExample {
    Vector z0;
    Vector cond;
    int t = 1;
    Vector eps;
};

struct LossAndGrads {
    double loss = 0.0;
    ParamSet grads;
};

/// Mean over the batch and latent coordinates of (eps - eps_theta(z_t, t, c))^2,
/// with z_t = forward_noise(z0, t, eps), and its gradient with respect to the
/// denoiser parameters.
inline LossAndGrads denoise_loss(const Denoiser& den, std::span<const DenoiseExample> batch, const NoiseSchedule& sched) {
    if (batch.empty()) throw std::invalid_argument("denoise_loss: empty batch");
    const auto B = static_cast<Eigen::Index>(batch.size());
    Matrix x(static_cast<Eigen::Index>(den.input_width()), B);
    Matrix eps(static_cast<Eigen::Index>(den.latent), B);
    for (Eigen::Index j = 0; j < B; ++j) {
        const auto& ex = batch[static_cast<std::size_t>(j)];
        den.write_column(x, j, forward_noise(ex.z0, ex.t, ex.eps, sched), ex.t, ex.cond);
        eps.col(j) = ex.eps;
    }
    MlpTrace trace;
    const Matrix pred = mlp_forward_batch(den.mlp, den.params, x, &trace);
    const Matrix resid = pred - eps;
    const double n = static_cast<double>(resid.size());
    LossAndGrads out{resid.squaredNorm() / n, zeros_like(den.params)};
    mlp_backward_batch(den.mlp, den.params, trace, (2.0 / n) * resid, &out.grads, nullptr);
    return out;
}

/// Classifier-free guidance eps(c_empty) + s (eps(c) - eps(c_empty)), evaluated
/// as (1 - s) eps(c_empty) + s eps(c) so that s = 0 and s = 1 return the
/// unconditional and conditional predictions bit for bit.
inline Matrix cfg_combine(const Matrix& uncond, const Matrix& cond, double s) { return (1.0 - s) * uncond + s * cond; }

template <NoiseModel M>
Matrix cfg_predict(const M& model, const Matrix& z, int t, const Vector& c, const Vector& c_empty, double s) {
    const Matrix e_empty = model.predict(z, t, c_empty);
    const Matrix e_cond = model.predict(z, t, c);
    return cfg_combine(e_empty, e_cond, s);
}

} // namespace oneactor
