#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "oneactor/errors.hpp"
#include "oneactor/numcore.hpp"
#include "oneactor/rng.hpp"
#include "oneactor/schedule.hpp"

namespace oneactor {

inline constexpr int kDefaultSamplingSteps = 30;

/// Noise prediction for a batch of chains (columns) at timestep t during
/// sampling step `step` (1-based, step 1 is the noisiest).
using BatchPredictFn = std::function<Matrix(const Matrix& z, int t, int step)>;

/// Ancestral (DDPM) sampling over the strided timesteps of
/// sampling_timesteps(T, steps). Chain j draws all of its noise from
/// rngs[j]. If `trajectory` is given it receives z_T, ..., z_0 (steps + 1
/// states).
inline Matrix run_sampler(const BatchPredictFn& predict, const NoiseSchedule& sched, int steps, std::span<Rng> rngs,
                          std::size_t latent_dim, std::vector<Matrix>* trajectory = nullptr) {
    const auto ts = sampling_timesteps(sched.T, steps);
    const auto d = static_cast<Eigen::Index>(latent_dim);
    const auto n = static_cast<Eigen::Index>(rngs.size());
    Matrix z(d, n);
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < d; ++i) z(i, j) = rngs[static_cast<std::size_t>(j)].normal();
    if (trajectory) {
        trajectory->clear();
        trajectory->push_back(z);
    }
    for (int k = 1; k <= steps; ++k) {
        const int t = ts[static_cast<std::size_t>(k) - 1];
        const int s = k < steps ? ts[static_cast<std::size_t>(k)] : 0;
        const double ab_t = sched.ab(t);
        const double ab_s = sched.ab(s);
        const Matrix eps = predict(z, t, k);
        if (eps.rows() != d || eps.cols() != n)
            throw std::invalid_argument("sampler: prediction has wrong shape at step " + std::to_string(k));
        const double ratio = ab_t / ab_s;
        const Matrix x0 = (z - std::sqrt(1.0 - ab_t) * eps) / std::sqrt(ab_t);
        const double c0 = std::sqrt(ab_s) * (1.0 - ratio) / (1.0 - ab_t);
        const double ct = std::sqrt(ratio) * (1.0 - ab_s) / (1.0 - ab_t);
        z = c0 * x0 + ct * z;
        if (s > 0) {
            const double sd = std::sqrt((1.0 - ab_s) / (1.0 - ab_t) * (1.0 - ratio));
            for (Eigen::Index j = 0; j < n; ++j)
                for (Eigen::Index i = 0; i < d; ++i) z(i, j) += sd * rngs[static_cast<std::size_t>(j)].normal();
        }
        if (!z.allFinite()) throw NumericError("sampler: non-finite state at step " + std::to_string(k));
        if (trajectory) trajectory->push_back(z);
    }
    return z;
}

/// Independent chains first_chain .. first_chain + n - 1; chain j uses the
/// stream Rng(seed, j).
inline Matrix sample_chains(const BatchPredictFn& predict, const NoiseSchedule& sched, int steps, std::uint64_t seed,
                            std::size_t n_chains, std::size_t latent_dim, std::vector<Matrix>* trajectory = nullptr,
                            std::uint64_t first_chain = 0) {
    std::vector<Rng> rngs;
    rngs.reserve(n_chains);
    for (std::size_t j = 0; j < n_chains; ++j) rngs.emplace_back(seed, first_chain + j);
    return run_sampler(predict, sched, steps, rngs, latent_dim, trajectory);
}

/// Single chain; returns the full trajectory z_T, ..., z_0.
inline std::vector<Vector> sample(const std::function<Vector(const Vector&, int)>& predict, const NoiseSchedule& sched,
                                  int steps, Rng& rng, std::size_t latent_dim) {
    std::vector<Matrix> traj;
    run_sampler([&](const Matrix& z, int t, int) { return Matrix(predict(z.col(0), t)); }, sched, steps,
                std::span<Rng>(&rng, 1), latent_dim, &traj);
    std::vector<Vector> out;
    for (const auto& m : traj) out.push_back(m.col(0));
    return out;
}

} // namespace oneactor
