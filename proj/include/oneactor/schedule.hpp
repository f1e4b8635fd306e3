#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "oneactor/numcore.hpp"

namespace oneactor {

enum class ScheduleKind { LinearBeta, Cosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::LinearBeta ? "linear_beta" : "cosine"; }

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear_beta") return ScheduleKind::LinearBeta;
    if (s == "cosine") return ScheduleKind::Cosine;
    throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

/// Upper bound on any single-step beta.
inline constexpr double kMaxBeta = 0.999;
/// Offset of the cosine schedule.
inline constexpr double kCosineOffset = 0.008;

/// Discretized variance-preserving noise schedule, alpha_bar[0] = 1.
struct NoiseSchedule {
    ScheduleKind kind = ScheduleKind::LinearBeta;
    int T = 0;
    std::vector<double> alpha_bar;

    double ab(int t) const { return alpha_bar.at(static_cast<std::size_t>(t)); }
    double sigma(int t) const { return std::sqrt(1.0 - ab(t)); }
    double beta(int t) const { return 1.0 - ab(t) / ab(t - 1); }

    /// Variance of q(z_{t-1} | z_t, z_0) for adjacent steps.
    double posterior_variance(int t) const { return (1.0 - ab(t - 1)) / (1.0 - ab(t)) * beta(t); }

    void check_step(int t) const {
        if (t < 0 || t > T)
            throw std::invalid_argument("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    }

    bool operator==(const NoiseSchedule&) const = default;
};

/// linear_beta: beta_t linear from 0.1/T to 20/T (the usual 1e-4..0.02 at
/// T = 1000, rescaled to T steps). cosine: alpha_bar from the squared-cosine
/// curve with offset 0.008. Both clip single-step betas at 0.999.
inline NoiseSchedule make_schedule(ScheduleKind kind, int T) {
    if (T < 2) throw std::invalid_argument("make_schedule: T must be at least 2, got " + std::to_string(T));
    NoiseSchedule s{kind, T, std::vector<double>(static_cast<std::size_t>(T) + 1)};
    s.alpha_bar[0] = 1.0;
    const double Td = static_cast<double>(T);
    auto cosine_f = [&](int t) {
        const double c = std::cos((t / Td + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
        return c * c;
    };
    for (int t = 1; t <= T; ++t) {
        double beta;
        if (kind == ScheduleKind::LinearBeta) {
            const double lo = 0.1 / Td;
            const double hi = 20.0 / Td;
            beta = lo + (hi - lo) * (t - 1) / (Td - 1.0);
        } else {
            beta = 1.0 - cosine_f(t) / cosine_f(t - 1);
        }
        beta = std::min(beta, kMaxBeta);
        s.alpha_bar[static_cast<std::size_t>(t)] = s.alpha_bar[static_cast<std::size_t>(t) - 1] * (1.0 - beta);
    }
    return s;
}

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
inline Vector forward_noise(const Vector& z0, int t, const Vector& eps, const NoiseSchedule& sched) {
    sched.check_step(t);
    if (z0.size() != eps.size()) throw std::invalid_argument("forward_noise: z0 and eps differ in length");
    return std::sqrt(sched.ab(t)) * z0 + std::sqrt(1.0 - sched.ab(t)) * eps;
}

/// Timesteps visited by a `steps`-step sampler, indexed by sampling step
/// 1..steps: result[k-1] = round(1 + (steps - k)(T - 1)/(steps - 1)), so step
/// 1 starts at T and the last step is taken at t = 1.
inline std::vector<int> sampling_timesteps(int T, int steps) {
    if (steps < 1 || steps > T)
        throw std::invalid_argument("sampling steps must be in [1, T], got " + std::to_string(steps));
    std::vector<int> ts(static_cast<std::size_t>(steps));
    if (steps == 1) {
        ts[0] = T;
        return ts;
    }
    for (int k = 1; k <= steps; ++k) {
        const double x = 1.0 + static_cast<double>(steps - k) * (T - 1) / static_cast<double>(steps - 1);
        ts[static_cast<std::size_t>(k) - 1] = static_cast<int>(std::lround(x));
    }
    return ts;
}

} // namespace oneactor
