#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "oneactor/numcore.hpp"
#include "oneactor/rng.hpp"
#include "oneactor/schedule.hpp"

namespace oneactor {

/// One identity sub-cluster: Normal(mean, var * I) with mixture weight.
struct SubClusterSpec {
    Vector mean;
    double weight = 0.0;
    double var = 0.0;
};

/// A subject's base cluster, made of identity sub-clusters.
struct SubjectSpec {
    std::string token;
    std::vector<SubClusterSpec> subclusters;
};

/// A prompt context translates every sub-cluster of every subject by offset.
struct ContextSpec {
    std::string token;
    Vector offset;
};

/// Hierarchical Gaussian-mixture world with closed-form time marginals.
struct WorldSpec {
    std::size_t latent_dim = 2;
    std::vector<SubjectSpec> subjects;
    std::vector<ContextSpec> contexts;
    std::uint64_t seed = 0;

    const SubjectSpec& subject(const std::string& token) const {
        for (const auto& s : subjects)
            if (s.token == token) return s;
        throw std::invalid_argument("unknown subject token '" + token + "'");
    }

    const ContextSpec& context(const std::string& token) const {
        for (const auto& c : contexts)
            if (c.token == token) return c;
        throw std::invalid_argument("unknown context token '" + token + "'");
    }

    bool has_context(const std::string& token) const {
        return std::any_of(contexts.begin(), contexts.end(), [&](const auto& c) { return c.token == token; });
    }

    /// First context whose offset is exactly zero.
    const ContextSpec& null_context() const {
        for (const auto& c : contexts)
            if (c.offset.isZero(0.0)) return c;
        throw std::invalid_argument("world has no null context");
    }

    void validate() const {
        if (latent_dim == 0) throw std::invalid_argument("world: latent_dim must be positive");
        if (subjects.empty()) throw std::invalid_argument("world: no subjects");
        for (const auto& s : subjects) {
            if (s.subclusters.empty()) throw std::invalid_argument("world: subject '" + s.token + "' has no subclusters");
            double total = 0.0;
            for (const auto& k : s.subclusters) {
                if (static_cast<std::size_t>(k.mean.size()) != latent_dim)
                    throw std::invalid_argument("world: subject '" + s.token + "' has a mean of wrong dimension");
                if (!(k.weight > 0.0)) throw std::invalid_argument("world: subject '" + s.token + "' has weight <= 0");
                if (!(k.var > 0.0)) throw std::invalid_argument("world: subject '" + s.token + "' has var <= 0");
                total += k.weight;
            }
            if (std::abs(total - 1.0) > 1e-9)
                throw std::invalid_argument("world: weights of subject '" + s.token + "' do not sum to 1");
        }
        for (const auto& c : contexts)
            if (static_cast<std::size_t>(c.offset.size()) != latent_dim)
                throw std::invalid_argument("world: context '" + c.token + "' has an offset of wrong dimension");
        null_context();
    }
};

inline constexpr double kDefaultSubclusterRadius = 4.0;
inline constexpr double kDefaultSubclusterSigma = 0.5;

/// Two subjects, centred at (-5, 0) and (5, 0), each with four equal-weight
/// sub-clusters on a circle of radius 4 (sigma_sub = 0.5), plus five contexts:
/// the null context "plain" and four offsets of norm in [0.5, 1]. The seed
/// sets the sub-cluster phase of each subject and the context directions.
inline WorldSpec make_default_world(std::uint64_t seed) {
    Rng rng(seed, 0x776f726c64ULL);
    WorldSpec w;
    w.latent_dim = 2;
    w.seed = seed;
    const std::vector<std::pair<std::string, double>> subjects{{"hobbit", -5.0}, {"robot", 5.0}};
    for (const auto& [token, cx] : subjects) {
        SubjectSpec s{token, {}};
        const double phase = rng.uniform() * std::numbers::pi / 2.0;
        for (int k = 0; k < 4; ++k) {
            const double a = phase + k * std::numbers::pi / 2.0;
            Vector mean(2);
            mean << cx + kDefaultSubclusterRadius * std::cos(a), kDefaultSubclusterRadius * std::sin(a);
            s.subclusters.push_back({mean, 0.25, kDefaultSubclusterSigma * kDefaultSubclusterSigma});
        }
        w.subjects.push_back(std::move(s));
    }
    w.contexts.push_back({"plain", Vector::Zero(2)});
    for (const char* token : {"street", "forest", "beach", "snow"}) {
        const double a = rng.uniform() * 2.0 * std::numbers::pi;
        const double r = 0.5 + 0.5 * rng.uniform();
        Vector off(2);
        off << r * std::cos(a), r * std::sin(a);
        w.contexts.push_back({token, off});
    }
    return w;
}

/// Draws z0 ~ Normal(mean_k + offset, var_k I), k drawn from the weights
/// unless forced.
struct WorldSample {
    Vector z0;
    int subcluster = 0;
};

inline WorldSample sample_world(const WorldSpec& world, const std::string& subject, const std::string& context,
                                Rng& rng, std::optional<int> subcluster = std::nullopt) {
    const auto& s = world.subject(subject);
    const auto& c = world.context(context);
    int k;
    if (subcluster) {
        if (*subcluster < 0 || static_cast<std::size_t>(*subcluster) >= s.subclusters.size())
            throw std::invalid_argument("sample_world: subcluster index out of range");
        k = *subcluster;
    } else {
        double u = rng.uniform();
        k = static_cast<int>(s.subclusters.size()) - 1;
        for (std::size_t i = 0; i < s.subclusters.size(); ++i) {
            if (u < s.subclusters[i].weight) {
                k = static_cast<int>(i);
                break;
            }
            u -= s.subclusters[i].weight;
        }
    }
    const auto& sc = s.subclusters[static_cast<std::size_t>(k)];
    Vector z(world.latent_dim);
    const double sd = std::sqrt(sc.var);
    for (std::size_t i = 0; i < world.latent_dim; ++i) z[static_cast<Eigen::Index>(i)] = rng.normal();
    return {sc.mean + c.offset + sd * z, k};
}

// ---------------------------------------------------------------------------
// Time-t marginals. Under the forward process each component k becomes
// Normal(sqrt(ab_t)(mean_k + offset), (ab_t var_k + 1 - ab_t) I).

struct ComponentTerms {
    std::vector<double> log_joint;  // log w_k + log N_k(z)
    std::vector<Vector> score;      // grad_z log N_k(z)
};

inline ComponentTerms component_terms(const WorldSpec& world, const std::string& subject, const std::string& context,
                                      const Vector& z, int t, const NoiseSchedule& sched) {
    sched.check_step(t);
    if (static_cast<std::size_t>(z.size()) != world.latent_dim)
        throw std::invalid_argument("world: latent vector has wrong dimension");
    const auto& s = world.subject(subject);
    const auto& c = world.context(context);
    const double ab = sched.ab(t);
    const double root = std::sqrt(ab);
    const double d = static_cast<double>(world.latent_dim);
    ComponentTerms out;
    for (const auto& k : s.subclusters) {
        const double var = ab * k.var + (1.0 - ab);
        const Vector diff = z - root * (k.mean + c.offset);
        out.log_joint.push_back(std::log(k.weight) - 0.5 * d * std::log(2.0 * std::numbers::pi * var) -
                                diff.squaredNorm() / (2.0 * var));
        out.score.push_back(-diff / var);
    }
    return out;
}

inline double log_sum_exp(const std::vector<double>& xs) {
    const double m = *std::max_element(xs.begin(), xs.end());
    double acc = 0.0;
    for (double x : xs) acc += std::exp(x - m);
    return m + std::log(acc);
}

inline std::vector<double> softmax(const std::vector<double>& xs) {
    const double lse = log_sum_exp(xs);
    std::vector<double> p(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) p[i] = std::exp(xs[i] - lse);
    return p;
}

/// log p_t(z | subject, context).
inline double log_density_t(const WorldSpec& world, const std::string& subject, const std::string& context,
                            const Vector& z, int t, const NoiseSchedule& sched) {
    return log_sum_exp(component_terms(world, subject, context, z, t, sched).log_joint);
}

/// p_t(S_k | z): responsibilities of the sub-clusters.
inline std::vector<double> cluster_posterior_t(const WorldSpec& world, const std::string& subject,
                                               const std::string& context, const Vector& z, int t,
                                               const NoiseSchedule& sched) {
    return softmax(component_terms(world, subject, context, z, t, sched).log_joint);
}

inline Vector posterior_weighted_score(const ComponentTerms& terms) {
    const auto r = softmax(terms.log_joint);
    Vector s = Vector::Zero(terms.score.front().size());
    for (std::size_t k = 0; k < r.size(); ++k) s += r[k] * terms.score[k];
    return s;
}

/// grad_z log p_t(z | subject, context).
inline Vector score_t(const WorldSpec& world, const std::string& subject, const std::string& context, const Vector& z,
                      int t, const NoiseSchedule& sched) {
    return posterior_weighted_score(component_terms(world, subject, context, z, t, sched));
}

/// grad_z log p_t(z | S_k): the score of component k alone.
inline Vector conditional_score_t(const WorldSpec& world, const std::string& subject, const std::string& context,
                                  const Vector& z, int t, int k, const NoiseSchedule& sched) {
    return component_terms(world, subject, context, z, t, sched).score.at(static_cast<std::size_t>(k));
}

/// grad_z log p_t(S_k | z) for every k, from the log-sum-exp identity
/// grad log p(S_k | z) = grad log N_k(z) - grad log p(z).
inline std::vector<Vector> cluster_log_posterior_grads(const WorldSpec& world, const std::string& subject,
                                                       const std::string& context, const Vector& z, int t,
                                                       const NoiseSchedule& sched) {
    const auto terms = component_terms(world, subject, context, z, t, sched);
    const Vector s = posterior_weighted_score(terms);
    std::vector<Vector> g;
    for (const auto& sk : terms.score) g.push_back(sk - s);
    return g;
}

/// Exact cluster-guided noise prediction with a perfect model:
///   -sigma_t [ grad log p + eta1 grad log p(S_tar|z) - eta2 sum_{i != tar} grad log p(S_i|z) ].
/// Evaluated as (1 - eta1 + eta2 n_aux) s + eta1 s_tar - eta2 sum s_i, which
/// is the same expression regrouped so that the eta1 = 1, eta2 = 0 case
/// reproduces the conditional score bit for bit.
inline Vector oracle_guided_score(const WorldSpec& world, const std::string& subject, const std::string& context,
                                  const Vector& z, int t, int target_k, double eta1, double eta2,
                                  const NoiseSchedule& sched) {
    const auto terms = component_terms(world, subject, context, z, t, sched);
    if (target_k < 0 || static_cast<std::size_t>(target_k) >= terms.score.size())
        throw std::invalid_argument("oracle_guided_score: target sub-cluster out of range");
    const Vector s = posterior_weighted_score(terms);
    Vector aux_sum = Vector::Zero(s.size());
    double n_aux = 0.0;
    for (std::size_t k = 0; k < terms.score.size(); ++k) {
        if (static_cast<int>(k) == target_k) continue;
        aux_sum += terms.score[k];
        n_aux += 1.0;
    }
    const Vector guided = (1.0 - eta1 + eta2 * n_aux) * s + eta1 * terms.score[static_cast<std::size_t>(target_k)] -
                          eta2 * aux_sum;
    return -sched.sigma(t) * guided;
}

/// Index of the most probable sub-cluster at t = 0, lowest index on ties.
inline int assign_subcluster(const WorldSpec& world, const std::string& subject, const std::string& context,
                             const Vector& z0) {
    const auto& s = world.subject(subject);
    const auto& c = world.context(context);
    std::vector<double> lj;
    const double d = static_cast<double>(world.latent_dim);
    for (const auto& k : s.subclusters) {
        const Vector diff = z0 - (k.mean + c.offset);
        lj.push_back(std::log(k.weight) - 0.5 * d * std::log(2.0 * std::numbers::pi * k.var) -
                     diff.squaredNorm() / (2.0 * k.var));
    }
    return static_cast<int>(std::max_element(lj.begin(), lj.end()) - lj.begin());
}

// ---------------------------------------------------------------------------
// Product world for multi-subject prompts: the latent is the concatenation of
// one independent factor per subject, all drawn from the same base world
// under a shared context.

struct ProductWorld {
    WorldSpec base;
    std::vector<std::string> subjects;

    std::size_t latent_dim() const { return base.latent_dim * subjects.size(); }
    std::size_t factor_dim() const { return base.latent_dim; }

    Vector factor(const Vector& z, std::size_t j) const {
        return z.segment(static_cast<Eigen::Index>(j * factor_dim()), static_cast<Eigen::Index>(factor_dim()));
    }
};

struct ProductSample {
    Vector z0;
    std::vector<int> subclusters;
};

inline ProductSample sample_product(const ProductWorld& pw, const std::string& context, Rng& rng) {
    ProductSample out{Vector(static_cast<Eigen::Index>(pw.latent_dim())), {}};
    for (std::size_t j = 0; j < pw.subjects.size(); ++j) {
        auto s = sample_world(pw.base, pw.subjects[j], context, rng);
        out.z0.segment(static_cast<Eigen::Index>(j * pw.factor_dim()), static_cast<Eigen::Index>(pw.factor_dim())) = s.z0;
        out.subclusters.push_back(s.subcluster);
    }
    return out;
}

inline std::vector<int> assign_product(const ProductWorld& pw, const std::string& context, const Vector& z0) {
    std::vector<int> ks;
    for (std::size_t j = 0; j < pw.subjects.size(); ++j)
        ks.push_back(assign_subcluster(pw.base, pw.subjects[j], context, pw.factor(z0, j)));
    return ks;
}

} // namespace oneactor
