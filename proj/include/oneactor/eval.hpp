#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "oneactor/infer.hpp"
#include "oneactor/rng.hpp"
#include "oneactor/world.hpp"

namespace oneactor {

/// Fraction of samples whose sub-cluster equals target_k.
inline double capture_rate(const Matrix& samples, const WorldSpec& world, const std::string& subject,
                           const std::string& context, int target_k) {
    if (samples.cols() == 0) throw std::invalid_argument("capture_rate: no samples");
    Eigen::Index hits = 0;
    for (Eigen::Index j = 0; j < samples.cols(); ++j)
        hits += assign_subcluster(world, subject, context, samples.col(j)) == target_k;
    return static_cast<double>(hits) / static_cast<double>(samples.cols());
}

/// Capture of subject factor `factor` from precomputed assignments.
inline double capture_rate(const SampleSet& s, std::size_t factor, int target_k) {
    if (s.assigned.empty()) throw std::invalid_argument("capture_rate: no samples");
    std::size_t hits = 0;
    for (const auto& a : s.assigned) hits += a.at(factor) == target_k;
    return static_cast<double>(hits) / static_cast<double>(s.assigned.size());
}

/// Mean distance of factor `factor` of every sample to the context-shifted
/// target sub-cluster mean.
inline double consistency_distance(const SampleSet& s, const WorldSpec& world, std::size_t factor, int target_k) {
    if (s.z0.cols() == 0) throw std::invalid_argument("consistency: no samples");
    const auto subjects = base_subjects(s.prompt);
    const auto& ctx = context_of_token(world, context_token_of(s.prompt));
    const Vector centre = world.subject(subjects.at(factor)).subclusters.at(static_cast<std::size_t>(target_k)).mean + ctx.offset;
    const auto d = static_cast<Eigen::Index>(world.latent_dim);
    double acc = 0.0;
    for (Eigen::Index j = 0; j < s.z0.cols(); ++j)
        acc += (s.z0.col(j).segment(static_cast<Eigen::Index>(factor) * d, d) - centre).norm();
    return acc / static_cast<double>(s.z0.cols());
}

/// Mean pairwise distance (factor `factor`) among samples captured by the
/// target sub-cluster; 0 when fewer than two are captured.
inline double diversity_distance(const SampleSet& s, const WorldSpec& world, std::size_t factor, int target_k) {
    const auto d = static_cast<Eigen::Index>(world.latent_dim);
    std::vector<Vector> in;
    for (Eigen::Index j = 0; j < s.z0.cols(); ++j)
        if (s.assigned[static_cast<std::size_t>(j)].at(factor) == target_k)
            in.push_back(s.z0.col(j).segment(static_cast<Eigen::Index>(factor) * d, d));
    if (in.size() < 2) return 0.0;
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < in.size(); ++a)
        for (std::size_t b = a + 1; b < in.size(); ++b, ++pairs) acc += (in[a] - in[b]).norm();
    return acc / static_cast<double>(pairs);
}

/// One (seed, context) cell of an evaluation.
struct EvalRow {
    std::string axis_value;
    std::uint64_t seed = 0;
    std::string context;
    double capture = 0.0;
    double consistency = 0.0;
    double diversity = 0.0;
    bool operator==(const EvalRow&) const = default;
};

struct ContextSummary {
    std::string context;
    double capture_mean = 0.0;
    double capture_std = 0.0;
    double consistency = 0.0;
    double diversity = 0.0;
    bool operator==(const ContextSummary&) const = default;
};

struct EvalReport {
    std::string subject;
    std::size_t factor = 0;
    int target_k = 0;
    std::size_t n_samples = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<std::string> contexts;
    GuidanceConfig gcfg;
    bool guided = true;
    std::vector<EvalRow> rows;
    std::vector<ContextSummary> per_context;
    double mean_capture = 0.0;
    bool operator==(const EvalReport&) const = default;
};

/// Seed of the sampling chains for (seed, context index).
inline std::uint64_t eval_chain_seed(std::uint64_t seed, std::size_t context_index) {
    return splitmix64(seed ^ (0x6576616cULL + static_cast<std::uint64_t>(context_index)));
}

/// Everything needed to sample the tuned single-subject pipeline.
struct Pipeline {
    const Denoiser& den;
    const TunedProjector& tuned;
    const BaseSet& base;
    const WorldSpec& world;
    const Vocabulary& vocab;
    const NoiseSchedule& sched;

    std::string subject() const { return base_subjects(base.prompt_tar).at(0); }
    int target_k() const { return base.target().assigned.at(0); }
};

/// Draws one sample set for a prompt with a given chain seed.
using PromptSampler = std::function<SampleSet(const Prompt&, std::uint64_t)>;

inline void summarize(EvalReport& r) {
    r.per_context.clear();
    double total = 0.0;
    for (const auto& ctx : r.contexts) {
        ContextSummary cs{ctx, 0.0, 0.0, 0.0, 0.0};
        std::vector<double> caps;
        for (const auto& row : r.rows) {
            if (row.context != ctx) continue;
            caps.push_back(row.capture);
            cs.consistency += row.consistency;
            cs.diversity += row.diversity;
        }
        const double n = static_cast<double>(caps.size());
        for (double c : caps) cs.capture_mean += c;
        cs.capture_mean /= n;
        for (double c : caps) cs.capture_std += (c - cs.capture_mean) * (c - cs.capture_mean);
        cs.capture_std = caps.size() > 1 ? std::sqrt(cs.capture_std / (n - 1.0)) : 0.0;
        cs.consistency /= n;
        cs.diversity /= n;
        total += cs.capture_mean;
        r.per_context.push_back(cs);
    }
    r.mean_capture = total / static_cast<double>(r.contexts.size());
}

/// Runs `sampler` once per (seed, context) on the prompt [subject..., context]
/// obtained from `prompt` and aggregates capture of factor `factor`.
inline EvalReport evaluate_with(const PromptSampler& sampler, const WorldSpec& world, const Prompt& prompt,
                                std::size_t factor, int target_k, std::span<const std::string> contexts,
                                std::size_t n_samples, std::span<const std::uint64_t> seeds, const std::string& axis_value = "") {
    if (n_samples == 0) throw std::invalid_argument("evaluate: n_samples must be positive");
    if (contexts.empty()) throw std::invalid_argument("evaluate: no contexts");
    if (seeds.empty()) throw std::invalid_argument("evaluate: no seeds");
    EvalReport r;
    r.subject = base_subjects(prompt).at(factor);
    r.factor = factor;
    r.target_k = target_k;
    r.n_samples = n_samples;
    r.seeds.assign(seeds.begin(), seeds.end());
    r.contexts.assign(contexts.begin(), contexts.end());
    for (std::uint64_t seed : seeds) {
        for (std::size_t ci = 0; ci < contexts.size(); ++ci) {
            const Prompt p = with_context(prompt, contexts[ci]);
            const auto s = sampler(p, eval_chain_seed(seed, ci));
            if (static_cast<std::size_t>(s.z0.cols()) != n_samples)
                throw std::invalid_argument("evaluate: sampler returned the wrong number of samples");
            r.rows.push_back({axis_value, seed, contexts[ci], capture_rate(s, factor, target_k),
                              consistency_distance(s, world, factor, target_k), diversity_distance(s, world, factor, target_k)});
        }
    }
    summarize(r);
    return r;
}

inline std::vector<std::string> context_tokens(const WorldSpec& world) {
    std::vector<std::string> out;
    for (const auto& c : world.contexts) out.push_back(c.token);
    return out;
}

/// Cluster-guided capture of the tuned pipeline's target.
inline EvalReport evaluate(const Pipeline& pl, std::span<const std::string> contexts, const GuidanceConfig& g,
                           std::size_t n_samples, std::span<const std::uint64_t> seeds, const std::string& axis_value = "") {
    auto r = evaluate_with(
        [&](const Prompt& p, std::uint64_t s) {
            return sample_consistent(pl.den, pl.tuned, pl.base, pl.world, pl.vocab, p, g, n_samples, pl.sched, s);
        },
        pl.world, pl.base.prompt_tar, 0, pl.target_k(), contexts, n_samples, seeds, axis_value);
    r.gcfg = g;
    return r;
}

/// Same protocol without the projector: CFG at `scale` on the raw prompt.
inline EvalReport evaluate_unguided(const Pipeline& pl, std::span<const std::string> contexts, std::size_t n_samples,
                                    std::span<const std::uint64_t> seeds, double scale = 1.0, int steps = kDefaultSamplingSteps) {
    auto r = evaluate_with(
        [&](const Prompt& p, std::uint64_t s) {
            return sample_unguided(pl.den, pl.world, pl.vocab, p, n_samples, pl.sched, s, scale, steps);
        },
        pl.world, pl.base.prompt_tar, 0, pl.target_k(), contexts, n_samples, seeds, "unguided");
    r.guided = false;
    r.gcfg.steps = steps;
    r.gcfg.fallback_scale = scale;
    return r;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { V, Eta1, Eta2, Window };

inline std::string to_string(SweepAxis a) {
    switch (a) {
    case SweepAxis::V: return "v";
    case SweepAxis::Eta1: return "eta1";
    case SweepAxis::Eta2: return "eta2";
    case SweepAxis::Window: return "window";
    }
    return "?";
}

inline SweepAxis sweep_axis_from_string(const std::string& s) {
    if (s == "v") return SweepAxis::V;
    if (s == "eta1") return SweepAxis::Eta1;
    if (s == "eta2") return SweepAxis::Eta2;
    if (s == "window") return SweepAxis::Window;
    throw std::invalid_argument("unknown sweep axis '" + s + "' (expected v, eta1, eta2 or window)");
}

/// Difference eta1 - eta2 held fixed along the eta2 axis.
inline constexpr double kEtaGap = 7.5;

struct SweepSpec {
    SweepAxis axis = SweepAxis::V;
    /// Numbers for v/eta1/eta2, "a-b" step ranges for window.
    std::vector<std::string> values;
    std::size_t repeats = 3;

    void validate() const {
        if (values.empty()) throw std::invalid_argument("sweep: no values");
        if (repeats < 1) throw std::invalid_argument("sweep: repeats must be at least 1");
    }
};

inline std::vector<std::string> default_sweep_values(SweepAxis a) {
    switch (a) {
    case SweepAxis::V: return {"0", "0.4", "0.8"};
    case SweepAxis::Eta1: return {"0", "2.5", "5", "7.5", "8.5"};
    case SweepAxis::Eta2: return {"0", "0.5", "1", "2"};
    case SweepAxis::Window: return {"1-10", "1-20", "1-30", "11-30", "21-30"};
    }
    return {};
}

inline double parse_number(const std::string& s) {
    std::size_t pos = 0;
    double x = 0.0;
    try {
        x = std::stod(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos != s.size() || s.empty()) throw std::invalid_argument("not a number: '" + s + "'");
    return x;
}

/// Guidance settings of one sweep point.
inline GuidanceConfig sweep_point(const GuidanceConfig& base, SweepAxis axis, const std::string& value) {
    GuidanceConfig g = base;
    switch (axis) {
    case SweepAxis::V: g.v = parse_number(value); break;
    case SweepAxis::Eta1: g.eta1 = parse_number(value); break;
    case SweepAxis::Eta2:
        g.eta2 = parse_number(value);
        g.eta1 = kEtaGap + g.eta2;
        break;
    case SweepAxis::Window: {
        const auto dash = value.find('-');
        if (dash == std::string::npos) throw std::invalid_argument("window value must look like a-b, got '" + value + "'");
        g.window_begin = static_cast<int>(parse_number(value.substr(0, dash)));
        g.window_end = static_cast<int>(parse_number(value.substr(dash + 1)));
        break;
    }
    }
    g.validate();
    return g;
}

struct SweepTable {
    SweepAxis axis = SweepAxis::V;
    std::vector<std::string> values;
    std::vector<EvalReport> reports;

    double mean_capture(const std::string& value) const {
        for (std::size_t i = 0; i < values.size(); ++i)
            if (values[i] == value) return reports[i].mean_capture;
        throw std::invalid_argument("sweep table has no value '" + value + "'");
    }
    bool operator==(const SweepTable&) const = default;
};

/// Seeds used by a sweep with `repeats` repeats.
inline std::vector<std::uint64_t> sweep_seeds(std::uint64_t seed, std::size_t repeats) {
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < repeats; ++i) out.push_back(seed + i);
    return out;
}

inline SweepTable sweep(const SweepSpec& spec, const Pipeline& pl, const GuidanceConfig& base,
                        std::span<const std::string> contexts, std::size_t n_samples, std::uint64_t seed) {
    spec.validate();
    SweepTable t{spec.axis, spec.values, {}};
    const auto seeds = sweep_seeds(seed, spec.repeats);
    for (const auto& v : spec.values) t.reports.push_back(evaluate(pl, contexts, sweep_point(base, spec.axis, v), n_samples, seeds, v));
    return t;
}

// ---------------------------------------------------------------------------
// Exact-score oracle

/// n chains of ancestral sampling driven by the exact cluster-guided score of
/// the world (no learned model). eta1 = eta2 = 0 is plain conditional sampling.
inline Matrix sample_oracle(const WorldSpec& world, const std::string& subject, const std::string& context, int target_k,
                            double eta1, double eta2, std::size_t n, const NoiseSchedule& sched, std::uint64_t seed,
                            int steps = kDefaultSamplingSteps) {
    return sample_chains(
        [&](const Matrix& z, int t, int) {
            Matrix out(z.rows(), z.cols());
            for (Eigen::Index j = 0; j < z.cols(); ++j)
                out.col(j) = oracle_guided_score(world, subject, context, z.col(j), t, target_k, eta1, eta2, sched);
            return out;
        },
        sched, steps, seed, n, world.latent_dim);
}

struct OracleRow {
    double eta1 = 0.0;
    double eta2 = 0.0;
    double capture = 0.0;
    bool operator==(const OracleRow&) const = default;
};

struct OracleReport {
    std::string subject;
    std::string context;
    int target_k = 0;
    std::size_t n_samples = 0;
    std::uint64_t seed = 0;
    std::vector<OracleRow> rows;
    bool operator==(const OracleReport&) const = default;

    double capture_at(double eta1) const {
        for (const auto& r : rows)
            if (r.eta1 == eta1) return r.capture;
        throw std::invalid_argument("oracle report has no row for eta1 = " + std::to_string(eta1));
    }
};

/// Capture of the target sub-cluster for each eta1 (eta2 fixed); every row
/// reuses the same chain seeds.
inline OracleReport oracle_experiment(const WorldSpec& world, const std::string& subject, const std::string& context,
                                      int target_k, std::span<const double> eta1s, double eta2, std::size_t n,
                                      const NoiseSchedule& sched, std::uint64_t seed, int steps = kDefaultSamplingSteps) {
    if (n == 0) throw std::invalid_argument("oracle: n_samples must be positive");
    OracleReport r{subject, context, target_k, n, seed, {}};
    for (double e : eta1s)
        r.rows.push_back({e, eta2, capture_rate(sample_oracle(world, subject, context, target_k, e, eta2, n, sched, seed, steps),
                                                world, subject, context, target_k)});
    return r;
}

} // namespace oneactor
