#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "oneactor/world.hpp"
#include "test_support.hpp"

using namespace oneactor;
using namespace oneactor::testing;

namespace {

struct Probe {
    std::string subject, context;
    Vector z;
    int t;
};

std::vector<Probe> probes(const WorldSpec& w, int T, int n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Probe> out;
    for (int i = 0; i < n; ++i) {
        const auto& s = w.subjects[rng.below(w.subjects.size())].token;
        const auto& c = w.contexts[rng.below(w.contexts.size())].token;
        Vector z(2);
        z << -10.0 + 20.0 * rng.uniform(), -6.0 + 12.0 * rng.uniform();
        out.push_back({s, c, z, static_cast<int>(rng.below(static_cast<std::uint64_t>(T) + 1))});
    }
    return out;
}

Vector fd_grad(const std::function<double(const Vector&)>& f, const Vector& z) {
    Vector g(z.size());
    Vector zp = z;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        zp[i] = z[i] + kFdStep;
        const double a = f(zp);
        zp[i] = z[i] - kFdStep;
        const double b = f(zp);
        zp[i] = z[i];
        g[i] = (a - b) / (2 * kFdStep);
    }
    return g;
}

} // namespace

TEST(World, DefaultWorldShape) {
    const auto w = make_default_world(7);
    ASSERT_EQ(w.subjects.size(), 2u);
    for (const auto& s : w.subjects) {
        ASSERT_EQ(s.subclusters.size(), 4u);
        for (const auto& k : s.subclusters) EXPECT_DOUBLE_EQ(k.weight, 0.25);
    }
    EXPECT_EQ(w.contexts.size(), 5u);
    EXPECT_EQ(w.null_context().token, "plain");
    const auto again = make_default_world(7);
    EXPECT_EQ(w.subjects[0].subclusters[2].mean, again.subjects[0].subclusters[2].mean);
    EXPECT_NE(w.contexts[1].offset, make_default_world(8).contexts[1].offset);
}

TEST(World, ValidateRejectsBadSpecs) {
    auto w = make_default_world(0);
    w.subjects[0].subclusters[0].weight = 0.5;
    EXPECT_THROW(w.validate(), std::invalid_argument);
    w = make_default_world(0);
    w.subjects[1].subclusters[1].var = 0.0;
    EXPECT_THROW(w.validate(), std::invalid_argument);
    w = make_default_world(0);
    w.contexts[0].offset[0] = 1.0;
    EXPECT_THROW(w.validate(), std::invalid_argument);
    EXPECT_THROW(w.subject("dragon"), std::invalid_argument);
}

TEST(World, ScoreMatchesFiniteDifferencesOfLogDensity) {
    const auto w = make_default_world(0);
    const auto sched = make_schedule(ScheduleKind::LinearBeta, 100);
    double worst = 0.0;
    for (const auto& p : probes(w, 100, 100, 1)) {
        const Vector s = score_t(w, p.subject, p.context, p.z, p.t, sched);
        const Vector fd = fd_grad([&](const Vector& z) { return log_density_t(w, p.subject, p.context, z, p.t, sched); }, p.z);
        worst = std::max(worst, (s - fd).cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(World, ClusterPosteriorsSumToOne) {
    const auto w = make_default_world(0);
    const auto sched = make_schedule(ScheduleKind::Cosine, 100);
    for (const auto& p : probes(w, 100, 200, 2)) {
        const auto r = cluster_posterior_t(w, p.subject, p.context, p.z, p.t, sched);
        EXPECT_NEAR(std::accumulate(r.begin(), r.end(), 0.0), 1.0, 1e-12);
    }
}

TEST(World, DensityIntegratesToOneOnAGrid) {
    const auto w = make_default_world(0);
    const auto sched = make_schedule(ScheduleKind::LinearBeta, 100);
    const double h = 0.05;
    for (int t : {0, 50, 100}) {
        double mass = 0.0;
        Vector z(2);
        for (double x = -16.0; x <= 16.0; x += h)
            for (double y = -12.0; y <= 12.0; y += h) {
                z << x, y;
                mass += std::exp(log_density_t(w, "hobbit", "street", z, t, sched));
            }
        EXPECT_NEAR(mass * h * h, 1.0, 1e-3) << "t = " << t;
    }
}

TEST(World, ClusterPosteriorGradientsMatchFiniteDifferences) {
    const auto w = make_default_world(0);
    const auto sched = make_schedule(ScheduleKind::LinearBeta, 100);
    for (const auto& p : probes(w, 100, 30, 3)) {
        const auto g = cluster_log_posterior_grads(w, p.subject, p.context, p.z, p.t, sched);
        for (int k = 0; k < 4; ++k) {
            const Vector fd = fd_grad(
                [&](const Vector& z) {
                    return std::log(cluster_posterior_t(w, p.subject, p.context, z, p.t, sched)[static_cast<std::size_t>(k)]);
                },
                p.z);
            EXPECT_LT((g[static_cast<std::size_t>(k)] - fd).cwiseAbs().maxCoeff(), 1e-5);
        }
    }
}

TEST(World, OracleReductionsAreExact) {
    const auto w = make_default_world(0);
    const auto sched = make_schedule(ScheduleKind::LinearBeta, 100);
    for (const auto& p : probes(w, 99, 50, 4)) {
        const int t = p.t + 1;
        // eta1 = eta2 = 0: unguided conditional prediction.
        EXPECT_EQ(oracle_guided_score(w, p.subject, p.context, p.z, t, 1, 0.0, 0.0, sched),
                  Vector(-sched.sigma(t) * score_t(w, p.subject, p.context, p.z, t, sched)));
        // eta1 = 1, eta2 = 0: Bayes gives the score of the target sub-cluster.
        EXPECT_EQ(oracle_guided_score(w, p.subject, p.context, p.z, t, 2, 1.0, 0.0, sched),
                  Vector(-sched.sigma(t) * conditional_score_t(w, p.subject, p.context, p.z, t, 2, sched)));
    }
}

TEST(World, SamplingFollowsTheWeights) {
    const auto w = make_default_world(0);
    Rng rng(5);
    std::vector<int> counts(4, 0);
    const int n = 8000;
    for (int i = 0; i < n; ++i) {
        const auto s = sample_world(w, "robot", "beach", rng);
        ++counts[static_cast<std::size_t>(s.subcluster)];
        EXPECT_EQ(assign_subcluster(w, "robot", "beach", w.subject("robot").subclusters[static_cast<std::size_t>(s.subcluster)].mean +
                                                            w.context("beach").offset),
                  s.subcluster);
    }
    const double sd = std::sqrt(0.25 * 0.75 / n);
    for (int c : counts) EXPECT_NEAR(c / static_cast<double>(n), 0.25, 4 * sd);
    EXPECT_EQ(sample_world(w, "robot", "beach", rng, 3).subcluster, 3);
    EXPECT_THROW(sample_world(w, "robot", "beach", rng, 4), std::invalid_argument);
}

TEST(World, ProductWorldConcatenatesFactors) {
    ProductWorld pw{make_default_world(0), {"hobbit", "robot"}};
    EXPECT_EQ(pw.latent_dim(), 4u);
    Rng rng(6);
    for (int i = 0; i < 50; ++i) {
        const auto s = sample_product(pw, "snow", rng);
        const auto ks = assign_product(pw, "snow", s.z0);
        ASSERT_EQ(ks.size(), 2u);
        EXPECT_EQ(ks[0], assign_subcluster(pw.base, "hobbit", "snow", s.z0.head(2)));
        EXPECT_EQ(ks[1], assign_subcluster(pw.base, "robot", "snow", s.z0.tail(2)));
    }
}
