#include <set>

#include <gtest/gtest.h>

#include "oneactor/tune.hpp"
#include "test_support.hpp"

using namespace oneactor;
using namespace oneactor::testing;

namespace {

struct Fixture {
    WorldSpec world = make_default_world(0);
    Vocabulary vocab = make_vocab(world, default_templates(), 0);
    NoiseSchedule sched = make_schedule(ScheduleKind::LinearBeta, 50);
    Denoiser den;

    Fixture() {
        Rng rng(11);
        den = small_denoiser(rng, 2, 8, 50, {16, 12});
    }
};

TuneConfig quick_tune(int steps) {
    TuneConfig cfg;
    cfg.max_steps = steps;
    cfg.min_steps = 0;
    cfg.width = 8;
    cfg.blocks = 2;
    return cfg;
}

} // namespace

TEST(Tune, LossGradientMatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto g = check_tune_gradient(seed);
        EXPECT_LT(g.rel_error, 1e-5) << g.label;
    }
}

TEST(BaseSet, GenerationAndTargetChoice) {
    Fixture s;
    const auto bs = generate_base_set(s.den, s.vocab, s.world, subject_prompt("hobbit", "plain"), 11, s.sched, 3);
    ASSERT_EQ(bs.entries.size(), 11u);
    EXPECT_EQ(bs.feature_t, 1);
    for (const auto& e : bs.entries) {
        EXPECT_EQ(e.h.size(), 16);
        EXPECT_EQ(e.h, s.den.features(e.z_feat, 1, pool_condition(embed_prompt(s.vocab, bs.prompt_tar))));
        ASSERT_EQ(e.assigned.size(), 1u);
        EXPECT_EQ(e.assigned[0], assign_subcluster(s.world, "hobbit", "plain", e.z0));
    }
    Rng rng(0);
    const auto chosen = choose_target(bs, 4, rng);
    EXPECT_EQ(chosen.target().z0, bs.entries[4].z0);
    EXPECT_EQ(chosen.auxiliary_indices().size(), 10u);
    EXPECT_THROW(choose_target(bs, 11, rng), std::invalid_argument);
    EXPECT_THROW(bs.target(), std::invalid_argument);
    EXPECT_THROW(generate_base_set(s.den, s.vocab, s.world, subject_prompt("hobbit", "plain"), 1, s.sched, 3),
                 std::invalid_argument);
}

TEST(BaseSet, AugmentationJittersOnlyTheLatent) {
    Fixture s;
    Rng rng(1);
    const auto bs = choose_target(generate_base_set(s.den, s.vocab, s.world, subject_prompt("robot", "plain"), 5, s.sched, 1), 2, rng);
    const auto aug = augment_target(bs, 4, 0.05, rng);
    ASSERT_EQ(aug.z.size(), 4u);
    EXPECT_EQ(aug.h, bs.target().h);
    for (const auto& z : aug.z) {
        EXPECT_LT((z - bs.target().z0).norm(), 0.5);
        EXPECT_NE(z, bs.target().z0);
    }
}

TEST(TuneBatch, AuxiliaryMembersAreDistinctAndExcludeTheTarget) {
    Fixture s;
    Rng rng(2);
    const auto bs = choose_target(generate_base_set(s.den, s.vocab, s.world, subject_prompt("robot", "plain"), 6, s.sched, 2), 0, rng);
    const auto aug = augment_target(bs, 2, 0.05, rng);
    const auto c = embed_prompt(s.vocab, subject_prompt("robot", "portrait"));
    for (int i = 0; i < 20; ++i) {
        const auto b = draw_tune_batch(bs, aug, c, 5, s.sched, rng);
        ASSERT_EQ(b.z0.size(), 6u);
        std::set<std::vector<double>> seen;
        for (std::size_t k = 1; k < b.z0.size(); ++k) {
            EXPECT_NE(b.z0[k], bs.target().z0);
            seen.insert(to_std(b.z0[k]));
        }
        EXPECT_EQ(seen.size(), 5u);
        EXPECT_LE(b.aver_member, 5u);
    }
}

TEST(Tune, WeightsSelectTheTerms) {
    Rng rng(3);
    Fixture s;
    const auto bs = choose_target(generate_base_set(s.den, s.vocab, s.world, subject_prompt("hobbit", "plain"), 6, s.sched, 4), 1, rng);
    const auto aug = augment_target(bs, 2, 0.05, rng);
    const auto b = draw_tune_batch(bs, aug, embed_prompt(s.vocab, subject_prompt("hobbit", "photo")), 3, s.sched, rng);
    auto cfg = quick_tune(1);
    TunedProjector tp{make_projector(projector_spec_for(s.den, cfg, 1), rng), {0}};
    randomize(tp.proj.params, rng, 0.3);
    const auto full = tune_loss(s.den, tp, b, 0.5, 0.2, s.sched);
    EXPECT_NEAR(full.total, full.tar + 0.5 * full.aux + 0.2 * full.aver, 1e-14);
    const auto tar_only = tune_loss(s.den, tp, b, 0.0, 0.0, s.sched);
    EXPECT_EQ(tar_only.total, full.tar);
}

TEST(Tune, LossMaskRestrictsTheErrorToOneFactor) {
    Rng rng(4);
    Denoiser d = small_denoiser(rng, 4, 8, 50, {12, 10});
    const auto world = make_default_world(0);
    const auto vocab = make_vocab(world, default_templates(), 0);
    const auto sched = make_schedule(ScheduleKind::LinearBeta, 50);
    const auto bs = choose_target(generate_base_set(d, vocab, world, multi_subject_prompt({"hobbit", "robot"}, "plain"), 6, sched, 5), 0, rng);
    const auto aug = augment_target(bs, 2, 0.05, rng);
    const auto b = draw_tune_batch(bs, aug, embed_prompt(vocab, multi_subject_prompt({"hobbit", "robot"}, "photo")), 3, sched, rng);
    TunedProjector tp{make_projector(projector_spec_for(d, quick_tune(1), 1), rng), {1}};
    randomize(tp.proj.params, rng, 0.3);
    // Per-coordinate errors split evenly: the full loss is the mean of the
    // two factor-masked losses.
    const auto full = tune_loss(d, tp, b, 0.5, 0.2, sched);
    const auto f0 = tune_loss(d, tp, b, 0.5, 0.2, sched, NormMode::Batch, std::vector<double>{1, 1, 0, 0});
    const auto f1 = tune_loss(d, tp, b, 0.5, 0.2, sched, NormMode::Batch, std::vector<double>{0, 0, 1, 1});
    EXPECT_NEAR(full.total, 0.5 * (f0.total + f1.total), 1e-12 * full.total);
    EXPECT_NEAR(tune_loss(d, tp, b, 0.5, 0.2, sched, NormMode::Batch, std::vector<double>{1, 1, 1, 1}).total, full.total, 1e-12 * full.total);
    EXPECT_THROW(tune_loss(d, tp, b, 0.5, 0.2, sched, NormMode::Batch, std::vector<double>{1, 1}), std::invalid_argument);
    EXPECT_THROW(tune_loss(d, tp, b, 0.5, 0.2, sched, NormMode::Batch, std::vector<double>{0, 0, 0, 0}), std::invalid_argument);
}

TEST(Tune, AverageConditionIsTheMeanOffset) {
    Rng rng(5);
    ProjectorSpec sp;
    sp.feature_dim = 6;
    sp.embed_dim = 3;
    sp.width = 4;
    sp.blocks = 2;
    auto p = make_projector(sp, rng);
    randomize(p.params, rng);
    const Vector c = random_vector(3, rng);
    std::vector<Vector> hs;
    Vector mean = Vector::Zero(3);
    for (int i = 0; i < 5; ++i) {
        hs.push_back(random_vector(6, rng));
        mean += projector_forward(p, hs.back(), c)[0] / 5.0;
    }
    EXPECT_LT((average_condition(p, hs, c)[0] - mean).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Tune, RunIsDeterministicAndRespectsStepBounds) {
    Fixture s;
    Rng rng(6);
    const auto bs = choose_target(generate_base_set(s.den, s.vocab, s.world, subject_prompt("hobbit", "plain"), 11, s.sched, 6), 3, rng);
    auto cfg = quick_tune(120);
    cfg.ma_window = 10;
    cfg.plateau_patience = 20;
    cfg.min_steps = 40;
    cfg.plateau_tol = 10.0;
    const auto a = tune(s.den, s.vocab, bs, default_templates(), cfg, s.sched);
    const auto b = tune(s.den, s.vocab, bs, default_templates(), cfg, s.sched);
    EXPECT_EQ(a.tuned.proj.params, b.tuned.proj.params);
    EXPECT_EQ(a.tuned.proj.running_var, b.tuned.proj.running_var);
    // A huge tolerance never registers improvement, so the rule fires at the floor.
    EXPECT_TRUE(a.plateaued);
    EXPECT_GE(a.stopped_at, cfg.min_steps);
    EXPECT_LT(a.stopped_at, cfg.max_steps);
    EXPECT_EQ(a.curve.size(), static_cast<std::size_t>(a.stopped_at));

    cfg.plateau_patience = cfg.max_steps;
    const auto c = tune(s.den, s.vocab, bs, default_templates(), cfg, s.sched);
    EXPECT_EQ(c.stopped_at, cfg.max_steps);
    EXPECT_FALSE(c.plateaued);
}

TEST(Tune, RejectsBadConfigurations) {
    Fixture s;
    Rng rng(7);
    const auto raw = generate_base_set(s.den, s.vocab, s.world, subject_prompt("hobbit", "plain"), 4, s.sched, 7);
    EXPECT_THROW(tune(s.den, s.vocab, raw, default_templates(), quick_tune(5), s.sched), std::invalid_argument);
    const auto bs = choose_target(raw, 0, rng);
    auto cfg = quick_tune(5);
    cfg.K = 4;
    EXPECT_THROW(tune(s.den, s.vocab, bs, default_templates(), cfg, s.sched), std::invalid_argument);
    EXPECT_THROW(tune(s.den, s.vocab, bs, {}, quick_tune(5), s.sched), std::invalid_argument);
}
