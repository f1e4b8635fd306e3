#include <gtest/gtest.h>

#include "oneactor/infer.hpp"
#include "test_support.hpp"

using namespace oneactor;
using namespace oneactor::testing;

namespace {

struct Fixture {
    WorldSpec world = make_default_world(0);
    Vocabulary vocab = make_vocab(world, default_templates(), 0);
    NoiseSchedule sched = make_schedule(ScheduleKind::LinearBeta, 50);
    Denoiser den;
    BaseSet bs;
    TunedProjector tp;

    Fixture() {
        Rng rng(21);
        den = small_denoiser(rng, 2, 8, 50, {16, 12});
        bs = choose_target(generate_base_set(den, vocab, world, subject_prompt("hobbit", "plain"), 6, sched, 3), 1, rng);
        TuneConfig cfg;
        cfg.width = 8;
        cfg.blocks = 2;
        tp = {make_projector(projector_spec_for(den, cfg, 1), rng), {0}};
        randomize(tp.proj.params, rng, 0.3);
    }

    PromptEmbedding embed(const std::string& ctx) const { return embed_prompt(vocab, subject_prompt("hobbit", ctx)); }
    TargetContext context(const std::string& ctx) const { return build_representations(tp, bs, embed(ctx)); }
};

GuidanceConfig guidance(double eta1, double eta2, double v = 0.8) {
    GuidanceConfig g;
    g.eta1 = eta1;
    g.eta2 = eta2;
    g.v = v;
    return g;
}

} // namespace

TEST(Guided, ReducesToCfgWhenExclusionIsOff) {
    Fixture s;
    Rng rng(1);
    const Matrix z = random_matrix(2, 5, rng);
    const auto c = s.embed("forest");
    const auto ctx = s.context("forest");
    GuidedPredictor p(s.den, c, ctx, guidance(3.0, 0.0));
    EXPECT_EQ(p(z, 30, 4), cfg_predict(s.den, z, 30, p.c_tar(), Vector::Zero(8), 3.0));

    GuidedPredictor q(s.den, c, ctx, guidance(0.0, 0.0));
    EXPECT_EQ(q(z, 30, 4), s.den.predict(z, 30, Vector::Zero(8)));
}

TEST(Guided, GeneralCaseMatchesTheThreeTermFormula) {
    Fixture s;
    Rng rng(2);
    const Matrix z = random_matrix(2, 4, rng);
    const auto ctx = s.context("snow");
    GuidedPredictor p(s.den, s.embed("snow"), ctx, guidance(8.5, 1.0));
    ASSERT_NE(p.c_tar(), p.c_aver());
    const Matrix e0 = s.den.predict(z, 12, Vector::Zero(8));
    const Matrix e1 = s.den.predict(z, 12, p.c_tar());
    const Matrix e2 = s.den.predict(z, 12, p.c_aver());
    const Matrix want = e0 + 8.5 * (e1 - e0) - 1.0 * (e2 - e0);
    EXPECT_LT((p(z, 12, 2) - want).cwiseAbs().maxCoeff(), 1e-12);
    // Combination at eta2 = 0 is CFG bit for bit.
    EXPECT_EQ(GuidedPredictor::combine(e0, e1, e2, 4.0, 0.0), cfg_combine(e0, e1, 4.0));
}

TEST(Guided, CountsDenoiserCallsPerStep) {
    Fixture s;
    Rng rng(3);
    const Matrix z = random_matrix(2, 3, rng);
    const auto c = s.embed("beach");
    const auto ctx = s.context("beach");
    GuidedPredictor three(s.den, c, ctx, guidance(8.5, 1.0));
    GuidedPredictor two(s.den, c, ctx, guidance(8.5, 0.0));
    auto aver = guidance(8.5, 1.0);
    aver.aver_as_empty = true;
    GuidedPredictor ae(s.den, c, ctx, aver);
    for (int step = 1; step <= 30; ++step) {
        three(z, 40, step);
        two(z, 40, step);
        ae(z, 40, step);
    }
    for (int step = 1; step <= 30; ++step) {
        const auto k = static_cast<std::size_t>(step);
        EXPECT_EQ(three.calls()[k], step <= 20 ? 3 : 2) << step;
        EXPECT_EQ(two.calls()[k], 2);
        EXPECT_EQ(ae.calls()[k], 2);
    }
}

TEST(Guided, OutsideTheWindowFallsBackToCfg) {
    Fixture s;
    Rng rng(4);
    const Matrix z = random_matrix(2, 3, rng);
    const auto c = s.embed("street");
    const auto ctx = s.context("street");
    auto g = guidance(8.5, 1.0);
    GuidedPredictor off(s.den, c, ctx, g);
    EXPECT_EQ(off(z, 5, 25), cfg_predict(s.den, z, 5, off.c_tar(), Vector::Zero(8), 7.5));
    g.fallback = FallbackCondition::Raw;
    GuidedPredictor raw(s.den, c, ctx, g);
    EXPECT_EQ(raw(z, 5, 25), cfg_predict(s.den, z, 5, raw.c_raw(), Vector::Zero(8), 7.5));
    EXPECT_EQ(raw.c_raw(), pool_condition(c));
}

TEST(Guided, AverageAsEmptyUsesTheAverageReference) {
    Fixture s;
    Rng rng(5);
    const Matrix z = random_matrix(2, 3, rng);
    auto g = guidance(6.0, 1.0);
    g.aver_as_empty = true;
    GuidedPredictor p(s.den, s.embed("plain"), s.context("plain"), g);
    EXPECT_EQ(p(z, 20, 1), cfg_predict(s.den, z, 20, p.c_tar(), p.c_aver(), 6.0));
}

TEST(Guided, ZeroOffsetScaleIsPlainCfgSampling) {
    Fixture s;
    const auto g = guidance(8.5, 1.0, 0.0);
    const auto prompt = subject_prompt("hobbit", "forest");
    const auto a = sample_consistent(s.den, s.tp, s.bs, s.world, s.vocab, prompt, g, 40, s.sched, 9);
    const auto b = sample_unguided(s.den, s.world, s.vocab, prompt, 40, s.sched, 9, 7.5);
    EXPECT_EQ(a.z0, b.z0);
    EXPECT_EQ(a.assigned, b.assigned);
}

TEST(Guided, RejectsBadConfigurations) {
    Fixture s;
    const auto c = s.embed("plain");
    const auto ctx = s.context("plain");
    auto g = guidance(8.5, 1.0);
    g.window_end = 31;
    EXPECT_THROW(GuidedPredictor(s.den, c, ctx, g), std::invalid_argument);
    g = guidance(-1.0, 0.0);
    EXPECT_THROW(GuidedPredictor(s.den, c, ctx, g), std::invalid_argument);
    auto two = ctx;
    two.delta_tar.push_back(two.delta_tar[0]);
    EXPECT_THROW(GuidedPredictor(s.den, c, two, guidance(1.0, 0.0)), std::invalid_argument);
    GuidedPredictor p(s.den, c, ctx, guidance(1.0, 0.0));
    EXPECT_THROW(p(Matrix::Zero(2, 1), 3, 31), std::invalid_argument);
    EXPECT_THROW(fallback_condition_from_string("mean"), std::invalid_argument);
}

TEST(MultiSubject, CombinePrompts) {
    const std::vector<Prompt> ps{subject_prompt("hobbit", "snow"), subject_prompt("robot", "beach")};
    const auto c = combine_prompts(ps);
    EXPECT_EQ(c.tokens, (std::vector<std::string>{"hobbit", "robot", "snow"}));
    EXPECT_EQ(c.base_indices, (std::vector<std::size_t>{0, 1}));
    EXPECT_THROW(combine_prompts(std::vector<Prompt>{ps[0]}), std::invalid_argument);
    EXPECT_THROW(combine_prompts(std::vector<Prompt>{ps[0], ps[0]}), std::invalid_argument);
}

TEST(MultiSubject, VariantOneCannotGrow) {
    MultiSubjectV1 v;
    v.tuned.slots = {0, 1};
    EXPECT_EQ(v.num_subjects(), 2u);
    EXPECT_THROW(v.add_subject("elf"), std::invalid_argument);
    Fixture s;
    EXPECT_THROW(v.sample(s.den, s.world, s.vocab, subject_prompt("hobbit", "plain"), {}, 4, s.sched, 0), std::invalid_argument);
}

TEST(MultiSubject, VariantTwoChecksItsProjectors) {
    Fixture s;
    const auto c = embed_prompt(s.vocab, multi_subject_prompt({"hobbit", "robot"}, "plain"));
    SubjectProjector a{s.tp, s.bs}, b{s.tp, s.bs};
    b.tuned.slots = {1};
    EXPECT_EQ(variant2_contexts(std::vector<SubjectProjector>{a, b}, c).size(), 2u);
    EXPECT_THROW(variant2_contexts(std::vector<SubjectProjector>{a}, c), std::invalid_argument);
    EXPECT_THROW(variant2_contexts(std::vector<SubjectProjector>{a, a}, c), std::invalid_argument);
    b.tuned.slots = {0, 1};
    EXPECT_THROW(variant2_contexts(std::vector<SubjectProjector>{a, b}, c), std::invalid_argument);
    EXPECT_THROW(variant2_mode_from_string("masked"), std::invalid_argument);
}

TEST(MultiSubject, SingleProjectorMatchesSingleSubjectInference) {
    Fixture s;
    const auto prompt = subject_prompt("hobbit", "snow");
    const auto g = guidance(8.5, 1.0);
    const std::vector<SubjectProjector> one{{s.tp, s.bs}};
    for (auto mode : {Variant2Mode::FactorMasked, Variant2Mode::TokenScoped}) {
        const auto v2 = multi_subject_variant2(s.den, one, s.world, s.vocab, prompt, g, 20, s.sched, 4, mode);
        const auto single = sample_consistent(s.den, s.tp, s.bs, s.world, s.vocab, prompt, g, 20, s.sched, 4);
        EXPECT_EQ(v2.z0, single.z0);
        EXPECT_EQ(v2.calls_per_step, single.calls_per_step);
    }
}

TEST(MultiSubject, FactorMaskingIdenticalPartsIsSharedGuidance) {
    Fixture s;
    Rng rng(6);
    const Denoiser den = small_denoiser(rng, 4, 8, 50, {16, 12});
    const auto prompt = multi_subject_prompt({"hobbit", "robot"}, "forest");
    TargetContext ctx;
    for (int i = 0; i < 2; ++i) {
        ctx.delta_tar.push_back(random_vector(8, rng, 0.5));
        ctx.delta_aver.push_back(random_vector(8, rng, 0.5));
    }
    const std::vector<TargetContext> parts{ctx, ctx};
    const auto g = guidance(8.5, 1.0);
    const auto masked = sample_factor_masked(den, s.world, s.vocab, parts, prompt, g, 15, s.sched, 2);
    const auto shared = sample_with_context(den, s.world, s.vocab, ctx, prompt, g, 15, s.sched, 2);
    EXPECT_EQ(masked.z0, shared.z0);
    EXPECT_EQ(masked.calls_per_step[1], 2 * shared.calls_per_step[1]);
    ASSERT_EQ(masked.assigned[0].size(), 2u);
    EXPECT_THROW(sample_factor_masked(s.den, s.world, s.vocab, parts, prompt, g, 5, s.sched, 2), std::invalid_argument);
}

TEST(MultiSubject, FactorLossMask) {
    EXPECT_EQ(factor_loss_mask(2, 2, 1), (std::vector<double>{0, 0, 1, 1}));
    EXPECT_EQ(factor_loss_mask(2, 3, 0), (std::vector<double>{1, 1, 0, 0, 0, 0}));
    EXPECT_THROW(factor_loss_mask(2, 2, 2), std::invalid_argument);
}
