#include <gtest/gtest.h>

#include "oneactor/semantics.hpp"
#include "test_support.hpp"

using namespace oneactor;
using namespace oneactor::testing;

TEST(Vocabulary, EmptyTokenIsZeroAndTableIsDeterministic) {
    const auto w = make_default_world(0);
    const auto v = make_vocab(w, default_templates(), 3);
    EXPECT_TRUE(v.at(kEmptyToken).isZero(0.0));
    EXPECT_EQ(v.at("hobbit").size(), 8);
    EXPECT_EQ(v.at("robot#3"), make_vocab(w, default_templates(), 3).at("robot#3"));
    EXPECT_NE(v.at("robot#3"), make_vocab(w, default_templates(), 4).at("robot#3"));
    // 2 subjects + 5 contexts + 8 templates + 8 descriptors + empty.
    EXPECT_EQ(v.table.size(), 2u + 5u + 8u + 8u + 1u);
    EXPECT_THROW(v.at("dragon"), std::invalid_argument);
    EXPECT_THROW(make_vocab(w, {"street"}, 0), std::invalid_argument);
}

TEST(Semantics, PoolIsTheTokenMean) {
    const auto w = make_default_world(0);
    const auto v = make_vocab(w, default_templates(), 0);
    const auto c = embed_prompt(v, multi_subject_prompt({"hobbit", "robot"}, "snow"));
    const Vector pooled = pool_condition(c);
    for (Eigen::Index i = 0; i < 8; ++i)
        EXPECT_NEAR(pooled[i], (v.at("hobbit")[i] + v.at("robot")[i] + v.at("snow")[i]) / 3.0, 1e-15);
}

TEST(Semantics, OffsetTouchesOnlyBaseWords) {
    const auto w = make_default_world(0);
    const auto v = make_vocab(w, default_templates(), 0);
    const auto c = embed_prompt(v, multi_subject_prompt({"hobbit", "robot"}, "snow"));
    Rng rng(1);
    const std::vector<Vector> d{random_vector(8, rng), random_vector(8, rng)};
    const auto o = offset_base(c, d, 0.5);
    EXPECT_EQ(o.tokens[2], c.tokens[2]);
    EXPECT_EQ(o.tokens[0], Vector(c.tokens[0] + 0.5 * d[0]));
    EXPECT_EQ(o.tokens[1], Vector(c.tokens[1] + 0.5 * d[1]));
    const auto z = offset_base(c, d, 0.0);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(z.tokens[i], c.tokens[i]);
    EXPECT_THROW(offset_base(c, std::vector<Vector>{d[0]}, 1.0), std::invalid_argument);
    EXPECT_THROW(offset_base(embed_prompt(v, {{"snow"}, {}}), d[0], 1.0), std::invalid_argument);
}

TEST(Semantics, InterpolationTowardEmpty) {
    const auto w = make_default_world(0);
    const auto v = make_vocab(w, default_templates(), 0);
    const auto c = embed_prompt(v, subject_prompt("hobbit", "beach"));
    EXPECT_TRUE(pool_condition(semantic_interpolate_empty(c, 0.0)).isZero(0.0));
    EXPECT_EQ(pool_condition(semantic_interpolate_empty(c, 1.0)), pool_condition(c));
}

TEST(Semantics, TemplatesMapToTheNullContext) {
    const auto w = make_default_world(0);
    EXPECT_EQ(context_of_token(w, "portrait").token, "plain");
    EXPECT_EQ(context_of_token(w, "forest").token, "forest");
}
