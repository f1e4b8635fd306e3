#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "oneactor/numcore.hpp"
#include "oneactor/rng.hpp"
#include "oneactor/world.hpp"

namespace oneactor {

inline const std::string kEmptyToken = "<empty>";

/// Token embedding table standing in for the text encoder. The empty token
/// embeds to the zero vector, so the pooled empty prompt is c_empty = 0.
struct Vocabulary {
    std::size_t embed_dim = 8;
    std::map<std::string, Vector> table;

    bool contains(const std::string& token) const { return table.count(token) != 0; }

    const Vector& at(const std::string& token) const {
        auto it = table.find(token);
        if (it == table.end()) throw std::invalid_argument("unknown token '" + token + "'");
        return it->second;
    }
};

/// Phrasing tokens that leave the latent geometry untouched; the toy
/// counterpart of "a portrait of a {}"-style prompt templates.
inline std::vector<std::string> default_templates() {
    return {"portrait", "photo", "painting", "closeup", "sketch", "render", "studio", "candid"};
}

/// Identity descriptor of sub-cluster k of a subject. Base-model training
/// captions sometimes carry it as an offset of the subject word, which gives
/// the semantic space directions that single out one identity.
inline std::string descriptor_token(const std::string& subject, int k) { return subject + "#" + std::to_string(k); }

/// One Normal(0, I/m) embedding per subject, context, template and identity
/// descriptor, in that order, drawn from `seed`.
inline Vocabulary make_vocab(const WorldSpec& world, const std::vector<std::string>& templates, std::uint64_t seed,
                             std::size_t embed_dim = 8) {
    if (embed_dim == 0) throw std::invalid_argument("make_vocab: embed_dim must be positive");
    std::vector<std::string> tokens;
    for (const auto& s : world.subjects) tokens.push_back(s.token);
    for (const auto& c : world.contexts) tokens.push_back(c.token);
    for (const auto& t : templates) tokens.push_back(t);
    for (const auto& s : world.subjects)
        for (std::size_t k = 0; k < s.subclusters.size(); ++k) tokens.push_back(descriptor_token(s.token, static_cast<int>(k)));

    Vocabulary vocab{embed_dim, {}};
    vocab.table.emplace(kEmptyToken, Vector::Zero(static_cast<Eigen::Index>(embed_dim)));
    Rng rng(seed, 0x766f636162ULL);
    const double sd = 1.0 / std::sqrt(static_cast<double>(embed_dim));
    for (const auto& token : tokens) {
        if (vocab.contains(token)) throw std::invalid_argument("make_vocab: duplicate token '" + token + "'");
        Vector e(static_cast<Eigen::Index>(embed_dim));
        for (Eigen::Index i = 0; i < e.size(); ++i) e[i] = sd * rng.normal();
        vocab.table.emplace(token, std::move(e));
    }
    return vocab;
}

/// Token sequence with the positions of its base (subject) words.
struct Prompt {
    std::vector<std::string> tokens;
    std::vector<std::size_t> base_indices;

    bool operator==(const Prompt&) const = default;
};

struct PromptEmbedding {
    std::vector<Vector> tokens;
    std::vector<std::size_t> base_indices;
};

/// [subject, context] with the subject as base word.
inline Prompt subject_prompt(const std::string& subject, const std::string& context) { return {{subject, context}, {0}}; }

/// [subject_1, ..., subject_L, context]; every subject is a base word.
inline Prompt multi_subject_prompt(const std::vector<std::string>& subjects, const std::string& context) {
    Prompt p;
    for (std::size_t j = 0; j < subjects.size(); ++j) {
        p.tokens.push_back(subjects[j]);
        p.base_indices.push_back(j);
    }
    p.tokens.push_back(context);
    return p;
}

inline PromptEmbedding embed_prompt(const Vocabulary& vocab, const Prompt& prompt) {
    PromptEmbedding c;
    for (const auto& token : prompt.tokens) c.tokens.push_back(vocab.at(token));
    for (std::size_t b : prompt.base_indices)
        if (b >= prompt.tokens.size()) throw std::invalid_argument("embed_prompt: base index out of range");
    c.base_indices = prompt.base_indices;
    return c;
}

/// c'_b = c_b + v * delta_b at each base position; one delta per base index.
inline PromptEmbedding offset_base(const PromptEmbedding& c, std::span<const Vector> deltas, double v) {
    if (c.base_indices.empty()) throw std::invalid_argument("offset_base: prompt has no base word");
    if (deltas.size() != c.base_indices.size())
        throw std::invalid_argument("offset_base: got " + std::to_string(deltas.size()) + " offsets for " +
                                    std::to_string(c.base_indices.size()) + " base words");
    PromptEmbedding out = c;
    for (std::size_t j = 0; j < deltas.size(); ++j) {
        const std::size_t b = c.base_indices[j];
        if (b >= out.tokens.size()) throw std::invalid_argument("offset_base: base index out of range");
        if (deltas[j].size() != out.tokens[b].size()) throw std::invalid_argument("offset_base: offset has wrong dimension");
        out.tokens[b] = out.tokens[b] + v * deltas[j];
    }
    return out;
}

inline PromptEmbedding offset_base(const PromptEmbedding& c, const Vector& delta, double v) {
    return offset_base(c, std::span<const Vector>(&delta, 1), v);
}

/// Mean of the token embeddings.
inline Vector pool_condition(const PromptEmbedding& c) {
    if (c.tokens.empty()) throw std::invalid_argument("pool_condition: empty prompt");
    Vector acc = Vector::Zero(c.tokens.front().size());
    for (const auto& e : c.tokens) acc += e;
    return acc / static_cast<double>(c.tokens.size());
}

/// c' = c_empty + g (c - c_empty) per token, with c_empty = 0.
inline PromptEmbedding semantic_interpolate_empty(const PromptEmbedding& c, double g) {
    PromptEmbedding out = c;
    for (auto& e : out.tokens) e = g * e;
    return out;
}

/// World context a prompt token refers to; templates map to the null context.
inline const ContextSpec& context_of_token(const WorldSpec& world, const std::string& token) {
    if (world.has_context(token)) return world.context(token);
    return world.null_context();
}

} // namespace oneactor
