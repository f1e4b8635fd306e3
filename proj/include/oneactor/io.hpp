#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "oneactor/errors.hpp"
#include "oneactor/eval.hpp"
#include "oneactor/infer.hpp"
#include "oneactor/numcore.hpp"
#include "oneactor/projector.hpp"
#include "oneactor/schedule.hpp"
#include "oneactor/semantics.hpp"
#include "oneactor/training.hpp"
#include "oneactor/tune.hpp"
#include "oneactor/world.hpp"

namespace oneactor {

using Json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Files

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("failed reading '" + path.string() + "'");
    return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    out.flush();
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline Json parse_json(const std::string& text, const std::string& what) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error& e) {
        throw std::invalid_argument(what + ": malformed JSON (" + std::string(e.what()) + ")");
    }
}

inline Json read_json_file(const std::filesystem::path& path) { return parse_json(read_text_file(path), path.string()); }

inline void write_json_file(const std::filesystem::path& path, const Json& j) { write_text_file(path, j.dump(1) + "\n"); }

// ---------------------------------------------------------------------------
// Field access with diagnostics naming the offending field

inline const Json& field(const Json& j, const std::string& key, const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
    auto it = j.find(key);
    if (it == j.end()) throw std::invalid_argument(where + ": missing field '" + key + "'");
    return *it;
}

template <class T>
T get_as(const Json& j, const std::string& where) {
    try {
        return j.get<T>();
    } catch (const Json::exception&) {
        throw std::invalid_argument(where + ": wrong type (got " + std::string(j.type_name()) + ")");
    }
}

template <class T>
T get_field(const Json& j, const std::string& key, const std::string& where) {
    return get_as<T>(field(j, key, where), where + "." + key);
}

inline void check_version(const Json& j, const std::string& where) {
    const int v = get_field<int>(j, "version", where);
    if (v != kFormatVersion)
        throw std::invalid_argument(where + ": unsupported version " + std::to_string(v) + " (expected " +
                                    std::to_string(kFormatVersion) + ")");
}

inline Json vec_to_json(const Vector& v) { return to_std(v); }

inline Vector vec_from_json(const Json& j, const std::string& where) {
    const auto xs = get_as<std::vector<double>>(j, where);
    return to_vector(xs);
}

// ---------------------------------------------------------------------------
// World and vocabulary

inline Json to_json(const WorldSpec& w) {
    Json subjects = Json::array();
    for (const auto& s : w.subjects) {
        Json subs = Json::array();
        for (const auto& c : s.subclusters) subs.push_back({{"mean", vec_to_json(c.mean)}, {"weight", c.weight}, {"var", c.var}});
        subjects.push_back({{"token", s.token}, {"subclusters", subs}});
    }
    Json contexts = Json::array();
    for (const auto& c : w.contexts) contexts.push_back({{"token", c.token}, {"offset", vec_to_json(c.offset)}});
    return {{"version", kFormatVersion}, {"latent_dim", w.latent_dim}, {"subjects", subjects}, {"contexts", contexts}, {"seed", w.seed}};
}

inline WorldSpec world_from_json(const Json& j) {
    const std::string where = "world";
    check_version(j, where);
    WorldSpec w;
    w.latent_dim = get_field<std::size_t>(j, "latent_dim", where);
    w.seed = get_field<std::uint64_t>(j, "seed", where);
    const auto& subjects = field(j, "subjects", where);
    if (!subjects.is_array()) throw std::invalid_argument(where + ".subjects: expected an array");
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        const std::string sw = where + ".subjects[" + std::to_string(i) + "]";
        SubjectSpec s{get_field<std::string>(subjects[i], "token", sw), {}};
        const auto& subs = field(subjects[i], "subclusters", sw);
        if (!subs.is_array()) throw std::invalid_argument(sw + ".subclusters: expected an array");
        for (std::size_t k = 0; k < subs.size(); ++k) {
            const std::string kw = sw + ".subclusters[" + std::to_string(k) + "]";
            s.subclusters.push_back({vec_from_json(field(subs[k], "mean", kw), kw + ".mean"),
                                     get_field<double>(subs[k], "weight", kw), get_field<double>(subs[k], "var", kw)});
        }
        w.subjects.push_back(std::move(s));
    }
    const auto& contexts = field(j, "contexts", where);
    if (!contexts.is_array()) throw std::invalid_argument(where + ".contexts: expected an array");
    for (std::size_t i = 0; i < contexts.size(); ++i) {
        const std::string cw = where + ".contexts[" + std::to_string(i) + "]";
        w.contexts.push_back({get_field<std::string>(contexts[i], "token", cw), vec_from_json(field(contexts[i], "offset", cw), cw + ".offset")});
    }
    w.validate();
    return w;
}

inline Json to_json(const Vocabulary& v) {
    Json tokens = Json::object();
    for (const auto& [k, e] : v.table) tokens[k] = vec_to_json(e);
    return {{"embed_dim", v.embed_dim}, {"tokens", tokens}};
}

inline Vocabulary vocab_from_json(const Json& j) {
    const std::string where = "vocab";
    Vocabulary v;
    v.embed_dim = get_field<std::size_t>(j, "embed_dim", where);
    const auto& tokens = field(j, "tokens", where);
    if (!tokens.is_object()) throw std::invalid_argument(where + ".tokens: expected an object");
    for (auto it = tokens.begin(); it != tokens.end(); ++it) {
        Vector e = vec_from_json(it.value(), where + ".tokens." + it.key());
        if (static_cast<std::size_t>(e.size()) != v.embed_dim)
            throw std::invalid_argument(where + ".tokens." + it.key() + ": embedding has wrong dimension");
        v.table.emplace(it.key(), std::move(e));
    }
    if (!v.contains(kEmptyToken) || !v.at(kEmptyToken).isZero(0.0))
        throw std::invalid_argument(where + ".tokens: the empty token must map to the zero vector");
    return v;
}

// ---------------------------------------------------------------------------
// Parameters, optimizer, schedule

inline Json to_json(const ParamSet& ps) {
    Json out = Json::array();
    for (const auto& p : ps) out.push_back({{"name", p.name}, {"shape", p.shape}, {"data", p.data}});
    return out;
}

inline ParamSet params_from_json(const Json& j, const std::string& where) {
    if (!j.is_array()) throw std::invalid_argument(where + ": expected an array");
    ParamSet ps;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string pw = where + "[" + std::to_string(i) + "]";
        ParamTensor p{get_field<std::string>(j[i], "name", pw), get_field<std::vector<std::size_t>>(j[i], "shape", pw),
                      get_field<std::vector<double>>(j[i], "data", pw)};
        if (!p.consistent()) throw std::invalid_argument(pw + ": shape does not match data length");
        ps.push_back(std::move(p));
    }
    return ps;
}

inline Json to_json(const AdamWState& s) {
    return {{"step_count", s.step_count}, {"first_moment", s.first_moment}, {"second_moment", s.second_moment}};
}

inline AdamWState adamw_from_json(const Json& j, const std::string& where) {
    AdamWState s;
    s.step_count = get_field<std::uint64_t>(j, "step_count", where);
    s.first_moment = get_field<std::vector<std::vector<double>>>(j, "first_moment", where);
    s.second_moment = get_field<std::vector<std::vector<double>>>(j, "second_moment", where);
    return s;
}

inline Json to_json(const MlpSpec& s) {
    Json j = {{"layer_widths", s.layer_widths}, {"activation", s.activation == Activation::SiLU ? "silu" : "tanh"}};
    j["feature_layer_index"] = s.feature_layer_index ? Json(*s.feature_layer_index) : Json(nullptr);
    return j;
}

inline MlpSpec mlp_spec_from_json(const Json& j, const std::string& where) {
    MlpSpec s;
    s.layer_widths = get_field<std::vector<std::size_t>>(j, "layer_widths", where);
    const auto act = get_field<std::string>(j, "activation", where);
    if (act == "silu") {
        s.activation = Activation::SiLU;
    } else if (act == "tanh") {
        s.activation = Activation::Tanh;
    } else {
        throw std::invalid_argument(where + ".activation: unknown activation '" + act + "'");
    }
    const auto& f = field(j, "feature_layer_index", where);
    if (!f.is_null()) s.feature_layer_index = get_as<std::size_t>(f, where + ".feature_layer_index");
    s.validate();
    return s;
}

inline Json to_json(const NoiseSchedule& s) { return {{"kind", to_string(s.kind)}, {"T", s.T}}; }

/// Schedules are stored by (kind, T) and rebuilt; the table is a pure
/// function of both.
inline NoiseSchedule schedule_from_json(const Json& j, const std::string& where) {
    return make_schedule(schedule_kind_from_string(get_field<std::string>(j, "kind", where)), get_field<int>(j, "T", where));
}

// ---------------------------------------------------------------------------
// Denoiser checkpoint

inline Json to_json(const TrainConfig& c) {
    return {{"steps", c.steps},
            {"batch_size", c.batch_size},
            {"p_uncond", c.p_uncond},
            {"p_describe", c.p_describe},
            {"lr", c.opt.lr},
            {"beta1", c.opt.beta1},
            {"beta2", c.opt.beta2},
            {"eps", c.opt.eps},
            {"weight_decay", c.opt.weight_decay},
            {"lr_final_fraction", c.lr_final_fraction},
            {"seed", c.seed},
            {"hidden", c.arch.hidden},
            {"feature_layer", c.arch.feature_layer}};
}

/// Missing keys keep their defaults so configs can be partial.
inline TrainConfig train_config_from_json(const Json& j, TrainConfig c = {}) {
    const std::string where = "train";
    if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
    auto opt = [&](const char* key, auto& dst) {
        if (j.contains(key)) dst = get_as<std::decay_t<decltype(dst)>>(j.at(key), where + "." + key);
    };
    opt("steps", c.steps);
    opt("batch_size", c.batch_size);
    opt("p_uncond", c.p_uncond);
    opt("p_describe", c.p_describe);
    opt("lr", c.opt.lr);
    opt("beta1", c.opt.beta1);
    opt("beta2", c.opt.beta2);
    opt("eps", c.opt.eps);
    opt("weight_decay", c.opt.weight_decay);
    opt("lr_final_fraction", c.lr_final_fraction);
    opt("seed", c.seed);
    opt("hidden", c.arch.hidden);
    opt("feature_layer", c.arch.feature_layer);
    c.validate();
    return c;
}

/// {"version", "spec", "params", "optimizer_state", "schedule", ...}.
inline Json checkpoint_to_json(const TrainState& st, const NoiseSchedule& sched, const TrainConfig& cfg) {
    const auto& d = st.denoiser;
    Json spec = to_json(d.mlp);
    spec["latent_dim"] = d.latent;
    spec["embed_dim"] = d.embed_dim;
    spec["time_embed_dim"] = kTimeEmbedDim;
    return {{"version", kFormatVersion}, {"kind", "denoiser"},     {"spec", spec},
            {"params", to_json(d.params)}, {"optimizer_state", to_json(st.opt)}, {"schedule", to_json(sched)},
            {"step", st.step},             {"train", to_json(cfg)},  {"losses", st.losses}};
}

struct Checkpoint {
    TrainState state;
    NoiseSchedule sched;
    TrainConfig cfg;
};

inline Checkpoint checkpoint_from_json(const Json& j) {
    const std::string where = "checkpoint";
    check_version(j, where);
    Checkpoint ck;
    const auto& spec = field(j, "spec", where);
    auto& d = ck.state.denoiser;
    d.mlp = mlp_spec_from_json(spec, where + ".spec");
    d.latent = get_field<std::size_t>(spec, "latent_dim", where + ".spec");
    d.embed_dim = get_field<std::size_t>(spec, "embed_dim", where + ".spec");
    if (get_field<std::size_t>(spec, "time_embed_dim", where + ".spec") != kTimeEmbedDim)
        throw std::invalid_argument(where + ".spec.time_embed_dim: unsupported value");
    ck.sched = schedule_from_json(field(j, "schedule", where), where + ".schedule");
    d.T = ck.sched.T;
    d.params = params_from_json(field(j, "params", where), where + ".params");
    d.validate();
    if (j.contains("optimizer_state") && !j.at("optimizer_state").is_null())
        ck.state.opt = adamw_from_json(j.at("optimizer_state"), where + ".optimizer_state");
    ck.state.step = j.contains("step") ? get_field<int>(j, "step", where) : 0;
    if (j.contains("losses")) ck.state.losses = get_field<std::vector<double>>(j, "losses", where);
    if (j.contains("train")) ck.cfg = train_config_from_json(j.at("train"));
    return ck;
}

// ---------------------------------------------------------------------------
// Prompts, base sets, projectors

inline Json to_json(const Prompt& p) { return {{"tokens", p.tokens}, {"base_indices", p.base_indices}}; }

inline Prompt prompt_from_json(const Json& j, const std::string& where) {
    Prompt p{get_field<std::vector<std::string>>(j, "tokens", where), get_field<std::vector<std::size_t>>(j, "base_indices", where)};
    for (std::size_t b : p.base_indices)
        if (b >= p.tokens.size()) throw std::invalid_argument(where + ".base_indices: index out of range");
    return p;
}

inline Json to_json(const BaseSet& bs) {
    Json entries = Json::array();
    for (const auto& e : bs.entries)
        entries.push_back({{"z0", vec_to_json(e.z0)}, {"z_feat", vec_to_json(e.z_feat)}, {"h", vec_to_json(e.h)}, {"assigned", e.assigned}});
    return {{"version", kFormatVersion},
            {"kind", "base_set"},
            {"prompt_tar", to_json(bs.prompt_tar)},
            {"target_index", bs.target_index ? Json(*bs.target_index) : Json(nullptr)},
            {"feature_t", bs.feature_t},
            {"cfg_scale", bs.cfg_scale},
            {"entries", entries}};
}

inline BaseSet base_set_from_json(const Json& j) {
    const std::string where = "base_set";
    check_version(j, where);
    BaseSet bs;
    bs.prompt_tar = prompt_from_json(field(j, "prompt_tar", where), where + ".prompt_tar");
    bs.feature_t = get_field<int>(j, "feature_t", where);
    bs.cfg_scale = get_field<double>(j, "cfg_scale", where);
    const auto& entries = field(j, "entries", where);
    if (!entries.is_array()) throw std::invalid_argument(where + ".entries: expected an array");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const std::string ew = where + ".entries[" + std::to_string(i) + "]";
        bs.entries.push_back({vec_from_json(field(entries[i], "z0", ew), ew + ".z0"),
                              vec_from_json(field(entries[i], "z_feat", ew), ew + ".z_feat"),
                              vec_from_json(field(entries[i], "h", ew), ew + ".h"), get_field<std::vector<int>>(entries[i], "assigned", ew)});
    }
    if (bs.entries.size() < 2) throw std::invalid_argument(where + ".entries: need at least 2 entries");
    const auto& ti = field(j, "target_index", where);
    if (!ti.is_null()) {
        const auto t = get_as<std::size_t>(ti, where + ".target_index");
        if (t >= bs.entries.size()) throw std::invalid_argument(where + ".target_index: out of range");
        bs.target_index = t;
    }
    return bs;
}

inline Json to_json(const ProjectorSpec& s) {
    return {{"feature_dim", s.feature_dim}, {"embed_dim", s.embed_dim}, {"width", s.width},
            {"blocks", s.blocks},           {"outputs", s.outputs},     {"batch_norm", s.batch_norm},
            {"bn_momentum", s.bn_momentum}, {"norm_eps", s.norm_eps}};
}

inline ProjectorSpec projector_spec_from_json(const Json& j, const std::string& where) {
    ProjectorSpec s;
    s.feature_dim = get_field<std::size_t>(j, "feature_dim", where);
    s.embed_dim = get_field<std::size_t>(j, "embed_dim", where);
    s.width = get_field<std::size_t>(j, "width", where);
    s.blocks = get_field<std::size_t>(j, "blocks", where);
    s.outputs = get_field<std::size_t>(j, "outputs", where);
    s.batch_norm = get_field<bool>(j, "batch_norm", where);
    s.bn_momentum = get_field<double>(j, "bn_momentum", where);
    s.norm_eps = get_field<double>(j, "norm_eps", where);
    return s;
}

inline Json to_json(const TunedProjector& tp) {
    Json stats = Json::array();
    for (std::size_t r = 0; r < tp.proj.running_mean.size(); ++r)
        stats.push_back({{"mean", vec_to_json(tp.proj.running_mean[r])}, {"var", vec_to_json(tp.proj.running_var[r])}});
    return {{"version", kFormatVersion}, {"kind", "projector"},         {"spec", to_json(tp.proj.spec)},
            {"slots", tp.slots},         {"params", to_json(tp.proj.params)}, {"norm_stats", stats}};
}

inline TunedProjector projector_from_json(const Json& j) {
    const std::string where = "projector";
    check_version(j, where);
    TunedProjector tp;
    tp.proj.spec = projector_spec_from_json(field(j, "spec", where), where + ".spec");
    tp.slots = get_field<std::vector<std::size_t>>(j, "slots", where);
    if (tp.slots.size() != tp.proj.spec.outputs) throw std::invalid_argument(where + ".slots: one slot per output required");
    tp.proj.params = params_from_json(field(j, "params", where), where + ".params");
    Rng dummy(0);
    const auto ref = make_projector(tp.proj.spec, dummy);
    if (ref.params.size() != tp.proj.params.size()) throw std::invalid_argument(where + ".params: wrong tensor count");
    for (std::size_t i = 0; i < ref.params.size(); ++i)
        if (ref.params[i].name != tp.proj.params[i].name || ref.params[i].shape != tp.proj.params[i].shape)
            throw std::invalid_argument(where + ".params[" + std::to_string(i) + "]: expected " + ref.params[i].name);
    const auto& stats = field(j, "norm_stats", where);
    if (!stats.is_array() || stats.size() != ref.running_mean.size())
        throw std::invalid_argument(where + ".norm_stats: one entry per residual block required");
    for (std::size_t r = 0; r < stats.size(); ++r) {
        const std::string sw = where + ".norm_stats[" + std::to_string(r) + "]";
        tp.proj.running_mean.push_back(vec_from_json(field(stats[r], "mean", sw), sw + ".mean"));
        tp.proj.running_var.push_back(vec_from_json(field(stats[r], "var", sw), sw + ".var"));
    }
    return tp;
}

// ---------------------------------------------------------------------------
// Configs

inline Json to_json(const GuidanceConfig& g) {
    return {{"eta1", g.eta1},
            {"eta2", g.eta2},
            {"v", g.v},
            {"window", {g.window_begin, g.window_end}},
            {"steps", g.steps},
            {"fallback_scale", g.fallback_scale},
            {"fallback", to_string(g.fallback)},
            {"aver_as_empty", g.aver_as_empty}};
}

inline GuidanceConfig guidance_from_json(const Json& j, GuidanceConfig g = {}) {
    const std::string where = "guidance";
    if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
    auto opt = [&](const char* key, auto& dst) {
        if (j.contains(key)) dst = get_as<std::decay_t<decltype(dst)>>(j.at(key), where + "." + key);
    };
    opt("eta1", g.eta1);
    opt("eta2", g.eta2);
    opt("v", g.v);
    opt("steps", g.steps);
    opt("fallback_scale", g.fallback_scale);
    opt("aver_as_empty", g.aver_as_empty);
    if (j.contains("window")) {
        const auto w = get_as<std::vector<int>>(j.at("window"), where + ".window");
        if (w.size() != 2) throw std::invalid_argument(where + ".window: expected [begin, end]");
        g.window_begin = w[0];
        g.window_end = w[1];
    }
    if (j.contains("fallback")) g.fallback = fallback_condition_from_string(get_as<std::string>(j.at("fallback"), where + ".fallback"));
    g.validate();
    return g;
}

inline Json to_json(const TuneConfig& c) {
    return {{"K", c.K},
            {"M", c.M},
            {"lambda1", c.lambda1},
            {"lambda2", c.lambda2},
            {"max_steps", c.max_steps},
            {"min_steps", c.min_steps},
            {"plateau_patience", c.plateau_patience},
            {"ma_window", c.ma_window},
            {"plateau_tol", c.plateau_tol},
            {"sigma_aug", c.sigma_aug},
            {"lr", c.opt.lr},
            {"weight_decay", c.opt.weight_decay},
            {"seed", c.seed},
            {"width", c.width},
            {"blocks", c.blocks},
            {"batch_norm", c.batch_norm}};
}

inline TuneConfig tune_config_from_json(const Json& j, TuneConfig c = {}) {
    const std::string where = "tune";
    if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
    auto opt = [&](const char* key, auto& dst) {
        if (j.contains(key)) dst = get_as<std::decay_t<decltype(dst)>>(j.at(key), where + "." + key);
    };
    opt("K", c.K);
    opt("M", c.M);
    opt("lambda1", c.lambda1);
    opt("lambda2", c.lambda2);
    opt("max_steps", c.max_steps);
    opt("min_steps", c.min_steps);
    opt("plateau_patience", c.plateau_patience);
    opt("ma_window", c.ma_window);
    opt("plateau_tol", c.plateau_tol);
    opt("sigma_aug", c.sigma_aug);
    opt("lr", c.opt.lr);
    opt("weight_decay", c.opt.weight_decay);
    opt("seed", c.seed);
    opt("width", c.width);
    opt("blocks", c.blocks);
    opt("batch_norm", c.batch_norm);
    if (c.lambda1 < 0.0 || c.lambda2 < 0.0) throw std::invalid_argument(where + ": lambdas must be non-negative");
    return c;
}

// ---------------------------------------------------------------------------
// Results and reports

inline Json to_json(const SampleSet& s, const GuidanceConfig& g, std::size_t factor, int target_k) {
    Json samples = Json::array();
    for (Eigen::Index j = 0; j < s.z0.cols(); ++j) {
        const auto& a = s.assigned[static_cast<std::size_t>(j)];
        samples.push_back({{"z0", vec_to_json(s.z0.col(j))}, {"subcluster", a.size() == 1 ? Json(a[0]) : Json(a)}});
    }
    return {{"version", kFormatVersion}, {"prompt", to_json(s.prompt)}, {"gcfg", to_json(g)},
            {"samples", samples},         {"target_subcluster", target_k}, {"capture_rate", capture_rate(s, factor, target_k)},
            {"calls_per_step", std::vector<int>(s.calls_per_step.begin() + 1, s.calls_per_step.end())}};
}

inline Json to_json(const EvalReport& r) {
    Json rows = Json::array();
    for (const auto& x : r.rows)
        rows.push_back({{"axis_value", x.axis_value}, {"seed", x.seed}, {"context", x.context},
                        {"capture", x.capture}, {"consistency", x.consistency}, {"diversity", x.diversity}});
    Json per = Json::array();
    for (const auto& c : r.per_context)
        per.push_back({{"context", c.context}, {"capture_mean", c.capture_mean}, {"capture_std", c.capture_std},
                       {"consistency", c.consistency}, {"diversity", c.diversity}});
    return {{"version", kFormatVersion}, {"subject", r.subject}, {"factor", r.factor}, {"target_k", r.target_k},
            {"n_samples", r.n_samples},  {"seeds", r.seeds},     {"contexts", r.contexts}, {"gcfg", to_json(r.gcfg)},
            {"guided", r.guided},        {"rows", rows},         {"per_context", per},     {"mean_capture", r.mean_capture}};
}

inline EvalReport eval_report_from_json(const Json& j) {
    const std::string where = "report";
    check_version(j, where);
    EvalReport r;
    r.subject = get_field<std::string>(j, "subject", where);
    r.factor = get_field<std::size_t>(j, "factor", where);
    r.target_k = get_field<int>(j, "target_k", where);
    r.n_samples = get_field<std::size_t>(j, "n_samples", where);
    r.seeds = get_field<std::vector<std::uint64_t>>(j, "seeds", where);
    r.contexts = get_field<std::vector<std::string>>(j, "contexts", where);
    r.gcfg = guidance_from_json(field(j, "gcfg", where));
    r.guided = get_field<bool>(j, "guided", where);
    for (const auto& x : field(j, "rows", where))
        r.rows.push_back({get_field<std::string>(x, "axis_value", where), get_field<std::uint64_t>(x, "seed", where),
                          get_field<std::string>(x, "context", where), get_field<double>(x, "capture", where),
                          get_field<double>(x, "consistency", where), get_field<double>(x, "diversity", where)});
    for (const auto& c : field(j, "per_context", where))
        r.per_context.push_back({get_field<std::string>(c, "context", where), get_field<double>(c, "capture_mean", where),
                                 get_field<double>(c, "capture_std", where), get_field<double>(c, "consistency", where),
                                 get_field<double>(c, "diversity", where)});
    r.mean_capture = get_field<double>(j, "mean_capture", where);
    return r;
}

inline Json to_json(const SweepTable& t) {
    Json reports = Json::array();
    for (const auto& r : t.reports) reports.push_back(to_json(r));
    return {{"version", kFormatVersion}, {"axis", to_string(t.axis)}, {"values", t.values}, {"reports", reports}};
}

inline SweepTable sweep_table_from_json(const Json& j) {
    const std::string where = "sweep";
    check_version(j, where);
    SweepTable t;
    t.axis = sweep_axis_from_string(get_field<std::string>(j, "axis", where));
    t.values = get_field<std::vector<std::string>>(j, "values", where);
    for (const auto& r : field(j, "reports", where)) t.reports.push_back(eval_report_from_json(r));
    if (t.reports.size() != t.values.size()) throw std::invalid_argument(where + ".reports: one report per value required");
    return t;
}

inline Json to_json(const OracleReport& r) {
    Json rows = Json::array();
    for (const auto& x : r.rows) rows.push_back({{"eta1", x.eta1}, {"eta2", x.eta2}, {"capture", x.capture}});
    return {{"version", kFormatVersion}, {"subject", r.subject}, {"context", r.context}, {"target_k", r.target_k},
            {"n_samples", r.n_samples},  {"seed", r.seed},       {"rows", rows}};
}

inline OracleReport oracle_report_from_json(const Json& j) {
    const std::string where = "oracle";
    check_version(j, where);
    OracleReport r{get_field<std::string>(j, "subject", where), get_field<std::string>(j, "context", where),
                   get_field<int>(j, "target_k", where),        get_field<std::size_t>(j, "n_samples", where),
                   get_field<std::uint64_t>(j, "seed", where),  {}};
    for (const auto& x : field(j, "rows", where))
        r.rows.push_back({get_field<double>(x, "eta1", where), get_field<double>(x, "eta2", where), get_field<double>(x, "capture", where)});
    return r;
}

// ---------------------------------------------------------------------------
// CSV

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double x) { return Json(x).dump(); }

inline std::string eval_csv(std::span<const EvalReport> reports) {
    std::string out = "axis_value,seed,context,capture,consistency,diversity\n";
    for (const auto& r : reports)
        for (const auto& x : r.rows)
            out += x.axis_value + "," + std::to_string(x.seed) + "," + x.context + "," + format_double(x.capture) + "," +
                   format_double(x.consistency) + "," + format_double(x.diversity) + "\n";
    return out;
}

inline std::string train_loss_csv(const std::vector<double>& losses) {
    std::string out = "step,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) out += std::to_string(i) + "," + format_double(losses[i]) + "\n";
    return out;
}

inline std::string tune_loss_csv(const std::vector<TuneRecord>& curve) {
    std::string out = "step,loss_total,loss_tar,loss_aux,loss_aver\n";
    for (const auto& r : curve)
        out += std::to_string(r.step) + "," + format_double(r.total) + "," + format_double(r.tar) + "," + format_double(r.aux) +
               "," + format_double(r.aver) + "\n";
    return out;
}

/// JSON (full fidelity) at `stem`.json and the flat table at `stem`.csv.
inline void write_report(const EvalReport& r, const std::filesystem::path& stem) {
    write_json_file(std::filesystem::path(stem).replace_extension(".json"), to_json(r));
    write_text_file(std::filesystem::path(stem).replace_extension(".csv"), eval_csv(std::span<const EvalReport>(&r, 1)));
}

inline void write_report(const SweepTable& t, const std::filesystem::path& stem) {
    write_json_file(std::filesystem::path(stem).replace_extension(".json"), to_json(t));
    write_text_file(std::filesystem::path(stem).replace_extension(".csv"), eval_csv(t.reports));
}

} // namespace oneactor
