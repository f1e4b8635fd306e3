#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "oneactor/errors.hpp"
#include "oneactor/eval.hpp"
#include "oneactor/infer.hpp"
#include "oneactor/io.hpp"
#include "oneactor/training.hpp"
#include "oneactor/tune.hpp"
#include "oneactor/world.hpp"

namespace fs = std::filesystem;
using namespace oneactor;

namespace {

struct Global {
    std::string config;
    std::uint64_t seed = 0;
    std::string out = "out";
};

/// Sections of the --config file; every section and key is optional.
struct RunConfig {
    ScheduleKind schedule_kind = ScheduleKind::LinearBeta;
    int T = 100;
    TrainConfig train;
    TuneConfig tune;
    GuidanceConfig guidance;
    std::size_t eval_samples = 200;
    std::size_t eval_seeds = 3;
};

RunConfig load_config(const Global& g) {
    RunConfig rc;
    rc.train.seed = g.seed;
    rc.tune.seed = g.seed;
    if (g.config.empty()) return rc;
    const Json j = read_json_file(g.config);
    if (!j.is_object()) throw std::invalid_argument(g.config + ": expected an object");
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        if (s.contains("kind")) rc.schedule_kind = schedule_kind_from_string(get_field<std::string>(s, "kind", "schedule"));
        if (s.contains("T")) rc.T = get_field<int>(s, "T", "schedule");
    }
    if (j.contains("train")) rc.train = train_config_from_json(j.at("train"), rc.train);
    if (j.contains("tune")) rc.tune = tune_config_from_json(j.at("tune"), rc.tune);
    if (j.contains("guidance")) rc.guidance = guidance_from_json(j.at("guidance"), rc.guidance);
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        if (e.contains("n_samples")) rc.eval_samples = get_field<std::size_t>(e, "n_samples", "eval");
        if (e.contains("seeds")) rc.eval_seeds = get_field<std::size_t>(e, "seeds", "eval");
    }
    return rc;
}

std::string or_default(const std::string& given, const Global& g, const char* name) {
    return given.empty() ? (fs::path(g.out) / name).string() : given;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

/// Subjects joined by commas, optionally followed by the context: "hobbit,robot".
Prompt make_prompt(const std::string& subjects, const std::string& context) {
    const auto s = split_list(subjects);
    if (s.empty()) throw std::invalid_argument("--prompt needs at least one subject");
    return s.size() == 1 ? subject_prompt(s[0], context) : multi_subject_prompt(s, context);
}

struct Model {
    Checkpoint ck;
    Vocabulary vocab;
};

Model load_model(const std::string& path) {
    const Json j = read_json_file(path);
    Model m{checkpoint_from_json(j), vocab_from_json(field(j, "vocab", "checkpoint"))};
    if (m.ck.state.denoiser.embed_dim != m.vocab.embed_dim)
        throw std::invalid_argument("checkpoint: vocab and denoiser disagree on embed_dim");
    return m;
}

Json checkpoint_json(const TrainState& st, const NoiseSchedule& sched, const TrainConfig& cfg, const Vocabulary& vocab,
                     const std::vector<std::string>& subjects) {
    Json j = checkpoint_to_json(st, sched, cfg);
    j["vocab"] = to_json(vocab);
    j["subjects"] = subjects;
    return j;
}

void print_calls(const SampleSet& s) {
    std::printf("denoiser calls per step:");
    for (std::size_t k = 1; k < s.calls_per_step.size(); ++k) std::printf(" %d", s.calls_per_step[k]);
    std::printf("\n");
}

/// Scatter of the first two latent coordinates, coloured by the sub-cluster
/// of the first subject.
std::string scatter_svg(const SampleSet& s) {
    static const char* colours[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"};
    double lo_x = 1e300, hi_x = -1e300, lo_y = 1e300, hi_y = -1e300;
    for (Eigen::Index j = 0; j < s.z0.cols(); ++j) {
        lo_x = std::min(lo_x, s.z0(0, j));
        hi_x = std::max(hi_x, s.z0(0, j));
        lo_y = std::min(lo_y, s.z0(1, j));
        hi_y = std::max(hi_y, s.z0(1, j));
    }
    const double size = 480.0, pad = 20.0;
    const double span = std::max({hi_x - lo_x, hi_y - lo_y, 1e-9});
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad << "\" height=\"" << size + 2 * pad << "\">\n";
    for (Eigen::Index j = 0; j < s.z0.cols(); ++j) {
        const double x = pad + (s.z0(0, j) - lo_x) / span * size;
        const double y = pad + size - (s.z0(1, j) - lo_y) / span * size;
        const int k = s.assigned[static_cast<std::size_t>(j)].at(0);
        o << "<circle cx=\"" << x << "\" cy=\"" << y << "\" r=\"2.5\" fill=\"" << colours[k % 6] << "\"/>\n";
    }
    o << "</svg>\n";
    return o.str();
}

// ---------------------------------------------------------------------------
// Commands

struct MakeWorldArgs {
    std::string spec;
};

void cmd_make_world(const Global& g, const MakeWorldArgs& a) {
    load_config(g);
    const WorldSpec w = a.spec.empty() ? make_default_world(g.seed) : world_from_json(read_json_file(a.spec));
    const auto path = fs::path(g.out) / "world.json";
    write_json_file(path, to_json(w));
    std::printf("wrote %s (%zu subjects, %zu contexts, latent %zu)\n", path.string().c_str(), w.subjects.size(),
                w.contexts.size(), w.latent_dim);
}

struct TrainArgs {
    std::string world;
    std::string subjects;
    std::string resume;
    int steps = -1;
    int stop_at = -1;
};

void cmd_train_base(const Global& g, const TrainArgs& a) {
    const RunConfig rc = load_config(g);
    const WorldSpec world = world_from_json(read_json_file(or_default(a.world, g, "world.json")));
    const auto templates = default_templates();
    const auto product = split_list(a.subjects);
    if (product.size() == 1) throw std::invalid_argument("--subjects needs at least two subjects");
    ProductWorld pw{world, product};
    for (const auto& s : product) world.subject(s);

    TrainConfig cfg = rc.train;
    if (a.steps >= 0) cfg.steps = a.steps;
    NoiseSchedule sched = make_schedule(rc.schedule_kind, rc.T);
    Vocabulary vocab = make_vocab(world, templates, g.seed);
    TrainState st;
    if (!a.resume.empty()) {
        auto m = load_model(a.resume);
        st = std::move(m.ck.state);
        sched = m.ck.sched;
        vocab = std::move(m.vocab);
        const auto steps = cfg.steps;
        cfg = m.ck.cfg;
        if (a.steps >= 0) cfg.steps = steps;
        std::printf("resuming at step %d of %d\n", st.step, cfg.steps);
    } else {
        st = init_train_state(product.empty() ? world.latent_dim : pw.latent_dim(), vocab, cfg, sched);
    }
    const auto captions = product.empty() ? world_captions(world, vocab, templates, cfg.p_describe)
                                          : product_captions(pw, vocab, templates, cfg.p_describe);
    train_denoiser(st, captions, cfg, sched, a.stop_at);

    const auto path = fs::path(g.out) / "denoiser.json";
    write_json_file(path, checkpoint_json(st, sched, cfg, vocab, product));
    write_text_file(fs::path(g.out) / "train_loss.csv", train_loss_csv(st.losses));
    std::printf("wrote %s at step %d\n", path.string().c_str(), st.step);
}

struct GenBaseArgs {
    std::string world;
    std::string checkpoint;
    std::string prompt = "hobbit";
    std::string context;
    std::size_t n = kDefaultBaseSetSize;
    std::optional<std::size_t> target_index;
    double cfg_scale = 1.0;
};

void cmd_gen_base(const Global& g, const GenBaseArgs& a) {
    const RunConfig rc = load_config(g);
    const WorldSpec world = world_from_json(read_json_file(or_default(a.world, g, "world.json")));
    const Model m = load_model(or_default(a.checkpoint, g, "denoiser.json"));
    const Prompt p = make_prompt(a.prompt, a.context.empty() ? world.null_context().token : a.context);
    Rng rng(g.seed, 0x7461726774ULL);
    auto bs = choose_target(generate_base_set(m.ck.state.denoiser, m.vocab, world, p, a.n, m.ck.sched, g.seed, a.cfg_scale,
                                              rc.guidance.steps),
                            a.target_index, rng);
    std::printf("proposals:\n");
    for (std::size_t i = 0; i < bs.entries.size(); ++i) {
        const auto& e = bs.entries[i];
        std::printf("  [%2zu]%s z0 =", i, i == *bs.target_index ? "*" : " ");
        for (Eigen::Index d = 0; d < e.z0.size(); ++d) std::printf(" % .4f", e.z0[d]);
        std::printf("  sub-cluster");
        for (int k : e.assigned) std::printf(" %d", k);
        std::printf("\n");
    }
    std::printf("target: %zu%s\n", *bs.target_index, a.target_index ? "" : " (random; pass --target-index to choose)");
    const auto path = fs::path(g.out) / "base_set.json";
    write_json_file(path, to_json(bs));
    std::printf("wrote %s\n", path.string().c_str());
}

struct TuneArgs {
    std::string world;
    std::string checkpoint;
    std::string base_set;
    std::optional<std::size_t> slot;
    std::string name = "projector";
};

void cmd_tune(const Global& g, const TuneArgs& a) {
    const RunConfig rc = load_config(g);
    const WorldSpec world = world_from_json(read_json_file(or_default(a.world, g, "world.json")));
    const Model m = load_model(or_default(a.checkpoint, g, "denoiser.json"));
    const BaseSet bs = base_set_from_json(read_json_file(or_default(a.base_set, g, "base_set.json")));
    TuneConfig cfg = rc.tune;
    std::optional<std::vector<std::size_t>> slots;
    if (a.slot) {
        cfg.loss_mask = factor_loss_mask(world.latent_dim, bs.prompt_tar.base_indices.size(), *a.slot);
        slots = std::vector<std::size_t>{*a.slot};
    }
    const auto res = tune(m.ck.state.denoiser, m.vocab, bs, default_templates(), cfg, m.ck.sched, slots);
    const auto path = fs::path(g.out) / (a.name + ".json");
    write_json_file(path, to_json(res.tuned));
    write_text_file(fs::path(g.out) / (a.name + "_loss.csv"), tune_loss_csv(res.curve));
    std::printf("tuned %d steps (%s), final moving-average loss %.6f\nwrote %s\n", res.stopped_at,
                res.plateaued ? "plateau" : "step limit", loss_moving_average(res.curve, res.curve.size()),
                path.string().c_str());
}

struct GuidanceArgs {
    std::optional<double> eta1, eta2, v;
    std::string window;
    std::string fallback;
    bool aver_as_empty = false;

    void add(CLI::App* app) {
        app->add_option("--eta1", eta1, "Target guidance scale");
        app->add_option("--eta2", eta2, "Auxiliary exclusion scale (0 = two-call fast path)");
        app->add_option("--v", v, "Semantic scale of the offsets");
        app->add_option("--window", window, "Guided sampling steps, e.g. 1-20");
        app->add_option("--fallback", fallback, "Condition outside the window: offset or raw");
        app->add_flag("--aver-as-empty", aver_as_empty, "Use the average condition as the empty condition");
    }

    GuidanceConfig apply(GuidanceConfig g) const {
        if (eta1) g.eta1 = *eta1;
        if (eta2) g.eta2 = *eta2;
        if (v) g.v = *v;
        if (!window.empty()) g = sweep_point(g, SweepAxis::Window, window);
        if (!fallback.empty()) g.fallback = fallback_condition_from_string(fallback);
        if (aver_as_empty) g.aver_as_empty = true;
        g.validate();
        return g;
    }
};

struct SampleArgs {
    std::string world;
    std::string checkpoint;
    std::vector<std::string> projectors;
    std::vector<std::string> base_sets;
    std::string context;
    std::size_t n = 200;
    std::string mode = "factor_masked";
    bool svg = false;
    GuidanceArgs guidance;
};

void cmd_sample(const Global& g, const SampleArgs& a) {
    const RunConfig rc = load_config(g);
    const GuidanceConfig gcfg = a.guidance.apply(rc.guidance);
    const WorldSpec world = world_from_json(read_json_file(or_default(a.world, g, "world.json")));
    const Model m = load_model(or_default(a.checkpoint, g, "denoiser.json"));
    auto projectors = a.projectors;
    auto base_sets = a.base_sets;
    if (projectors.empty()) projectors.push_back(or_default("", g, "projector.json"));
    if (base_sets.empty()) base_sets.push_back(or_default("", g, "base_set.json"));
    if (projectors.size() != base_sets.size())
        throw std::invalid_argument("--projector and --base-set must be given the same number of times");
    std::vector<SubjectProjector> sp;
    for (std::size_t i = 0; i < projectors.size(); ++i)
        sp.push_back({projector_from_json(read_json_file(projectors[i])), base_set_from_json(read_json_file(base_sets[i]))});
    const auto& den = m.ck.state.denoiser;
    const Prompt prompt = with_context(sp[0].base.prompt_tar, a.context.empty() ? world.null_context().token : a.context);

    SampleSet s;
    if (sp.size() == 1) {
        s = sample_consistent(den, sp[0].tuned, sp[0].base, world, m.vocab, prompt, gcfg, a.n, m.ck.sched, g.seed);
    } else {
        s = multi_subject_variant2(den, sp, world, m.vocab, prompt, gcfg, a.n, m.ck.sched, g.seed, variant2_mode_from_string(a.mode));
    }
    Json j = to_json(s, gcfg, 0, sp[0].base.target().assigned.at(0));
    Json caps = Json::array();
    for (std::size_t f = 0; f < prompt.base_indices.size(); ++f) {
        const auto& owner = sp.size() == 1 ? sp[0] : sp.at(f);
        const int k = owner.base.target().assigned.at(f);
        const double c = capture_rate(s, f, k);
        caps.push_back({{"subject", base_subjects(prompt)[f]}, {"target_subcluster", k}, {"capture_rate", c}});
        std::printf("%s: capture %.4f (target sub-cluster %d)\n", base_subjects(prompt)[f].c_str(), c, k);
    }
    j["per_subject"] = caps;
    print_calls(s);
    const auto path = fs::path(g.out) / "samples.json";
    write_json_file(path, j);
    if (a.svg) write_text_file(fs::path(g.out) / "samples.svg", scatter_svg(s));
    std::printf("wrote %s\n", path.string().c_str());
}

struct EvalArgs {
    std::string world;
    std::string checkpoint;
    std::string projector;
    std::string base_set;
    std::optional<std::size_t> n;
    std::optional<std::size_t> seeds;
    bool unguided = false;
    GuidanceArgs guidance;
};

struct Loaded {
    WorldSpec world;
    Model model;
    TunedProjector tuned;
    BaseSet base;
};

Loaded load_pipeline(const Global& g, const std::string& world, const std::string& ck, const std::string& proj,
                     const std::string& bs) {
    return {world_from_json(read_json_file(or_default(world, g, "world.json"))),
            load_model(or_default(ck, g, "denoiser.json")),
            projector_from_json(read_json_file(or_default(proj, g, "projector.json"))),
            base_set_from_json(read_json_file(or_default(bs, g, "base_set.json")))};
}

void print_report(const EvalReport& r) {
    std::printf("%-10s %8s %8s %12s %10s\n", "context", "capture", "std", "consistency", "diversity");
    for (const auto& c : r.per_context)
        std::printf("%-10s %8.4f %8.4f %12.4f %10.4f\n", c.context.c_str(), c.capture_mean, c.capture_std, c.consistency,
                    c.diversity);
    std::printf("mean capture %.4f\n", r.mean_capture);
}

void cmd_eval(const Global& g, const EvalArgs& a) {
    const RunConfig rc = load_config(g);
    const auto L = load_pipeline(g, a.world, a.checkpoint, a.projector, a.base_set);
    const Pipeline pl{L.model.ck.state.denoiser, L.tuned, L.base, L.world, L.model.vocab, L.model.ck.sched};
    const auto contexts = context_tokens(L.world);
    const auto seeds = sweep_seeds(g.seed, a.seeds.value_or(rc.eval_seeds));
    const std::size_t n = a.n.value_or(rc.eval_samples);
    const auto r = a.unguided ? evaluate_unguided(pl, contexts, n, seeds, 1.0, rc.guidance.steps)
                              : evaluate(pl, contexts, a.guidance.apply(rc.guidance), n, seeds);
    print_report(r);
    const auto stem = fs::path(g.out) / (a.unguided ? "report_unguided" : "report");
    write_report(r, stem);
    std::printf("wrote %s.json and %s.csv\n", stem.string().c_str(), stem.string().c_str());
}

struct SweepArgs {
    std::string world;
    std::string checkpoint;
    std::string projector;
    std::string base_set;
    std::string axis = "v";
    std::string values;
    std::optional<std::size_t> repeats;
    std::optional<std::size_t> n;
    GuidanceArgs guidance;
};

void cmd_sweep(const Global& g, const SweepArgs& a) {
    const RunConfig rc = load_config(g);
    const auto L = load_pipeline(g, a.world, a.checkpoint, a.projector, a.base_set);
    const Pipeline pl{L.model.ck.state.denoiser, L.tuned, L.base, L.world, L.model.vocab, L.model.ck.sched};
    SweepSpec spec;
    spec.axis = sweep_axis_from_string(a.axis);
    spec.values = a.values.empty() ? default_sweep_values(spec.axis) : split_list(a.values);
    spec.repeats = a.repeats.value_or(rc.eval_seeds);
    const auto t = sweep(spec, pl, a.guidance.apply(rc.guidance), context_tokens(L.world), a.n.value_or(rc.eval_samples), g.seed);
    std::printf("%-8s %8s\n", a.axis.c_str(), "capture");
    for (std::size_t i = 0; i < t.values.size(); ++i) std::printf("%-8s %8.4f\n", t.values[i].c_str(), t.reports[i].mean_capture);
    const auto stem = fs::path(g.out) / ("sweep_" + a.axis);
    write_report(t, stem);
    std::printf("wrote %s.json and %s.csv\n", stem.string().c_str(), stem.string().c_str());
}

struct OracleArgs {
    std::string world;
    std::string subject = "hobbit";
    std::string context = "street";
    int target = 0;
    std::size_t n = 500;
    std::string eta1s = "0,1,2,4";
    double eta2 = 0.0;
};

void cmd_oracle(const Global& g, const OracleArgs& a) {
    const RunConfig rc = load_config(g);
    const fs::path wp = or_default(a.world, g, "world.json");
    const WorldSpec world = a.world.empty() && !fs::exists(wp) ? make_default_world(g.seed) : world_from_json(read_json_file(wp));
    std::vector<double> eta1s;
    for (const auto& s : split_list(a.eta1s)) eta1s.push_back(parse_number(s));
    const auto r = oracle_experiment(world, a.subject, a.context, a.target, eta1s, a.eta2, a.n, make_schedule(rc.schedule_kind, rc.T),
                                     g.seed);
    std::printf("%-6s %8s\n", "eta1", "capture");
    for (const auto& row : r.rows) std::printf("%-6g %8.4f\n", row.eta1, row.capture);
    const auto path = fs::path(g.out) / "oracle.json";
    write_json_file(path, to_json(r));
    std::printf("wrote %s\n", path.string().c_str());
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale consistent-subject generation lab"};
    app.require_subcommand(1);
    Global g;
    app.add_option("--config", g.config, "JSON run configuration");
    app.add_option("--seed", g.seed, "Seed for every random draw");
    app.add_option("--out", g.out, "Output directory (also the default input location)");

    MakeWorldArgs mw;
    auto* c_mw = app.add_subcommand("make-world", "Write the default world, or validate and copy a world spec");
    c_mw->add_option("--spec", mw.spec, "World spec JSON to validate");

    TrainArgs tr;
    auto* c_tr = app.add_subcommand("train-base", "Train the base conditional denoiser");
    c_tr->add_option("--world", tr.world);
    c_tr->add_option("--subjects", tr.subjects, "Comma-separated subjects for the product world");
    c_tr->add_option("--steps", tr.steps, "Total training steps");
    c_tr->add_option("--stop-at", tr.stop_at, "Stop early at this step (resume later with --resume)");
    c_tr->add_option("--resume", tr.resume, "Checkpoint to continue from");

    GenBaseArgs gb;
    auto* c_gb = app.add_subcommand("gen-base", "Generate base proposals and choose the target");
    c_gb->add_option("--world", gb.world);
    c_gb->add_option("--checkpoint", gb.checkpoint);
    c_gb->add_option("--prompt", gb.prompt, "Subject word(s), comma-separated");
    c_gb->add_option("--context", gb.context, "Context token (default: the null context)");
    c_gb->add_option("--n", gb.n, "Number of proposals")->check(CLI::Range(2, 1000000));
    c_gb->add_option("--target-index", gb.target_index, "Index of the chosen proposal (random if omitted)");
    c_gb->add_option("--cfg-scale", gb.cfg_scale, "Guidance scale of the proposals");

    TuneArgs tu;
    auto* c_tu = app.add_subcommand("tune", "Tune the cluster-conditioned projector");
    c_tu->add_option("--world", tu.world);
    c_tu->add_option("--checkpoint", tu.checkpoint);
    c_tu->add_option("--base-set", tu.base_set);
    c_tu->add_option("--slot", tu.slot, "Offset only this base word and fit only its latent factor");
    c_tu->add_option("--name", tu.name, "Output file stem");

    SampleArgs sa;
    auto* c_sa = app.add_subcommand("sample", "Sample with cluster guidance");
    c_sa->add_option("--world", sa.world);
    c_sa->add_option("--checkpoint", sa.checkpoint);
    c_sa->add_option("--projector", sa.projectors, "Projector file (repeat per subject)");
    c_sa->add_option("--base-set", sa.base_sets, "Base set file (repeat per subject)");
    c_sa->add_option("--context", sa.context);
    c_sa->add_option("--n", sa.n)->check(CLI::PositiveNumber);
    c_sa->add_option("--mode", sa.mode, "Multi-subject mode: factor_masked or token_scoped");
    c_sa->add_flag("--svg", sa.svg, "Also write a scatter plot");
    sa.guidance.add(c_sa);

    EvalArgs ev;
    auto* c_ev = app.add_subcommand("eval", "Capture, consistency and diversity over all contexts");
    c_ev->add_option("--world", ev.world);
    c_ev->add_option("--checkpoint", ev.checkpoint);
    c_ev->add_option("--projector", ev.projector);
    c_ev->add_option("--base-set", ev.base_set);
    c_ev->add_option("--n", ev.n)->check(CLI::PositiveNumber);
    c_ev->add_option("--seeds", ev.seeds)->check(CLI::PositiveNumber);
    c_ev->add_flag("--unguided", ev.unguided, "Evaluate plain conditional sampling instead");
    ev.guidance.add(c_ev);

    SweepArgs sw;
    auto* c_sw = app.add_subcommand("sweep", "Sweep one guidance parameter");
    c_sw->add_option("--world", sw.world);
    c_sw->add_option("--checkpoint", sw.checkpoint);
    c_sw->add_option("--projector", sw.projector);
    c_sw->add_option("--base-set", sw.base_set);
    c_sw->add_option("--axis", sw.axis, "v, eta1, eta2 or window");
    c_sw->add_option("--values", sw.values, "Comma-separated values");
    c_sw->add_option("--repeats", sw.repeats)->check(CLI::PositiveNumber);
    c_sw->add_option("--n", sw.n)->check(CLI::PositiveNumber);
    sw.guidance.add(c_sw);

    OracleArgs orc;
    auto* c_or = app.add_subcommand("oracle", "Exact-score guided sampling on the world");
    c_or->add_option("--world", orc.world);
    c_or->add_option("--subject", orc.subject);
    c_or->add_option("--context", orc.context);
    c_or->add_option("--target", orc.target);
    c_or->add_option("--n", orc.n)->check(CLI::PositiveNumber);
    c_or->add_option("--eta1", orc.eta1s, "Comma-separated eta1 values");
    c_or->add_option("--eta2", orc.eta2);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (c_mw->parsed()) cmd_make_world(g, mw);
        if (c_tr->parsed()) cmd_train_base(g, tr);
        if (c_gb->parsed()) cmd_gen_base(g, gb);
        if (c_tu->parsed()) cmd_tune(g, tu);
        if (c_sa->parsed()) cmd_sample(g, sa);
        if (c_ev->parsed()) cmd_eval(g, ev);
        if (c_sw->parsed()) cmd_sweep(g, sw);
        if (c_or->parsed()) cmd_oracle(g, orc);
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "i/o failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
