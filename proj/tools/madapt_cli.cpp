// SPDX-License-Identifier: Apache-2.0
//
// madapt - command-line front end.
//
//   gen-data     synthetic dataset file
//   pretrain     plain supervised training
//   meta-train   meta-training (dual network unless --no-aux)
//   adapt        test-time optimisation, adapted predictions + traces
//   eval         test-time optimisation + MPJPE / PA-MPJPE
//   experiment   run a plan file into an output directory
//   grad-check   analytic vs finite-difference gradients
//
// Exit codes: 0 ok, 1 other failure, 2 usage/config error, 3 divergence,
// 4 I/O error. Failures print one JSON object on stderr. Every run that
// knows its output path appends one manifest line next to it.

#include "madapt/adapt.hpp"
#include "madapt/experiments.hpp"
#include "madapt/gradcheck.hpp"
#include "madapt/manifest.hpp"
#include "madapt/synth.hpp"
#include "madapt/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace madapt;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

class CheckFailed : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::optional<std::uint64_t> seed_flag;
    std::string config_path;
    int jobs = 1;
    bool quiet = false;
};

json load_config(const std::string& path) {
    if (path.empty()) return json::object();
    try {
        auto j = json::parse(read_file(path));
        if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
        return j;
    } catch (const json::parse_error& e) {
        throw ConfigError("<root>", std::string("not valid JSON: ") + e.what());
    }
}

/// --seed, then the config file, then MADAPT_SEED, then 0.
std::uint64_t resolve_seed(const Common& c, const json& cfg) {
    if (c.seed_flag) return *c.seed_flag;
    if (cfg.contains("seed")) {
        std::uint64_t s = 0;
        read_field(cfg, "seed", s);
        return s;
    }
    if (const char* env = std::getenv("MADAPT_SEED")) {
        try {
            std::size_t used = 0;
            const auto v = std::stoull(env, &used);
            if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("MADAPT_SEED", "not an unsigned integer: '" + std::string(env) + "'");
        }
    }
    return 0;
}

fs::path sibling(const fs::path& out, const std::string& suffix) {
    auto p = out;
    p.replace_extension();
    return p.string() + suffix;
}

void refuse_overwrite_inputs(const fs::path& out, const std::vector<fs::path>& inputs) {
    for (const auto& in : inputs) {
        if (in.empty()) continue;
        std::error_code ec;
        if (fs::exists(out, ec) && fs::equivalent(out, in, ec))
            throw ConfigError("out", "output path would overwrite input " + in.string());
        if (fs::absolute(out).lexically_normal() == fs::absolute(in).lexically_normal())
            throw ConfigError("out", "output path would overwrite input " + in.string());
    }
}

void note(const Common& c, const std::string& msg) {
    if (!c.quiet) std::cerr << "[madapt] " << msg << '\n';
}

// ---------------------------------------------------------------------------
// Config schema text for --help-config
// ---------------------------------------------------------------------------

json config_schema() {
    ExperimentPlan plan;
    AdaptConfig adapt;
    TrainConfig train;
    GradCheckOptions gc;
    return {
        {"format", "JSON object; flags given on the command line override file values; "
                   "seed precedence: --seed, config \"seed\", MADAPT_SEED, 0"},
        {"gen-data",
         {{"domain", "preset name (default | indoor-like | in-the-wild-like) or object "
                     "{preset, name, pose_scale, beta_range, camera_scale_range, camera_trans_range, "
                     "detector_noise_sigma, occlusion_prob}"},
          {"batches", 50},
          {"batch_size", 40},
          {"seed", 0},
          {"defaults.domain", domain_preset("default")}}},
        {"pretrain / meta-train",
         {{"hidden", json(std::vector<int>{128, 128})},
          {"activation", "tanh | relu"},
          {"train", train},
          {"seed", 0}}},
        {"adapt / eval", {{"adapt", adapt}}},
        {"experiment", {{"plan", plan}, {"plan.suite", "ablation | step_curves | detector | ood | lr_grid | inner_steps"},
                        {"plan.methods", "subset of none, eft, meta_only, meta_dual"}}},
        {"grad-check",
         {{"pairs", gc.pairs}, {"step", gc.step}, {"tol", gc.tol}, {"hidden", gc.hidden}, {"seed", 0}}},
        {"exit_codes", {{"0", "success"}, {"1", "other failure (e.g. gradient check failed)"},
                        {"2", "usage or config error"}, {"3", "numerical divergence"}, {"4", "I/O error"}}}};
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::string domain, out;
    std::optional<int> b, m;
};

void run_gen_data(const Common& c, const GenDataArgs& a, RunManifest& man) {
    json cfg = load_config(c.config_path);
    reject_unknown_keys(cfg, {"domain", "batches", "batch_size", "seed"});
    DomainConfig dom = domain_preset("default");
    if (!a.domain.empty()) {
        dom = domain_preset(a.domain);
    } else if (cfg.contains("domain")) {
        dom = cfg.at("domain").get<DomainConfig>();
    }
    dom.validate();
    int B = 50, M = 40;
    read_field(cfg, "batches", B);
    read_field(cfg, "batch_size", M);
    if (a.b) B = *a.b;
    if (a.m) M = *a.m;
    if (B < 1) throw ConfigError("batches", "must be >= 1");
    if (M < 1) throw ConfigError("batch_size", "must be >= 1");
    const auto seed = resolve_seed(c, cfg);
    man.seed = seed;
    man.config = {{"domain", dom}, {"batches", B}, {"batch_size", M}, {"seed", seed}};
    const auto ds = make_dataset(Skeleton::human16(), dom, B, M, seed);
    serialize_dataset(ds, a.out);
    man.artifacts.push_back(a.out);
    note(c, "wrote " + std::to_string(ds.size()) + " samples to " + a.out);
}

struct TrainArgs {
    std::string data, out;
    std::optional<int> epochs, batch_size, inner_steps;
    std::optional<double> alpha, beta_lr;
    std::string optimizer, inner_optimizer;
    std::vector<int> hidden;
    bool no_aux = false;
};

Dataset load_checked_dataset(const std::string& path, const Skeleton& sk) {
    auto ds = load_dataset(path);
    if (ds.skeleton_hash != sk.hash() || ds.joints != sk.joint_count())
        throw ConfigError("data", "dataset was generated for a different skeleton");
    return ds;
}

void run_training(const Common& c, const TrainArgs& a, bool meta, RunManifest& man) {
    json cfg = load_config(c.config_path);
    reject_unknown_keys(cfg, {"hidden", "activation", "train", "seed"});
    refuse_overwrite_inputs(a.out, {a.data});
    const auto sk = Skeleton::human16();
    std::vector<int> hidden = {128, 128};
    read_field(cfg, "hidden", hidden);
    if (!a.hidden.empty()) hidden = a.hidden;
    for (int h : hidden)
        if (h < 1) throw ConfigError("hidden", "sizes must be >= 1");
    Activation act = Activation::tanh;
    if (cfg.contains("activation")) {
        try {
            act = activation_from_string(cfg.at("activation").get<std::string>());
        } catch (const std::exception& e) {
            throw ConfigError("activation", e.what());
        }
    }
    TrainConfig tc;
    if (cfg.contains("train")) from_json(cfg.at("train"), tc);
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.batch_size) tc.batch_size = *a.batch_size;
    if (a.inner_steps) tc.inner_steps = *a.inner_steps;
    if (a.alpha) tc.alpha = *a.alpha;
    if (a.beta_lr) tc.beta_lr = *a.beta_lr;
    if (!a.optimizer.empty()) tc.optimizer = optimizer_from_string(a.optimizer, "train.optimizer");
    if (!a.inner_optimizer.empty())
        tc.inner_optimizer = optimizer_from_string(a.inner_optimizer, "train.inner_optimizer");
    tc.seed = resolve_seed(c, cfg);
    tc.jobs = c.jobs;
    tc.validate();

    const ModelContext ctx(sk, RegressorSpec::for_skeleton(sk, hidden, act));
    man.seed = tc.seed;
    man.config = {{"hidden", hidden}, {"activation", to_string(act)}, {"train", tc}, {"aux", meta && !a.no_aux}};
    man.add_input_file(a.data);
    const auto ds = load_checked_dataset(a.data, sk);
    note(c, std::string(meta ? "meta-training" : "pretraining") + " on " + std::to_string(ds.size()) +
                " samples, " + tc.describe());

    const auto res = meta ? meta_train(ctx, ds, tc, !a.no_aux) : pretrain(ctx, ds, tc);
    save_checkpoint(a.out, ctx.spec, res.main, tc.seed);
    man.artifacts.push_back(a.out);
    man.artifacts.push_back(sibling(a.out, ".json"));
    if (res.aux) {
        const auto aux_path = sibling(a.out, ".aux.bin");
        save_checkpoint(aux_path, ctx.spec, *res.aux, tc.seed);
        man.artifacts.push_back(aux_path);
        man.artifacts.push_back(sibling(a.out, ".aux.json"));
    }
    const auto hist = sibling(a.out, ".history.csv");
    write_text(hist, res.history.to_csv());
    man.artifacts.push_back(hist);
    man.extra["epoch_seconds"] = res.history.epoch_seconds;
    note(c, "final batch loss " + fmt_short(res.history.final_main_loss()));
}

struct AdaptArgs {
    std::string model, aux, data, out, mode;
    std::optional<int> steps;
    std::optional<double> alpha, tol;
};

struct LoadedModels {
    ModelContext ctx;
    ParamVector w;
    std::optional<ParamVector> u;
};

LoadedModels load_models(const AdaptArgs& a, RunManifest& man) {
    const auto sk = Skeleton::human16();
    man.add_input_file(a.model);
    man.add_input_file(sibling(a.model, ".json"));
    auto main = load_checkpoint(a.model);
    LoadedModels m{ModelContext(sk, main.spec), main.params, std::nullopt};
    if (!a.aux.empty()) {
        man.add_input_file(a.aux);
        man.add_input_file(sibling(a.aux, ".json"));
        auto aux = load_checkpoint(a.aux);
        if (!(aux.spec == main.spec)) throw ConfigError("aux", "auxiliary network spec differs from --model");
        m.u = std::move(aux.params);
    }
    return m;
}

AdaptConfig resolve_adapt(const Common& c, const AdaptArgs& a, RunManifest& man) {
    json cfg = load_config(c.config_path);
    reject_unknown_keys(cfg, {"adapt", "seed"});
    AdaptConfig ac;
    if (cfg.contains("adapt")) from_json(cfg.at("adapt"), ac);
    if (!a.mode.empty()) ac.mode = adapt_mode_from_string(a.mode);
    if (a.steps) ac.max_steps = *a.steps;
    if (a.alpha) ac.alpha = *a.alpha;
    if (a.tol) ac.early_stop_rel_tol = *a.tol;
    ac.validate();
    if (ac.mode == AdaptMode::dual && a.aux.empty())
        throw ConfigError("aux", "dual mode needs --aux (written by meta-train as <name>.aux.bin)");
    man.seed = resolve_seed(c, cfg);
    man.config = {{"adapt", ac}, {"seed", man.seed}};
    return ac;
}

/// Shared by adapt and eval: per-sample adaptation in parallel slots.
struct PerSample {
    AdaptationTrace trace;
    Joints3D joints;
    double mpjpe = 0, pa_mpjpe = 0;
};

std::vector<PerSample> adapt_all(const LoadedModels& m, const Dataset& ds, const AdaptConfig& ac, int jobs) {
    std::vector<PerSample> out(ds.size());
    parallel_for(ds.size(), jobs, [&](std::size_t i) {
        const auto& s = ds.samples[i];
        const StepObserver obs = metric_observer(m.ctx, s.evidence, s.gt_j3d());
        auto r = adapt(m.ctx, m.w, m.u ? &*m.u : nullptr, s.evidence, ac, &obs);
        out[i].joints = forward_kinematics(m.ctx.skeleton, infer(m.ctx, r.params, s.evidence).body);
        out[i].mpjpe = mpjpe(out[i].joints, s.gt_j3d());
        out[i].pa_mpjpe = pa_mpjpe(out[i].joints, s.gt_j3d());
        out[i].trace = std::move(r.trace);
    });
    return out;
}

void run_adapt(const Common& c, const AdaptArgs& a, bool eval, RunManifest& man) {
    refuse_overwrite_inputs(a.out, {a.model, a.aux, a.data});
    const auto ac = resolve_adapt(c, a, man);
    const auto m = load_models(a, man);
    man.add_input_file(a.data);
    const auto ds = load_checked_dataset(a.data, m.ctx.skeleton);
    note(c, (eval ? "evaluating " : "adapting ") + std::to_string(ds.size()) + " samples, mode " +
                to_string(ac.mode));
    const auto res = adapt_all(m, ds, ac, c.jobs);

    auto traces = AdaptationTrace::csv_writer();
    for (std::size_t i = 0; i < res.size(); ++i) res[i].trace.append_csv(traces, std::to_string(i));
    const auto trace_path = sibling(a.out, ".traces.csv");

    if (!eval) {
        CsvWriter w({"sample_id", "joint", "x", "y", "z", "steps", "stopped_early"});
        const auto& names = m.ctx.skeleton.names();
        for (std::size_t i = 0; i < res.size(); ++i)
            for (int j = 0; j < m.ctx.skeleton.joint_count(); ++j)
                w.row({std::to_string(i), names[static_cast<std::size_t>(j)], fmt_double(res[i].joints(j, 0)),
                       fmt_double(res[i].joints(j, 1)), fmt_double(res[i].joints(j, 2)),
                       std::to_string(res[i].trace.steps_executed), res[i].trace.stopped_early ? "1" : "0"});
        write_text(a.out, w.str());
    } else {
        CsvWriter w({"sample_id", "mpjpe", "pa_mpjpe", "steps", "stopped_early", "diverged"});
        double sm = 0, sp = 0;
        for (std::size_t i = 0; i < res.size(); ++i) {
            sm += res[i].mpjpe;
            sp += res[i].pa_mpjpe;
            w.row({std::to_string(i), fmt_double(res[i].mpjpe), fmt_double(res[i].pa_mpjpe),
                   std::to_string(res[i].trace.steps_executed), res[i].trace.stopped_early ? "1" : "0",
                   res[i].trace.diverged ? "1" : "0"});
        }
        const double n = static_cast<double>(res.size());
        w.row({"mean", fmt_double(sm / n), fmt_double(sp / n), "", "", ""});
        write_text(a.out, w.str());
        std::cout << json{{"mpjpe", sm / n}, {"pa_mpjpe", sp / n}, {"n_samples", res.size()}}.dump() << '\n';
    }
    write_text(trace_path, traces.str());
    man.artifacts.push_back(a.out);
    man.artifacts.push_back(trace_path.string());
}

struct ExperimentArgs {
    std::string plan, out;
};

void run_experiment_cmd(const Common& c, const ExperimentArgs& a, RunManifest& man) {
    const std::string plan_path = !a.plan.empty() ? a.plan : c.config_path;
    if (plan_path.empty()) throw ConfigError("plan", "--plan (or --config) is required");
    refuse_overwrite_inputs(a.out, {plan_path});
    man.add_input_file(plan_path);
    const json j = load_config(plan_path);
    ExperimentPlan plan = j.get<ExperimentPlan>();
    if (c.seed_flag) {
        plan.seeds = {*c.seed_flag};
    } else if (!j.contains("seeds")) {
        if (std::getenv("MADAPT_SEED")) plan.seeds = {resolve_seed(c, json::object())};
    }
    plan.jobs = c.jobs;
    plan.validate();
    man.seed = plan.seeds.front();
    man.config = plan;
    const auto res = run_experiment(plan, [&](const std::string& s) { note(c, s); });
    for (const auto& p : write_experiment(res, a.out)) man.artifacts.push_back(p.string());
    man.extra["timing"] = timing_json(res);
    for (const auto& row : summarize(res.runs))
        note(c, row.method + " @ " + row.domain + ": mpjpe " + fmt_short(row.mpjpe_mean, 4) + " +- " +
                    fmt_short(row.mpjpe_std, 2));
    for (const auto& g : res.grid)
        if (g.unstable) note(c, "UNSTABLE " + g.cell + " seed " + std::to_string(g.seed));
}

struct GradCheckArgs {
    std::string out = "grad_check.csv";
    std::optional<int> pairs;
    std::optional<double> step;
};

void run_grad_check_cmd(const Common& c, const GradCheckArgs& a, RunManifest& man) {
    json cfg = load_config(c.config_path);
    reject_unknown_keys(cfg, {"pairs", "step", "tol", "hidden", "seed"});
    GradCheckOptions opt;
    read_field(cfg, "pairs", opt.pairs);
    read_field(cfg, "step", opt.step);
    read_field(cfg, "tol", opt.tol);
    read_field(cfg, "hidden", opt.hidden);
    if (a.pairs) opt.pairs = *a.pairs;
    if (a.step) opt.step = *a.step;
    if (opt.pairs < 1) throw ConfigError("pairs", "must be >= 1");
    if (!(opt.step > 0.0)) throw ConfigError("step", "must be > 0");
    if (!(opt.tol > 0.0)) throw ConfigError("tol", "must be > 0");
    const auto seed = resolve_seed(c, cfg);
    man.seed = seed;
    man.config = {{"pairs", opt.pairs}, {"step", opt.step}, {"tol", opt.tol}, {"hidden", opt.hidden},
                  {"roundoff_ulps", opt.roundoff_ulps}, {"seed", seed}};
    const auto rep = run_grad_check(seed, opt);
    write_text(a.out, rep.to_csv());
    man.artifacts.push_back(a.out);
    std::cout << json{{"worst_rel_error", rep.worst()}, {"tol", opt.tol}, {"rows", rep.rows.size()},
                      {"passed", rep.passed(opt.tol)}}
                     .dump()
              << '\n';
    if (!rep.passed(opt.tol))
        throw CheckFailed("gradient check failed: worst relative error " + fmt_short(rep.worst()) +
                          " >= " + fmt_short(opt.tol));
}

// ---------------------------------------------------------------------------
// Error reporting
// ---------------------------------------------------------------------------

int report(const std::string& kind, const std::string& message, int code,
           const std::string& field = "", RunManifest* man = nullptr) {
    if (man) man->error = message;
    json e = {{"error", {{"type", kind}, {"message", message}}}, {"exit_code", code}};
    if (!field.empty()) e["error"]["field"] = field;
    std::cerr << e.dump() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"madapt: synthetic pose regression with meta-learned test-time adaptation"};
    app.require_subcommand(0, 1);
    bool help_config = false;
    app.add_flag("--help-config", help_config, "Print the config schema with defaults and exit");

    Common common;
    auto add_common = [&](CLI::App* sub, bool seeded) {
        if (seeded)
            sub->add_option("--seed", common.seed_flag, "Seed (overrides config and MADAPT_SEED)");
        sub->add_option("--config", common.config_path, "JSON config file; flags override its values")
            ;
        sub->add_option("--jobs", common.jobs, "Worker threads (never changes results)")
            ->check(CLI::PositiveNumber);
        sub->add_flag("--quiet", common.quiet, "No progress messages on stderr");
    };

    GenDataArgs gd;
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
    add_common(gen, true);
    gen->add_option("--domain", gd.domain, "Domain preset: default | indoor-like | in-the-wild-like");
    gen->add_option("--b", gd.b, "Number of batches B")->check(CLI::PositiveNumber);
    gen->add_option("--m", gd.m, "Batch size M")->check(CLI::PositiveNumber);
    gen->add_option("--out", gd.out, "Output dataset path")->required();

    TrainArgs pt, mt;
    auto add_train = [&](CLI::App* sub, TrainArgs& t) {
        add_common(sub, true);
        sub->add_option("--data", t.data, "Training dataset")->required();
        sub->add_option("--out", t.out, "Checkpoint path (writes <out> and a .json sidecar)")->required();
        sub->add_option("--epochs", t.epochs, "Epochs");
        sub->add_option("--batch-size", t.batch_size, "Batch size (0: the dataset's M)");
        sub->add_option("--alpha", t.alpha, "Inner learning rate");
        sub->add_option("--beta-lr", t.beta_lr, "Outer learning rate");
        sub->add_option("--optimizer", t.optimizer, "Outer optimizer: adam | sgd");
        sub->add_option("--hidden", t.hidden, "Hidden layer widths");
    };
    auto* pre = app.add_subcommand("pretrain", "Supervised pretraining on L_train");
    add_train(pre, pt);
    auto* meta = app.add_subcommand("meta-train", "Meta-training with a test-time inner step");
    add_train(meta, mt);
    meta->add_option("--inner-steps", mt.inner_steps, "Inner steps per sample during training");
    meta->add_option("--inner-optimizer", mt.inner_optimizer, "Inner optimizer: sgd | adam");
    meta->add_flag("--no-aux", mt.no_aux, "Meta-train without the auxiliary network");

    AdaptArgs ad, ev;
    auto add_adapt = [&](CLI::App* sub, AdaptArgs& t, const char* out_help) {
        add_common(sub, true);
        sub->add_option("--model", t.model, "Main network checkpoint")->required();
        sub->add_option("--aux", t.aux, "Auxiliary network checkpoint (dual mode)");
        sub->add_option("--data", t.data, "Test dataset")->required();
        sub->add_option("--mode", t.mode, "none | eft | dual");
        sub->add_option("--steps", t.steps, "Maximum test-time steps");
        sub->add_option("--alpha", t.alpha, "Test-time learning rate");
        sub->add_option("--tol", t.tol, "Early-stop relative tolerance");
        sub->add_option("--out", t.out, out_help)->required();
    };
    auto* adapt_cmd = app.add_subcommand("adapt", "Test-time optimisation; writes adapted 3D joints");
    add_adapt(adapt_cmd, ad, "Predictions CSV (traces go to <out>.traces.csv)");
    auto* eval_cmd = app.add_subcommand("eval", "Test-time optimisation and error metrics");
    add_adapt(eval_cmd, ev, "Per-sample metrics CSV (traces go to <out>.traces.csv)");

    ExperimentArgs ex;
    auto* exp = app.add_subcommand("experiment", "Run an experiment plan");
    add_common(exp, true);
    exp->add_option("--plan", ex.plan, "Plan file (JSON)");
    exp->add_option("--out", ex.out, "Output directory")->required();

    GradCheckArgs gc;
    auto* grad = app.add_subcommand("grad-check", "Finite-difference check of every loss gradient");
    add_common(grad, true);
    grad->add_option("--pairs", gc.pairs, "Random (params, sample) pairs");
    grad->add_option("--step", gc.step, "Central-difference step");
    grad->add_option("--out", gc.out, "Report CSV")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        std::cerr << sub->help() << '\n';
        return report("usage", e.what(), kConfig);
    }

    if (help_config) {
        std::cout << config_schema().dump(2) << '\n';
        return kOk;
    }
    if (app.get_subcommands().empty()) {
        std::cerr << app.help() << '\n';
        return report("usage", "a subcommand is required", kConfig);
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    RunManifest man;
    man.command = name;
    fs::path manifest_path;
    if (name == "gen-data") manifest_path = gd.out + ".manifest.jsonl";
    if (name == "pretrain") manifest_path = pt.out + ".manifest.jsonl";
    if (name == "meta-train") manifest_path = mt.out + ".manifest.jsonl";
    if (name == "adapt") manifest_path = ad.out + ".manifest.jsonl";
    if (name == "eval") manifest_path = ev.out + ".manifest.jsonl";
    if (name == "experiment") manifest_path = fs::path(ex.out) / "manifest.jsonl";
    if (name == "grad-check") manifest_path = gc.out + ".manifest.jsonl";

    int code = kOk;
    try {
        if (!common.config_path.empty() && name != "experiment") man.add_input_file(common.config_path);
        if (name == "gen-data") run_gen_data(common, gd, man);
        if (name == "pretrain") run_training(common, pt, false, man);
        if (name == "meta-train") run_training(common, mt, true, man);
        if (name == "adapt") run_adapt(common, ad, false, man);
        if (name == "eval") run_adapt(common, ev, true, man);
        if (name == "experiment") run_experiment_cmd(common, ex, man);
        if (name == "grad-check") run_grad_check_cmd(common, gc, man);
    } catch (const ConfigError& e) {
        code = report("config", e.what(), kConfig, e.field(), &man);
    } catch (const DivergenceError& e) {
        code = report("divergence", e.what(), kDivergence, "", &man);
    } catch (const NonFiniteError& e) {
        code = report("divergence", e.what(), kDivergence, "", &man);
    } catch (const IoError& e) {
        code = report("io", e.what(), kIo, "", &man);
    } catch (const fs::filesystem_error& e) {
        code = report("io", e.what(), kIo, "", &man);
    } catch (const CheckFailed& e) {
        code = report("check_failed", e.what(), kFailure, "", &man);
    } catch (const json::exception& e) {
        code = report("config", e.what(), kConfig, "", &man);
    } catch (const std::exception& e) {
        code = report("internal", e.what(), kFailure, "", &man);
    }

    man.end = std::chrono::system_clock::now();
    man.exit_code = code;
    if (code != kOk) {
        man.status = code == kDivergence ? "diverged" : "error";
    }
    try {
        man.append_to(manifest_path);
    } catch (const std::exception& e) {
        const int c = report("io", std::string("manifest: ") + e.what(), kIo);
        return code == kOk ? c : code;
    }
    return code;
}
