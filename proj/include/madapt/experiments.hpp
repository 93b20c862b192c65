// SPDX-License-Identifier: Apache-2.0
//
// experiments.hpp - declarative experiment plans and the suites built on
// them: method ablation, step curves, detector quality, domain shift, the
// learning-rate grid and the inner-step grid.
//
// Every result is a pure function of (plan, seeds). Wall-clock numbers are
// kept apart (ExperimentResult::timing, reported through the run manifest)
// so every output file is byte-reproducible.
#pragma once

#include "madapt/adapt.hpp"
#include "madapt/config_error.hpp"
#include "madapt/csv.hpp"
#include "madapt/metrics.hpp"
#include "madapt/parallel.hpp"
#include "madapt/svg.hpp"
#include "madapt/synth.hpp"
#include "madapt/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace madapt {

enum class Method { none, eft, meta_only, meta_dual };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::none: return "none";
        case Method::eft: return "eft";
        case Method::meta_only: return "meta_only";
        case Method::meta_dual: return "meta_dual";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    if (s == "none") return Method::none;
    if (s == "eft") return Method::eft;
    if (s == "meta_only") return Method::meta_only;
    if (s == "meta_dual") return Method::meta_dual;
    throw ConfigError("plan.methods", "unknown method '" + s + "' (none|eft|meta_only|meta_dual)");
}

enum class Suite { ablation, step_curves, detector, ood, lr_grid, inner_steps };

inline std::string to_string(Suite s) {
    switch (s) {
        case Suite::ablation: return "ablation";
        case Suite::step_curves: return "step_curves";
        case Suite::detector: return "detector";
        case Suite::ood: return "ood";
        case Suite::lr_grid: return "lr_grid";
        case Suite::inner_steps: return "inner_steps";
    }
    return "?";
}

inline Suite suite_from_string(const std::string& s) {
    for (auto k : {Suite::ablation, Suite::step_curves, Suite::detector, Suite::ood, Suite::lr_grid,
                   Suite::inner_steps})
        if (to_string(k) == s) return k;
    throw ConfigError("plan.suite", "unknown suite '" + s +
                                        "' (ablation|step_curves|detector|ood|lr_grid|inner_steps)");
}

struct LrCell {
    double alpha = 1e-5;
    double beta_lr = 1e-4;
};

struct ExperimentPlan {
    std::string name = "experiment";
    Suite suite = Suite::ablation;
    DomainConfig train_domain = domain_preset("default");
    DomainConfig test_domain = domain_preset("default");
    std::vector<Method> methods = {Method::none, Method::eft, Method::meta_only, Method::meta_dual};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    int train_batches = 50;  // B
    int batch_size = 40;     // M
    int test_size = 500;
    std::vector<int> hidden = {128, 128};
    TrainConfig train = [] {
        TrainConfig t;
        t.epochs = 40;
        return t;
    }();
    AdaptConfig adapt;
    std::vector<double> test_sigmas = {0.0, 0.01, 0.02};  // detector suite
    std::vector<LrCell> lr_cells = {{1e-5, 1e-4}, {1e-5, 1e-3}, {1e-4, 1e-4}, {1e-1, 1e-1}};
    std::vector<int> inner_steps_values = {1, 2, 3};
    bool in_domain_control = true;  // ood suite
    bool write_traces = true;
    int jobs = 1;  // never affects results

    void validate() const {
        if (name.empty()) throw ConfigError("plan.name", "must be nonempty");
        if (methods.empty()) throw ConfigError("plan.methods", "must be nonempty");
        if (seeds.empty()) throw ConfigError("plan.seeds", "must be nonempty");
        if (train_batches < 1) throw ConfigError("plan.train_batches", "must be >= 1");
        if (batch_size < 1) throw ConfigError("plan.batch_size", "must be >= 1");
        if (test_size < 1) throw ConfigError("plan.test_size", "must be >= 1");
        if (jobs < 1) throw ConfigError("plan.jobs", "must be >= 1");
        for (int h : hidden)
            if (h < 1) throw ConfigError("plan.hidden", "sizes must be >= 1");
        train_domain.validate();
        test_domain.validate();
        train.validate();
        adapt.validate();
        if (suite == Suite::detector) {
            if (test_sigmas.empty()) throw ConfigError("plan.test_sigmas", "must be nonempty");
            for (double s : test_sigmas)
                if (!(s >= 0.0)) throw ConfigError("plan.test_sigmas", "must be >= 0");
        }
        if (suite == Suite::ood && train_domain == test_domain)
            throw ConfigError("plan.test_domain", "ood suite needs test_domain != train_domain");
        if (suite == Suite::lr_grid) {
            if (lr_cells.empty()) throw ConfigError("plan.lr_cells", "must be nonempty");
            for (const auto& c : lr_cells)
                if (!(c.alpha > 0.0) || !(c.beta_lr > 0.0))
                    throw ConfigError("plan.lr_cells", "alpha and beta_lr must be > 0");
        }
        if (suite == Suite::inner_steps) {
            if (inner_steps_values.empty()) throw ConfigError("plan.inner_steps_values", "must be nonempty");
            for (int k : inner_steps_values)
                if (k < 1) throw ConfigError("plan.inner_steps_values", "must be >= 1");
        }
    }
};

inline void to_json(nlohmann::json& j, const ExperimentPlan& p) {
    std::vector<std::string> methods;
    for (auto m : p.methods) methods.push_back(to_string(m));
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : p.lr_cells) cells.push_back({{"alpha", c.alpha}, {"beta_lr", c.beta_lr}});
    j = {{"name", p.name},
         {"suite", to_string(p.suite)},
         {"train_domain", p.train_domain},
         {"test_domain", p.test_domain},
         {"methods", methods},
         {"seeds", p.seeds},
         {"train_batches", p.train_batches},
         {"batch_size", p.batch_size},
         {"test_size", p.test_size},
         {"hidden", p.hidden},
         {"train", p.train},
         {"adapt", p.adapt},
         {"test_sigmas", p.test_sigmas},
         {"lr_cells", cells},
         {"inner_steps_values", p.inner_steps_values},
         {"in_domain_control", p.in_domain_control},
         {"write_traces", p.write_traces}};
}

inline void from_json(const nlohmann::json& j, ExperimentPlan& p) {
    reject_unknown_keys(j, {"name", "suite", "train_domain", "test_domain", "methods", "seeds",
                            "train_batches", "batch_size", "test_size", "hidden", "train", "adapt",
                            "test_sigmas", "lr_cells", "inner_steps_values", "in_domain_control",
                            "write_traces"},
                        "plan.");
    read_field(j, "name", p.name, "plan.");
    if (j.contains("suite")) p.suite = suite_from_string(j.at("suite").get<std::string>());
    if (p.suite == Suite::step_curves && !j.contains("methods")) p.methods = {Method::eft, Method::meta_dual};
    if (p.suite == Suite::detector && !j.contains("methods")) p.methods = {Method::eft, Method::meta_dual};
    if (p.suite == Suite::ood && !j.contains("methods")) p.methods = {Method::eft, Method::meta_dual};
    if ((p.suite == Suite::lr_grid || p.suite == Suite::inner_steps) && !j.contains("methods"))
        p.methods = {Method::meta_dual};
    auto domain_field = [&](const char* k, DomainConfig& d) {
        if (!j.contains(k)) return;
        try {
            d = j.at(k).get<DomainConfig>();
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw ConfigError(std::string("plan.") + k, e.what());
        }
    };
    domain_field("train_domain", p.train_domain);
    domain_field("test_domain", p.test_domain);
    if (j.contains("methods")) {
        p.methods.clear();
        for (const auto& m : j.at("methods")) p.methods.push_back(method_from_string(m.get<std::string>()));
    }
    read_field(j, "seeds", p.seeds, "plan.");
    read_field(j, "train_batches", p.train_batches, "plan.");
    read_field(j, "batch_size", p.batch_size, "plan.");
    read_field(j, "test_size", p.test_size, "plan.");
    read_field(j, "hidden", p.hidden, "plan.");
    if (j.contains("train")) {
        TrainConfig t = p.train;
        from_json(j.at("train"), t);
        p.train = t;
    }
    if (j.contains("adapt")) {
        AdaptConfig a = p.adapt;
        from_json(j.at("adapt"), a);
        p.adapt = a;
    }
    read_field(j, "test_sigmas", p.test_sigmas, "plan.");
    if (j.contains("lr_cells")) {
        p.lr_cells.clear();
        for (const auto& c : j.at("lr_cells")) {
            reject_unknown_keys(c, {"alpha", "beta_lr"}, "plan.lr_cells.");
            LrCell cell;
            read_field(c, "alpha", cell.alpha, "plan.lr_cells.");
            read_field(c, "beta_lr", cell.beta_lr, "plan.lr_cells.");
            p.lr_cells.push_back(cell);
        }
    }
    read_field(j, "inner_steps_values", p.inner_steps_values, "plan.");
    read_field(j, "in_domain_control", p.in_domain_control, "plan.");
    read_field(j, "write_traces", p.write_traces, "plan.");
}

// ---------------------------------------------------------------------------
// Data and models per seed
// ---------------------------------------------------------------------------

inline std::uint64_t train_data_seed(std::uint64_t seed) { return derive_seed(seed, "train-data"); }
inline std::uint64_t test_data_seed(std::uint64_t seed) { return derive_seed(seed, "test-data"); }

/// Test set of `size` samples drawn as a single batch.
inline Dataset make_test_set(const Skeleton& sk, const DomainConfig& d, int size, std::uint64_t seed) {
    return make_dataset(sk, d, 1, size, test_data_seed(seed));
}

inline Dataset make_train_set(const Skeleton& sk, const ExperimentPlan& p, std::uint64_t seed) {
    return make_dataset(sk, p.train_domain, p.train_batches, p.batch_size, train_data_seed(seed));
}

/// Trained networks for one seed; only the ones a method list needs.
struct SeedModels {
    std::optional<ParamVector> pre;
    std::optional<ParamVector> meta_only;
    std::optional<ParamVector> meta_main;
    std::optional<ParamVector> meta_aux;
    std::map<std::string, std::vector<double>> epoch_seconds;  // timing only
};

inline bool needs_pretrain(const std::vector<Method>& ms) {
    for (auto m : ms)
        if (m == Method::none || m == Method::eft) return true;
    return false;
}

inline bool contains(const std::vector<Method>& ms, Method m) {
    return std::find(ms.begin(), ms.end(), m) != ms.end();
}

using ProgressFn = std::function<void(const std::string&)>;

inline SeedModels train_seed_models(const ModelContext& ctx, const Dataset& train_set,
                                    const TrainConfig& base, std::uint64_t seed,
                                    const std::vector<Method>& methods, int jobs,
                                    const ProgressFn& progress = {}) {
    TrainConfig cfg = base;
    cfg.seed = seed;
    cfg.jobs = jobs;
    const auto view = training_view(train_set);
    const int M = effective_batch_size(cfg, train_set);
    SeedModels out;
    if (needs_pretrain(methods)) {
        if (progress) progress("seed " + std::to_string(seed) + ": pretrain");
        auto r = pretrain(ctx, view, cfg, M);
        out.pre = std::move(r.main);
        out.epoch_seconds["pretrain"] = r.history.epoch_seconds;
    }
    if (contains(methods, Method::meta_only)) {
        if (progress) progress("seed " + std::to_string(seed) + ": meta-train (no aux)");
        auto r = meta_train(ctx, view, cfg, M, false);
        out.meta_only = std::move(r.main);
        out.epoch_seconds["meta_only"] = r.history.epoch_seconds;
    }
    if (contains(methods, Method::meta_dual)) {
        if (progress) progress("seed " + std::to_string(seed) + ": meta-train (dual)");
        auto r = meta_train(ctx, view, cfg, M, true);
        out.meta_main = std::move(r.main);
        out.meta_aux = std::move(*r.aux);
        out.epoch_seconds["meta_dual"] = r.history.epoch_seconds;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-step means over samples, steps 0..max_steps. Runs that stopped early
/// contribute their final record to later steps.
struct StepCurve {
    std::vector<double> mpjpe;
    std::vector<double> pa_mpjpe;
    std::vector<double> loss;
};

struct MethodRun {
    std::string method;
    std::string domain;
    std::uint64_t seed = 0;
    double mpjpe = 0.0;
    double pa_mpjpe = 0.0;
    std::size_t n_samples = 0;
    StepCurve curve;
    Eigen::VectorXd per_joint;
    Eigen::VectorXd per_joint_aligned;
    std::vector<AdaptationTrace> traces;
    std::size_t stopped_early = 0;
    std::size_t diverged = 0;
    double mean_steps = 0.0;
};

inline AdaptConfig config_for(Method m, AdaptConfig cfg) {
    switch (m) {
        case Method::none: cfg.mode = AdaptMode::none; break;
        case Method::eft:
        case Method::meta_only: cfg.mode = AdaptMode::eft; break;
        case Method::meta_dual: cfg.mode = AdaptMode::dual; break;
    }
    return cfg;
}

/// Starting weights (and auxiliary network) for a method.
inline std::pair<const ParamVector*, const ParamVector*> method_params(Method m, const SeedModels& s) {
    auto need = [](const std::optional<ParamVector>& p, const char* what) -> const ParamVector* {
        if (!p) throw std::logic_error(std::string("model not trained: ") + what);
        return &*p;
    };
    switch (m) {
        case Method::none:
        case Method::eft: return {need(s.pre, "pretrain"), nullptr};
        case Method::meta_only: return {need(s.meta_only, "meta_only"), nullptr};
        case Method::meta_dual: return {need(s.meta_main, "meta_dual"), need(s.meta_aux, "meta_dual aux")};
    }
    throw std::logic_error("unhandled method");
}

/// Adapts every test sample independently (private copies) and aggregates.
/// Ground truth is read only by the metric observer and the final scoring.
inline MethodRun evaluate_method(const ModelContext& ctx, Method method, const ParamVector& w,
                                 const ParamVector* aux, const Dataset& test,
                                 const AdaptConfig& base, int jobs, bool keep_traces) {
    const AdaptConfig cfg = config_for(method, base);
    const std::size_t n = test.size();
    const int J = ctx.skeleton.joint_count();
    struct Slot {
        AdaptationTrace trace;
        Eigen::VectorXd pj, pja;
    };
    std::vector<Slot> slots(n);
    parallel_for(n, jobs, [&](std::size_t i) {
        const auto& s = test.samples[i];
        const StepObserver obs = metric_observer(ctx, s.evidence, s.gt_j3d());
        auto r = adapt(ctx, w, aux, s.evidence, cfg, &obs);
        const auto joints = forward_kinematics(ctx.skeleton, infer(ctx, r.params, s.evidence).body);
        slots[i].pj = per_joint_error(joints, s.gt_j3d(), false);
        slots[i].pja = per_joint_error(joints, s.gt_j3d(), true);
        slots[i].trace = std::move(r.trace);
    });

    MethodRun run;
    run.method = to_string(method);
    run.domain = test.domain.name;
    run.n_samples = n;
    const int steps = cfg.mode == AdaptMode::none ? 0 : cfg.max_steps;
    run.curve.mpjpe.assign(steps + 1, 0.0);
    run.curve.pa_mpjpe.assign(steps + 1, 0.0);
    run.curve.loss.assign(steps + 1, 0.0);
    run.per_joint = Eigen::VectorXd::Zero(J);
    run.per_joint_aligned = Eigen::VectorXd::Zero(J);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& t = slots[i].trace;
        for (int k = 0; k <= steps; ++k) {
            const auto& rec = t.records[std::min<std::size_t>(k, t.records.size() - 1)];
            run.curve.mpjpe[k] += rec.mpjpe.value_or(NAN);
            run.curve.pa_mpjpe[k] += rec.pa_mpjpe.value_or(NAN);
            run.curve.loss[k] += rec.loss;
        }
        run.per_joint += slots[i].pj;
        run.per_joint_aligned += slots[i].pja;
        run.mpjpe += slots[i].pj.mean();
        run.pa_mpjpe += slots[i].pja.mean();
        run.stopped_early += t.stopped_early ? 1 : 0;
        run.diverged += t.diverged ? 1 : 0;
        run.mean_steps += t.steps_executed;
    }
    const double inv = 1.0 / static_cast<double>(n);
    for (auto* v : {&run.curve.mpjpe, &run.curve.pa_mpjpe, &run.curve.loss})
        for (auto& x : *v) x *= inv;
    run.per_joint *= inv;
    run.per_joint_aligned *= inv;
    run.mpjpe *= inv;
    run.pa_mpjpe *= inv;
    run.mean_steps *= inv;
    if (keep_traces)
        for (auto& s : slots) run.traces.push_back(std::move(s.trace));
    return run;
}

inline MethodRun evaluate_method(const ModelContext& ctx, Method method, const SeedModels& models,
                                 const Dataset& test, const AdaptConfig& cfg, int jobs,
                                 bool keep_traces) {
    const auto [w, aux] = method_params(method, models);
    return evaluate_method(ctx, method, *w, aux, test, cfg, jobs, keep_traces);
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct GridRow {
    std::string cell;  // e.g. "alpha=1e-05;beta_lr=0.0001" or "k=2"
    double alpha = 0.0;
    double beta_lr = 0.0;
    int k = 1;
    std::uint64_t seed = 0;
    bool unstable = false;
    double mpjpe = NAN;
    double pa_mpjpe = NAN;
    std::size_t n_samples = 0;
    std::string detail;
};

struct TimingRow {
    std::string label;
    std::uint64_t seed = 0;
    double seconds_per_epoch = 0.0;
};

struct SummaryRow {
    std::string method;
    std::string domain;
    double mpjpe_mean = 0.0, mpjpe_std = 0.0;
    double pa_mean = 0.0, pa_std = 0.0;
    std::size_t seeds = 0;
};

struct ExperimentResult {
    ExperimentPlan plan;
    std::vector<MethodRun> runs;  // ordered by (seed, domain, method)
    std::vector<GridRow> grid;
    std::vector<TimingRow> timing;  // not reproducible

    const MethodRun* find(const std::string& method, const std::string& domain,
                          std::uint64_t seed) const {
        for (const auto& r : runs)
            if (r.method == method && r.domain == domain && r.seed == seed) return &r;
        return nullptr;
    }
};

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? NAN : s / static_cast<double>(v.size());
}

/// Sample standard deviation (0 for a single value).
inline double std_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

/// Seed-mean and std per (method, domain), in order of first appearance.
inline std::vector<SummaryRow> summarize(const std::vector<MethodRun>& runs) {
    std::vector<std::pair<std::string, std::string>> keys;
    for (const auto& r : runs) {
        const std::pair<std::string, std::string> k{r.method, r.domain};
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    }
    std::vector<SummaryRow> out;
    for (const auto& [m, d] : keys) {
        std::vector<double> a, b;
        for (const auto& r : runs)
            if (r.method == m && r.domain == d) {
                a.push_back(r.mpjpe);
                b.push_back(r.pa_mpjpe);
            }
        out.push_back({m, d, mean_of(a), std_of(a), mean_of(b), std_of(b), a.size()});
    }
    return out;
}

inline const SummaryRow* find_summary(const std::vector<SummaryRow>& rows, const std::string& method,
                                      const std::string& domain) {
    for (const auto& r : rows)
        if (r.method == method && r.domain == domain) return &r;
    return nullptr;
}

/// Seed-averaged step curve for (method, domain).
inline StepCurve mean_curve(const std::vector<MethodRun>& runs, const std::string& method,
                            const std::string& domain) {
    StepCurve c;
    std::size_t count = 0;
    for (const auto& r : runs) {
        if (r.method != method || r.domain != domain) continue;
        if (count == 0) {
            c = r.curve;
        } else {
            for (std::size_t k = 0; k < c.mpjpe.size(); ++k) {
                c.mpjpe[k] += r.curve.mpjpe[k];
                c.pa_mpjpe[k] += r.curve.pa_mpjpe[k];
                c.loss[k] += r.curve.loss[k];
            }
        }
        ++count;
    }
    for (auto* v : {&c.mpjpe, &c.pa_mpjpe, &c.loss})
        for (auto& x : *v) x /= static_cast<double>(std::max<std::size_t>(count, 1));
    return c;
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

namespace detail {

inline DomainConfig with_sigma(DomainConfig d, double sigma) {
    d.name += "-sigma" + fmt_short(sigma);
    d.detector_noise_sigma = sigma;
    return d;
}

inline void record_timing(ExperimentResult& res, const SeedModels& m, std::uint64_t seed,
                          const std::string& prefix = "") {
    for (const auto& [label, secs] : m.epoch_seconds)
        res.timing.push_back({prefix + label, seed, mean_of(secs)});
}

inline std::string cell_label(const LrCell& c) {
    return "alpha=" + fmt_short(c.alpha) + ";beta_lr=" + fmt_short(c.beta_lr);
}

}  // namespace detail

/// Trains per seed on plan.train_domain and evaluates plan.methods on each
/// listed test domain. Shared by the ablation, step-curve, detector and
/// domain-shift suites.
inline void run_methods_on_domains(const ModelContext& ctx, const ExperimentPlan& plan,
                                   const std::vector<DomainConfig>& test_domains,
                                   ExperimentResult& res, const ProgressFn& progress) {
    for (auto seed : plan.seeds) {
        const auto train_set = make_train_set(ctx.skeleton, plan, seed);
        const auto models = train_seed_models(ctx, train_set, plan.train, seed, plan.methods, plan.jobs, progress);
        detail::record_timing(res, models, seed);
        for (const auto& dom : test_domains) {
            const auto test = make_test_set(ctx.skeleton, dom, plan.test_size, seed);
            for (auto m : plan.methods) {
                if (progress) progress("seed " + std::to_string(seed) + ": evaluate " + to_string(m) + " on " + dom.name);
                auto run = evaluate_method(ctx, m, models, test, plan.adapt, plan.jobs, plan.write_traces);
                run.seed = seed;
                res.runs.push_back(std::move(run));
            }
        }
    }
}

/// Method ablation on one test domain (also used for step curves).
inline ExperimentResult run_ablation_meta_aux(const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    plan.validate();
    const auto sk = Skeleton::human16();
    const ModelContext ctx(sk, RegressorSpec::for_skeleton(sk, plan.hidden));
    ExperimentResult res{plan, {}, {}, {}};
    run_methods_on_domains(ctx, plan, {plan.test_domain}, res, progress);
    return res;
}

inline ExperimentResult run_step_curves(const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    return run_ablation_meta_aux(plan, progress);
}

/// Detector-quality ablation: models trained once per seed, tested with each
/// sigma in plan.test_sigmas (same bodies and cameras, different jitter).
inline ExperimentResult run_detector_ablation(const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    plan.validate();
    const auto sk = Skeleton::human16();
    const ModelContext ctx(sk, RegressorSpec::for_skeleton(sk, plan.hidden));
    std::vector<DomainConfig> domains;
    for (double s : plan.test_sigmas) domains.push_back(detail::with_sigma(plan.test_domain, s));
    ExperimentResult res{plan, {}, {}, {}};
    run_methods_on_domains(ctx, plan, domains, res, progress);
    return res;
}

/// Domain shift: train on train_domain, test on test_domain, plus an
/// in-domain control on a fresh train-domain test set.
inline ExperimentResult run_ood(const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    plan.validate();
    if (plan.train_domain == plan.test_domain)
        throw ConfigError("plan.test_domain", "ood suite needs test_domain != train_domain");
    const auto sk = Skeleton::human16();
    const ModelContext ctx(sk, RegressorSpec::for_skeleton(sk, plan.hidden));
    std::vector<DomainConfig> domains{plan.test_domain};
    if (plan.in_domain_control) domains.push_back(plan.train_domain);
    ExperimentResult res{plan, {}, {}, {}};
    run_methods_on_domains(ctx, plan, domains, res, progress);
    return res;
}

/// Learning-rate grid: one dual meta-training per (cell, seed); training
/// divergence marks the cell UNSTABLE instead of aborting the suite.
inline ExperimentResult run_lr_grid(const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    plan.validate();
    const auto sk = Skeleton::human16();
    const ModelContext ctx(sk, RegressorSpec::for_skeleton(sk, plan.hidden));
    ExperimentResult res{plan, {}, {}, {}};
    for (auto seed : plan.seeds) {
        const auto train_set = make_train_set(ctx.skeleton, plan, seed);
        const auto test = make_test_set(ctx.skeleton, plan.test_domain, plan.test_size, seed);
        for (const auto& cell : plan.lr_cells) {
            GridRow row;
            row.cell = detail::cell_label(cell);
            row.alpha = cell.alpha;
            row.beta_lr = cell.beta_lr;
            row.k = plan.train.inner_steps;
            row.seed = seed;
            TrainConfig tc = plan.train;
            tc.alpha = cell.alpha;
            tc.beta_lr = cell.beta_lr;
            AdaptConfig ac = plan.adapt;
            ac.alpha = cell.alpha;
            if (progress) progress("seed " + std::to_string(seed) + ": cell " + row.cell);
            try {
                const auto models = train_seed_models(ctx, train_set, tc, seed, {Method::meta_dual}, plan.jobs);
                detail::record_timing(res, models, seed, row.cell + ":");
                auto run = evaluate_method(ctx, Method::meta_dual, models, test, ac, plan.jobs, false);
                run.seed = seed;
                run.method = "meta_dual@" + row.cell;
                row.mpjpe = run.mpjpe;
                row.pa_mpjpe = run.pa_mpjpe;
                row.n_samples = run.n_samples;
                if (run.diverged > 0)
                    row.detail = std::to_string(run.diverged) + " adaptations stopped on a non-finite loss";
                res.runs.push_back(std::move(run));
            } catch (const DivergenceError& e) {
                row.unstable = true;
                row.detail = e.what();
            }
            res.grid.push_back(std::move(row));
        }
    }
    return res;
}

/// Inner-step grid: dual meta-training with k inner steps per sample.
inline ExperimentResult run_inner_steps_grid(const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    plan.validate();
    const auto sk = Skeleton::human16();
    const ModelContext ctx(sk, RegressorSpec::for_skeleton(sk, plan.hidden));
    ExperimentResult res{plan, {}, {}, {}};
    for (auto seed : plan.seeds) {
        const auto train_set = make_train_set(ctx.skeleton, plan, seed);
        const auto test = make_test_set(ctx.skeleton, plan.test_domain, plan.test_size, seed);
        for (int k : plan.inner_steps_values) {
            GridRow row;
            row.cell = "k=" + std::to_string(k);
            row.alpha = plan.train.alpha;
            row.beta_lr = plan.train.beta_lr;
            row.k = k;
            row.seed = seed;
            TrainConfig tc = plan.train;
            tc.inner_steps = k;
            if (progress) progress("seed " + std::to_string(seed) + ": " + row.cell);
            try {
                const auto models = train_seed_models(ctx, train_set, tc, seed, {Method::meta_dual}, plan.jobs);
                detail::record_timing(res, models, seed, row.cell + ":");
                auto run = evaluate_method(ctx, Method::meta_dual, models, test, plan.adapt, plan.jobs, false);
                run.seed = seed;
                run.method = "meta_dual@" + row.cell;
                row.mpjpe = run.mpjpe;
                row.pa_mpjpe = run.pa_mpjpe;
                row.n_samples = run.n_samples;
                res.runs.push_back(std::move(run));
            } catch (const DivergenceError& e) {
                row.unstable = true;
                row.detail = e.what();
            }
            res.grid.push_back(std::move(row));
        }
    }
    return res;
}

inline ExperimentResult run_experiment(const ExperimentPlan& plan, const ProgressFn& progress = {}) {
    switch (plan.suite) {
        case Suite::ablation: return run_ablation_meta_aux(plan, progress);
        case Suite::step_curves: return run_step_curves(plan, progress);
        case Suite::detector: return run_detector_ablation(plan, progress);
        case Suite::ood: return run_ood(plan, progress);
        case Suite::lr_grid: return run_lr_grid(plan, progress);
        case Suite::inner_steps: return run_inner_steps_grid(plan, progress);
    }
    throw ConfigError("plan.suite", "unhandled suite");
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

inline std::string results_csv(const ExperimentResult& r) {
    CsvWriter w({"experiment", "method", "domain", "seed", "mpjpe_mean", "pa_mpjpe_mean", "n_samples"});
    for (const auto& run : r.runs)
        w.row({r.plan.name, run.method, run.domain, std::to_string(run.seed), fmt_double(run.mpjpe),
               fmt_double(run.pa_mpjpe), std::to_string(run.n_samples)});
    return w.str();
}

inline std::string summary_csv(const ExperimentResult& r) {
    CsvWriter w({"experiment", "method", "domain", "mpjpe_mean", "mpjpe_std", "pa_mpjpe_mean",
                 "pa_mpjpe_std", "seeds"});
    for (const auto& s : summarize(r.runs))
        w.row({r.plan.name, s.method, s.domain, fmt_double(s.mpjpe_mean), fmt_double(s.mpjpe_std),
               fmt_double(s.pa_mean), fmt_double(s.pa_std), std::to_string(s.seeds)});
    return w.str();
}

/// Long format: per seed and the seed mean ("mean").
inline std::string curves_csv(const ExperimentResult& r) {
    CsvWriter w({"method", "domain", "seed", "step", "mpjpe", "pa_mpjpe", "loss"});
    auto emit = [&](const std::string& m, const std::string& d, const std::string& seed,
                    const StepCurve& c) {
        for (std::size_t k = 0; k < c.mpjpe.size(); ++k)
            w.row({m, d, seed, std::to_string(k), fmt_double(c.mpjpe[k]), fmt_double(c.pa_mpjpe[k]),
                   fmt_double(c.loss[k])});
    };
    for (const auto& run : r.runs) emit(run.method, run.domain, std::to_string(run.seed), run.curve);
    for (const auto& s : summarize(r.runs)) emit(s.method, s.domain, "mean", mean_curve(r.runs, s.method, s.domain));
    return w.str();
}

inline std::string per_joint_csv(const ExperimentResult& r, const Skeleton& sk) {
    CsvWriter w({"method", "domain", "seed", "joint", "error", "aligned_error"});
    for (const auto& run : r.runs)
        for (int j = 0; j < run.per_joint.size(); ++j)
            w.row({run.method, run.domain, std::to_string(run.seed), sk.names()[j],
                   fmt_double(run.per_joint[j]), fmt_double(run.per_joint_aligned[j])});
    return w.str();
}

inline std::string grid_csv(const ExperimentResult& r) {
    CsvWriter w({"cell", "alpha", "beta_lr", "k", "seed", "status", "mpjpe_mean", "pa_mpjpe_mean",
                 "n_samples", "detail"});
    for (const auto& g : r.grid) {
        std::string detail = g.detail;
        std::replace(detail.begin(), detail.end(), ',', ';');
        w.row({g.cell, fmt_short(g.alpha), fmt_short(g.beta_lr), std::to_string(g.k),
               std::to_string(g.seed), g.unstable ? "UNSTABLE" : "ok",
               g.unstable ? "" : fmt_double(g.mpjpe), g.unstable ? "" : fmt_double(g.pa_mpjpe),
               std::to_string(g.n_samples), detail});
    }
    return w.str();
}

inline nlohmann::json timing_json(const ExperimentResult& r) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& t : r.timing)
        out.push_back({{"label", t.label}, {"seed", t.seed}, {"seconds_per_epoch", t.seconds_per_epoch}});
    return out;
}

inline std::string timing_csv(const ExperimentResult& r) {
    CsvWriter w({"label", "seed", "seconds_per_epoch"});
    for (const auto& t : r.timing) w.row({t.label, std::to_string(t.seed), fmt_short(t.seconds_per_epoch)});
    return w.str();
}

/// Wide format for plotting: step, then one column per (method, domain).
inline std::string plot_data_tsv(const ExperimentResult& r, const std::string& metric) {
    const auto sums = summarize(r.runs);
    std::vector<StepCurve> curves;
    std::ostringstream o;
    o << "step";
    std::size_t len = 0;
    for (const auto& s : sums) {
        curves.push_back(mean_curve(r.runs, s.method, s.domain));
        len = std::max(len, curves.back().mpjpe.size());
        o << '\t' << s.method << '/' << s.domain;
    }
    o << '\n';
    for (std::size_t k = 0; k < len; ++k) {
        o << k;
        for (const auto& c : curves) {
            const auto& v = metric == "loss" ? c.loss : metric == "pa_mpjpe" ? c.pa_mpjpe : c.mpjpe;
            o << '\t' << (k < v.size() ? fmt_double(v[k]) : std::string());
        }
        o << '\n';
    }
    return o.str();
}

inline std::string curve_svg(const ExperimentResult& r, const std::string& metric) {
    std::vector<Series> series;
    for (const auto& s : summarize(r.runs)) {
        const auto c = mean_curve(r.runs, s.method, s.domain);
        const auto& v = metric == "loss" ? c.loss : metric == "pa_mpjpe" ? c.pa_mpjpe : c.mpjpe;
        if (v.size() < 2) continue;
        Series ser{s.method + " / " + s.domain, {}, v};
        for (std::size_t k = 0; k < v.size(); ++k) ser.x.push_back(static_cast<double>(k));
        series.push_back(std::move(ser));
    }
    return line_chart_svg(r.plan.name + ": " + metric + " per adaptation step", "step",
                          metric == "loss" ? "inner loss" : metric, series);
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open " + p.string() + " for writing");
    f << s;
    if (!f) throw IoError("write failed: " + p.string());
}

/// Writes every artifact under `dir`; returns the paths written. All of them
/// are byte-deterministic given the plan. Wall-clock timing is not written
/// here; callers put timing_json() in the run manifest.
inline std::vector<std::filesystem::path> write_experiment(const ExperimentResult& r,
                                                           const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const auto sk = Skeleton::human16();
    std::vector<fs::path> out;
    auto put = [&](const std::string& name, const std::string& body) {
        write_text(dir / name, body);
        out.push_back(dir / name);
    };
    put("plan.json", nlohmann::json(r.plan).dump(2) + "\n");
    put("results.csv", results_csv(r));
    put("summary.csv", summary_csv(r));
    put("curves.csv", curves_csv(r));
    put("per_joint.csv", per_joint_csv(r, sk));
    if (!r.grid.empty()) put("grid.csv", grid_csv(r));
    for (const char* metric : {"mpjpe", "pa_mpjpe", "loss"}) {
        put(std::string("plot_") + metric + ".tsv", plot_data_tsv(r, metric));
        put(std::string("fig_") + metric + ".svg", curve_svg(r, metric));
    }
    bool any_traces = false;
    for (const auto& run : r.runs) any_traces = any_traces || !run.traces.empty();
    if (any_traces) {
        fs::create_directories(dir / "traces");
        for (const auto& run : r.runs) {
            if (run.traces.empty()) continue;
            auto w = AdaptationTrace::csv_writer();
            for (std::size_t i = 0; i < run.traces.size(); ++i) run.traces[i].append_csv(w, std::to_string(i));
            put("traces/" + run.domain + "_" + run.method + "_seed" + std::to_string(run.seed) + ".csv", w.str());
        }
    }
    return out;
}

}  // namespace madapt
