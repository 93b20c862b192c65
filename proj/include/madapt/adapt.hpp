// SPDX-License-Identifier: Apache-2.0
//
// adapt.hpp - per-sample test-time optimisation (EFT and dual-network) with
// early stopping and step traces.
//
// Iteration semantics: trace step 0 is the starting point. Step t >= 1 holds
// the loss after t updates. The run stops early at the first t where
//   |L_t - L_{t-1}| / max(L_{t-1}, 1e-12) < tol,
// i.e. during loop iteration t + 1, before that iteration's update is applied.
#pragma once

#include "madapt/config_error.hpp"
#include "madapt/csv.hpp"
#include "madapt/diffcore.hpp"
#include "madapt/losses.hpp"
#include "madapt/metrics.hpp"
#include "madapt/training.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace madapt {

enum class AdaptMode { none, eft, dual };

inline std::string to_string(AdaptMode m) {
    switch (m) {
        case AdaptMode::none: return "none";
        case AdaptMode::eft: return "eft";
        case AdaptMode::dual: return "dual";
    }
    return "?";
}

inline AdaptMode adapt_mode_from_string(const std::string& s) {
    if (s == "none") return AdaptMode::none;
    if (s == "eft") return AdaptMode::eft;
    if (s == "dual") return AdaptMode::dual;
    throw ConfigError("adapt.mode", "expected none|eft|dual, got '" + s + "'");
}

struct AdaptConfig {
    int max_steps = 14;
    double alpha = 1e-5;
    double early_stop_rel_tol = 1e-3;
    AdaptMode mode = AdaptMode::eft;
    OptimizerKind optimizer = OptimizerKind::sgd;
    LossConfig loss;  // used by dual mode (L_test-u)

    void validate() const {
        if (max_steps < 0) throw ConfigError("adapt.max_steps", "must be >= 0");
        if (!(alpha > 0.0)) throw ConfigError("adapt.alpha", "must be > 0");
        if (!(early_stop_rel_tol > 0.0)) throw ConfigError("adapt.early_stop_rel_tol", "must be > 0");
        try {
            loss.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("adapt.loss", e.what());
        }
    }
};

inline void to_json(nlohmann::json& j, const AdaptConfig& c) {
    j = {{"max_steps", c.max_steps},
         {"alpha", c.alpha},
         {"early_stop_rel_tol", c.early_stop_rel_tol},
         {"mode", to_string(c.mode)},
         {"optimizer", to_string(c.optimizer)},
         {"loss", c.loss}};
}

inline void from_json(const nlohmann::json& j, AdaptConfig& c) {
    reject_unknown_keys(j, {"max_steps", "alpha", "early_stop_rel_tol", "mode", "optimizer", "loss"},
                        "adapt.");
    read_field(j, "max_steps", c.max_steps, "adapt.");
    read_field(j, "alpha", c.alpha, "adapt.");
    read_field(j, "early_stop_rel_tol", c.early_stop_rel_tol, "adapt.");
    if (j.contains("mode")) c.mode = adapt_mode_from_string(j.at("mode").get<std::string>());
    if (j.contains("optimizer"))
        c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>(), "adapt.optimizer");
    if (j.contains("loss")) {
        reject_unknown_keys(j.at("loss"), {"lambda_2d", "lambda_3d", "x_mode", "confidence_weighting"},
                            "adapt.loss.");
        try {
            c.loss = j.at("loss").get<LossConfig>();
        } catch (const std::exception& e) {
            throw ConfigError("adapt.loss", e.what());
        }
    }
}

struct TraceRecord {
    int step = 0;
    double loss = 0.0;
    std::optional<double> mpjpe;
    std::optional<double> pa_mpjpe;
};

struct AdaptationTrace {
    std::vector<TraceRecord> records;  // size steps_executed + 1
    int steps_executed = 0;
    bool stopped_early = false;
    int stop_iteration = 0;  // 1-based loop iteration that triggered the stop
    bool diverged = false;

    void append_csv(CsvWriter& w, const std::string& sample_id) const {
        auto opt = [](const std::optional<double>& v) { return v ? fmt_double(*v) : std::string(); };
        for (const auto& r : records)
            w.row({sample_id, std::to_string(r.step), fmt_double(r.loss), opt(r.mpjpe),
                   opt(r.pa_mpjpe), stopped_early ? "1" : "0"});
    }

    static CsvWriter csv_writer() {
        return CsvWriter({"sample_id", "step", "loss", "mpjpe", "pa_mpjpe", "stopped_early"});
    }
};

/// Called once per trace record with the parameters that produced it.
/// Must not influence the optimisation; it only fills diagnostic fields.
using StepObserver = std::function<void(std::span<const double> w, TraceRecord& rec)>;

struct AdaptResult {
    ParamVector params;
    AdaptationTrace trace;
};

inline bool early_stop_triggered(double previous, double current, double tol) {
    return std::abs(current - previous) / std::max(previous, 1e-12) < tol;
}

/// Generic engine: gradient descent on any objective with the early-stop
/// rule above. Non-finite losses end the run and the last finite parameters
/// are returned with `diverged` set.
template <DifferentiableObjective F>
std::pair<std::vector<double>, AdaptationTrace> run_adaptation(const F& objective,
                                                               std::vector<double> w,
                                                               const AdaptConfig& cfg,
                                                               const StepObserver* observer,
                                                               const LayoutPtr& layout) {
    AdaptationTrace trace;
    std::vector<double> grad(w.size(), 0.0);
    auto record = [&](int step, double loss, std::span<const double> at) {
        TraceRecord rec{step, loss, std::nullopt, std::nullopt};
        if (observer && *observer) (*observer)(at, rec);
        trace.records.push_back(rec);
    };

    double prev;
    try {
        prev = evaluate_into(objective, w, grad);
    } catch (const NonFiniteError&) {
        trace.diverged = true;
        record(0, NAN, w);
        return {std::move(w), std::move(trace)};
    }
    record(0, prev, w);

    std::optional<AdamState> adam;
    if (cfg.optimizer == OptimizerKind::adam) adam = AdamState::zeros(layout);
    std::vector<double> next(w.size());
    for (int t = 1; t <= cfg.max_steps; ++t) {
        next = w;
        if (adam)
            adam_update(*adam, next, grad, {cfg.alpha, 0.9, 0.999, 1e-8});
        else
            sgd_update(next, grad, cfg.alpha);
        double cur;
        try {
            if (!all_finite(next)) throw NonFiniteError("adapt_step");
            cur = evaluate_into(objective, next, grad);
        } catch (const NonFiniteError&) {
            trace.diverged = true;
            break;
        }
        w.swap(next);
        trace.steps_executed = t;
        record(t, cur, w);
        if (early_stop_triggered(prev, cur, cfg.early_stop_rel_tol)) {
            trace.stopped_early = true;
            trace.stop_iteration = t + 1;
            break;
        }
        prev = cur;
    }
    return {std::move(w), std::move(trace)};
}

/// Test-time optimisation on the 2D reprojection loss only.
inline AdaptResult adapt_eft(const ModelContext& ctx, const ParamVector& w_start,
                             const Evidence& ev, const AdaptConfig& cfg,
                             const StepObserver* observer = nullptr) {
    cfg.validate();
    if (!w_start.same_layout(*ctx.layout)) throw LayoutError("adapt_eft: params do not match model");
    const SampleObjective obj(ctx, ev, nullptr, cfg.loss, ObjectiveKind::test);
    auto [w, trace] = run_adaptation(obj, w_start.to_vector(), cfg, observer, ctx.layout);
    return {ParamVector(ctx.layout, std::move(w)), std::move(trace)};
}

/// Dual-network inference: the frozen auxiliary network supplies a pseudo
/// label (computed once; the input and u_meta are fixed) and the main network
/// descends L_test-u.
inline AdaptResult adapt_dual(const ModelContext& ctx, const ParamVector& w_meta,
                              const ParamVector& u_meta, const Evidence& ev,
                              const AdaptConfig& cfg, const StepObserver* observer = nullptr) {
    cfg.validate();
    if (!w_meta.same_layout(*ctx.layout) || !u_meta.same_layout(*ctx.layout))
        throw LayoutError("adapt_dual: params do not match model");
    const Target3D pseudo = pseudo_label(ctx, u_meta.values(), ev);
    const SampleObjective obj(ctx, ev, &pseudo, cfg.loss, ObjectiveKind::test_u);
    auto [w, trace] = run_adaptation(obj, w_meta.to_vector(), cfg, observer, ctx.layout);
    return {ParamVector(ctx.layout, std::move(w)), std::move(trace)};
}

inline Prediction infer(const ModelContext& ctx, const ParamVector& w, const Evidence& ev) {
    if (!w.same_layout(*ctx.layout)) throw LayoutError("infer: params do not match model");
    return regress(ctx, w.values(), ev.observation);
}

/// Dispatches on cfg.mode; `aux` is required for dual.
inline AdaptResult adapt(const ModelContext& ctx, const ParamVector& w, const ParamVector* aux,
                         const Evidence& ev, const AdaptConfig& cfg,
                         const StepObserver* observer = nullptr) {
    switch (cfg.mode) {
        case AdaptMode::none: {
            AdaptConfig c = cfg;
            c.max_steps = 0;
            return adapt_eft(ctx, w, ev, c, observer);
        }
        case AdaptMode::eft: return adapt_eft(ctx, w, ev, cfg, observer);
        case AdaptMode::dual:
            if (!aux) throw ConfigError("adapt.mode", "dual mode needs an auxiliary network");
            return adapt_dual(ctx, w, *aux, ev, cfg, observer);
    }
    throw ConfigError("adapt.mode", "unhandled mode");
}

/// Observer filling MPJPE / PA-MPJPE against held-out ground truth.
inline StepObserver metric_observer(const ModelContext& ctx, const Evidence& ev,
                                    const Joints3D& gt_j3d) {
    return [&ctx, &ev, &gt_j3d](std::span<const double> w, TraceRecord& rec) {
        const auto pred = regress(ctx, w, ev.observation);
        const auto joints = forward_kinematics(ctx.skeleton, pred.body);
        rec.mpjpe = mpjpe(joints, gt_j3d);
        rec.pa_mpjpe = pa_mpjpe(joints, gt_j3d);
    };
}

}  // namespace madapt
