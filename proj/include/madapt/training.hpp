// SPDX-License-Identifier: Apache-2.0
//
// training.hpp - plain pretraining, single-network meta-training and
// dual-network meta-training.
//
// Meta-training per batch:
//   for each sample j (independent, may run concurrently):
//     pseudo_j = f_u(x_j)                    aux only, treated as data
//     w'_j     = w - alpha grad_w L_inner    k plain steps, L_inner is
//                                            L_test-u (aux) or L_test
//     g_j      = grad L_train evaluated at w'_j  (first-order)
//     h_j      = grad_u L_train at u             (aux only)
//   w <- outer(w, mean_j g_j);  u <- outer(u, mean_j h_j)
// Reductions run in sample-index order so results do not depend on --jobs.
#pragma once

#include "madapt/config_error.hpp"
#include "madapt/csv.hpp"
#include "madapt/diffcore.hpp"
#include "madapt/losses.hpp"
#include "madapt/parallel.hpp"
#include "madapt/random.hpp"
#include "madapt/regressor.hpp"
#include "madapt/synth.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace madapt {

enum class OptimizerKind { adam, sgd };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

inline OptimizerKind optimizer_from_string(const std::string& s, const std::string& field) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd") return OptimizerKind::sgd;
    throw ConfigError(field, "expected 'adam' or 'sgd', got '" + s + "'");
}

struct TrainConfig {
    double alpha = 1e-5;    // inner (test-time) learning rate
    double beta_lr = 1e-4;  // outer (training) learning rate
    int epochs = 10;
    int batch_size = 0;  // 0: use the dataset's M
    int inner_steps = 1;
    OptimizerKind optimizer = OptimizerKind::adam;
    OptimizerKind inner_optimizer = OptimizerKind::sgd;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    LossConfig loss;
    // A batch loss above this (or non-finite) aborts the run as unstable.
    double divergence_threshold = 1e6;
    int jobs = 1;

    void validate() const {
        if (!(alpha > 0.0)) throw ConfigError("train.alpha", "must be > 0");
        if (!(beta_lr > 0.0)) throw ConfigError("train.beta_lr", "must be > 0");
        if (epochs < 0) throw ConfigError("train.epochs", "must be >= 0");
        if (batch_size < 0) throw ConfigError("train.batch_size", "must be >= 0");
        if (inner_steps < 1) throw ConfigError("train.inner_steps", "must be >= 1");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ConfigError("train.adam_beta1", "must lie in [0, 1)");
        if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError("train.adam_beta2", "must lie in [0, 1)");
        if (!(divergence_threshold > 0.0)) throw ConfigError("train.divergence_threshold", "must be > 0");
        try {
            loss.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError("train.loss", e.what());
        }
    }

    AdamHyper outer_adam() const { return {beta_lr, adam_beta1, adam_beta2, adam_eps}; }

    std::string describe() const {
        return "alpha=" + fmt_short(alpha) + " beta_lr=" + fmt_short(beta_lr) +
               " k=" + std::to_string(inner_steps) + " optimizer=" + to_string(optimizer);
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"alpha", c.alpha},
         {"beta_lr", c.beta_lr},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"inner_steps", c.inner_steps},
         {"optimizer", to_string(c.optimizer)},
         {"inner_optimizer", to_string(c.inner_optimizer)},
         {"adam_beta1", c.adam_beta1},
         {"adam_beta2", c.adam_beta2},
         {"adam_eps", c.adam_eps},
         {"seed", c.seed},
         {"loss", c.loss},
         {"divergence_threshold", c.divergence_threshold}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    reject_unknown_keys(j, {"alpha", "beta_lr", "epochs", "batch_size", "inner_steps", "optimizer",
                            "inner_optimizer", "adam_beta1", "adam_beta2", "adam_eps", "seed",
                            "loss", "divergence_threshold"},
                        "train.");
    read_field(j, "alpha", c.alpha, "train.");
    read_field(j, "beta_lr", c.beta_lr, "train.");
    read_field(j, "epochs", c.epochs, "train.");
    read_field(j, "batch_size", c.batch_size, "train.");
    read_field(j, "inner_steps", c.inner_steps, "train.");
    if (j.contains("optimizer"))
        c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>(), "train.optimizer");
    if (j.contains("inner_optimizer"))
        c.inner_optimizer =
            optimizer_from_string(j.at("inner_optimizer").get<std::string>(), "train.inner_optimizer");
    read_field(j, "adam_beta1", c.adam_beta1, "train.");
    read_field(j, "adam_beta2", c.adam_beta2, "train.");
    read_field(j, "adam_eps", c.adam_eps, "train.");
    read_field(j, "seed", c.seed, "train.");
    if (j.contains("loss")) {
        reject_unknown_keys(j.at("loss"), {"lambda_2d", "lambda_3d", "x_mode", "confidence_weighting"},
                            "train.loss.");
        try {
            c.loss = j.at("loss").get<LossConfig>();
        } catch (const std::exception& e) {
            throw ConfigError("train.loss", e.what());
        }
    }
    read_field(j, "divergence_threshold", c.divergence_threshold, "train.");
}

/// Training became unstable (non-finite or exploding loss).
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& config, const std::string& detail)
        : std::runtime_error("training is not stable (" + config + "): " + detail), config_(config) {}
    const std::string& config() const noexcept { return config_; }

private:
    std::string config_;
};

struct HistoryRow {
    int epoch;
    int batch;
    double main_loss;
    std::optional<double> aux_loss;
};

struct TrainHistory {
    std::vector<HistoryRow> rows;
    std::vector<double> epoch_seconds;  // wall clock, not reproducible

    std::string to_csv() const {
        CsvWriter w({"epoch", "batch", "main_loss", "aux_loss"});
        for (const auto& r : rows)
            w.row({std::to_string(r.epoch), std::to_string(r.batch), fmt_double(r.main_loss),
                   r.aux_loss ? fmt_double(*r.aux_loss) : ""});
        return w.str();
    }

    double final_main_loss() const { return rows.empty() ? NAN : rows.back().main_loss; }
};

// ---------------------------------------------------------------------------
// Inner step
// ---------------------------------------------------------------------------

/// Objective for the test-time step: L_test-u when a pseudo label is given,
/// otherwise L_test.
inline SampleObjective inner_objective(const ModelContext& ctx, const Evidence& ev,
                                       const Target3D* pseudo_gt, const LossConfig& cfg) {
    return SampleObjective(ctx, ev, pseudo_gt, cfg,
                           pseudo_gt ? ObjectiveKind::test_u : ObjectiveKind::test);
}

/// Raw-buffer inner update: w <- w - alpha grad (sgd) or one Adam step from a
/// fresh state (adam). `scratch` holds the gradient afterwards.
inline double inner_update(const ModelContext& ctx, std::span<double> w, const Target3D* pseudo_gt,
                           const Evidence& ev, double alpha, const LossConfig& cfg,
                           OptimizerKind kind, std::span<double> scratch) {
    const auto obj = inner_objective(ctx, ev, pseudo_gt, cfg);
    const double v = evaluate_into(obj, w, scratch);
    if (kind == OptimizerKind::sgd) {
        sgd_update(w, scratch, alpha);
    } else {
        auto st = AdamState::zeros(ctx.layout);
        adam_update(st, w, scratch, {alpha, 0.9, 0.999, 1e-8});
    }
    check_finite("inner_step", std::span<const double>(w.data(), w.size()));
    return v;
}

/// One plain gradient step on the test-time objective: w' = w - alpha grad L.
inline ParamVector inner_step(const ModelContext& ctx, const ParamVector& w,
                              const Target3D* pseudo_gt, const Evidence& ev, double alpha,
                              const LossConfig& cfg) {
    if (!(alpha > 0.0)) throw std::invalid_argument("inner_step: alpha must be > 0");
    if (!w.same_layout(*ctx.layout)) throw LayoutError("inner_step: params do not match model");
    const auto obj = inner_objective(ctx, ev, pseudo_gt, cfg);
    const auto vg = evaluate_with_gradient(obj, w);
    return sgd_step(w, vg.gradient, alpha);
}

/// Pseudo label from a frozen network: its body prediction and FK joints.
inline Target3D pseudo_label(const ModelContext& ctx, std::span<const double> u,
                             const Evidence& ev) {
    return Target3D::from_body(ctx.skeleton, regress(ctx, u, ev.observation).body);
}

// ---------------------------------------------------------------------------
// Per-sample meta-gradient
// ---------------------------------------------------------------------------

struct MetaSampleResult {
    std::vector<double> adapted;  // w'
    std::vector<double> main_grad;
    double main_loss = 0.0;
    std::vector<double> aux_grad;
    double aux_loss = 0.0;
};

/// Inner adaptation plus first-order outer gradient for a single example.
inline void meta_sample(const ModelContext& ctx, std::span<const double> w,
                        std::span<const double> u, const LabeledExample& ex,
                        const TrainConfig& cfg, MetaSampleResult& out) {
    const bool with_aux = !u.empty();
    out.adapted.assign(w.begin(), w.end());
    out.main_grad.assign(w.size(), 0.0);
    std::optional<Target3D> pseudo;
    if (with_aux) pseudo = pseudo_label(ctx, u, *ex.evidence);
    for (int k = 0; k < cfg.inner_steps; ++k)
        inner_update(ctx, out.adapted, pseudo ? &*pseudo : nullptr, *ex.evidence, cfg.alpha,
                     cfg.loss, cfg.inner_optimizer, out.main_grad);
    const SampleObjective outer(ctx, *ex.evidence, ex.truth, cfg.loss, ObjectiveKind::train);
    out.main_loss = evaluate_into(outer, out.adapted, out.main_grad);
    if (with_aux) {
        out.aux_grad.assign(u.size(), 0.0);
        out.aux_loss = evaluate_into(outer, u, out.aux_grad);
    }
}

inline MetaSampleResult meta_sample(const ModelContext& ctx, const ParamVector& w,
                                    const ParamVector* u, const LabeledExample& ex,
                                    const TrainConfig& cfg) {
    MetaSampleResult r;
    meta_sample(ctx, w.values(), u ? u->values() : std::span<const double>{}, ex, cfg, r);
    return r;
}

// ---------------------------------------------------------------------------
// Loops
// ---------------------------------------------------------------------------

struct TrainResult {
    ParamVector main;
    std::optional<ParamVector> aux;
    TrainHistory history;
};

namespace detail {

class OuterOptimizer {
public:
    OuterOptimizer(const TrainConfig& cfg, LayoutPtr layout)
        : cfg_(cfg), adam_(AdamState::zeros(std::move(layout))) {}

    void step(std::span<double> w, std::span<const double> g) {
        if (cfg_.optimizer == OptimizerKind::adam)
            adam_update(adam_, w, g, cfg_.outer_adam());
        else
            sgd_update(w, g, cfg_.beta_lr);
    }

private:
    const TrainConfig& cfg_;
    AdamState adam_;
};

inline void check_batch_loss(const TrainConfig& cfg, double loss, int epoch, int batch,
                             const char* which) {
    if (!std::isfinite(loss) || loss > cfg.divergence_threshold)
        throw DivergenceError(cfg.describe(), std::string(which) + " loss " + fmt_short(loss) +
                                                  " at epoch " + std::to_string(epoch) +
                                                  " batch " + std::to_string(batch));
}

inline void check_params(const TrainConfig& cfg, std::span<const double> w, const char* which) {
    if (!all_finite(w))
        throw DivergenceError(cfg.describe(), std::string("non-finite ") + which + " parameters");
}

// Shared epoch/batch driver. `per_sample(slot, example)` fills slot results;
// `apply(batch_slots, epoch, batch)` reduces and updates.
template <class PerSample, class Apply>
void run_epochs(std::span<const LabeledExample> data, const TrainConfig& cfg, int batch_size,
                TrainHistory& history, PerSample&& per_sample, Apply&& apply) {
    if (data.empty()) throw std::invalid_argument("training set is empty");
    const int M = batch_size;
    const int n_batches = static_cast<int>(data.size()) / M;
    if (n_batches < 1)
        throw std::invalid_argument("training set smaller than one batch (" + std::to_string(M) + ")");
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
    for (int e = 0; e < cfg.epochs; ++e) {
        const auto t0 = std::chrono::steady_clock::now();
        shuffle_rng.shuffle(order);
        for (int b = 0; b < n_batches; ++b) {
            parallel_for(static_cast<std::size_t>(M), cfg.jobs, [&](std::size_t j) {
                per_sample(j, data[order[static_cast<std::size_t>(b) * M + j]]);
            });
            apply(e, b);
        }
        history.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
}

}  // namespace detail

/// Config batch size if set, otherwise the dataset's M.
inline int effective_batch_size(const TrainConfig& cfg, const Dataset& ds) {
    return cfg.batch_size > 0 ? cfg.batch_size : ds.batch_size;
}

inline std::uint64_t main_init_seed(std::uint64_t seed) { return derive_seed(seed, "init-main"); }
inline std::uint64_t aux_init_seed(std::uint64_t seed) { return derive_seed(seed, "init-aux"); }

/// Minimises the batch-mean L_train with the outer optimizer.
inline TrainResult pretrain(const ModelContext& ctx, std::span<const LabeledExample> data,
                            const TrainConfig& cfg, int batch_size,
                            std::optional<ParamVector> init = std::nullopt) {
    cfg.validate();
    ParamVector start = init ? *init : init_params(ctx.spec, main_init_seed(cfg.seed));
    if (!start.same_layout(*ctx.layout)) throw LayoutError("pretrain: init does not match model");
    TrainResult res{start, std::nullopt, {}};
    if (cfg.epochs == 0) return res;

    std::vector<double> w = start.to_vector();
    const auto P = w.size();
    std::vector<std::vector<double>> grads(batch_size, std::vector<double>(P));
    std::vector<double> losses(batch_size);
    std::vector<double> mean(P);
    detail::OuterOptimizer opt(cfg, ctx.layout);

    try {
        detail::run_epochs(
            data, cfg, batch_size, res.history,
            [&](std::size_t j, const LabeledExample& ex) {
                const SampleObjective obj(ctx, *ex.evidence, ex.truth, cfg.loss, ObjectiveKind::train);
                losses[j] = evaluate_into(obj, w, grads[j]);
            },
            [&](int e, int b) {
                std::fill(mean.begin(), mean.end(), 0.0);
                double loss = 0.0;
                for (int j = 0; j < batch_size; ++j) {
                    loss += losses[j];
                    for (std::size_t i = 0; i < P; ++i) mean[i] += grads[j][i];
                }
                const double inv = 1.0 / batch_size;
                for (auto& x : mean) x *= inv;
                loss *= inv;
                detail::check_batch_loss(cfg, loss, e, b, "main");
                opt.step(w, mean);
                detail::check_params(cfg, w, "main");
                res.history.rows.push_back({e, b, loss, std::nullopt});
            });
    } catch (const NonFiniteError& err) {
        throw DivergenceError(cfg.describe(), err.what());
    }
    res.main = ParamVector(ctx.layout, std::move(w));
    return res;
}

/// Meta-training. With `with_aux` the dual-network objective is used and the
/// auxiliary network is trained by L_train alone; its predictions reach the
/// main network only as constant pseudo labels.
inline TrainResult meta_train(const ModelContext& ctx, std::span<const LabeledExample> data,
                              const TrainConfig& cfg, int batch_size, bool with_aux) {
    cfg.validate();
    TrainResult res{init_params(ctx.spec, main_init_seed(cfg.seed)), std::nullopt, {}};
    if (with_aux) res.aux = init_params(ctx.spec, aux_init_seed(cfg.seed));
    if (cfg.epochs == 0) return res;

    std::vector<double> w = res.main.to_vector();
    std::vector<double> u = with_aux ? res.aux->to_vector() : std::vector<double>{};
    const auto P = w.size();
    std::vector<MetaSampleResult> slots(batch_size);
    std::vector<double> mean_w(P), mean_u(with_aux ? P : 0);
    detail::OuterOptimizer opt_w(cfg, ctx.layout), opt_u(cfg, ctx.layout);

    try {
        detail::run_epochs(
            data, cfg, batch_size, res.history,
            [&](std::size_t j, const LabeledExample& ex) {
                meta_sample(ctx, w, u, ex, cfg, slots[j]);
            },
            [&](int e, int b) {
                std::fill(mean_w.begin(), mean_w.end(), 0.0);
                std::fill(mean_u.begin(), mean_u.end(), 0.0);
                double lw = 0.0, lu = 0.0;
                for (int j = 0; j < batch_size; ++j) {
                    const auto& s = slots[j];
                    lw += s.main_loss;
                    for (std::size_t i = 0; i < P; ++i) mean_w[i] += s.main_grad[i];
                    if (with_aux) {
                        lu += s.aux_loss;
                        for (std::size_t i = 0; i < P; ++i) mean_u[i] += s.aux_grad[i];
                    }
                }
                const double inv = 1.0 / batch_size;
                for (auto& x : mean_w) x *= inv;
                for (auto& x : mean_u) x *= inv;
                lw *= inv;
                lu *= inv;
                detail::check_batch_loss(cfg, lw, e, b, "main");
                opt_w.step(w, mean_w);
                detail::check_params(cfg, w, "main");
                std::optional<double> aux_loss;
                if (with_aux) {
                    detail::check_batch_loss(cfg, lu, e, b, "aux");
                    opt_u.step(u, mean_u);
                    detail::check_params(cfg, u, "aux");
                    aux_loss = lu;
                }
                res.history.rows.push_back({e, b, lw, aux_loss});
            });
    } catch (const NonFiniteError& err) {
        throw DivergenceError(cfg.describe(), err.what());
    }
    res.main = ParamVector(ctx.layout, std::move(w));
    if (with_aux) res.aux = ParamVector(ctx.layout, std::move(u));
    return res;
}

inline TrainResult pretrain(const ModelContext& ctx, const Dataset& ds, const TrainConfig& cfg) {
    const auto view = training_view(ds);
    return pretrain(ctx, view, cfg, effective_batch_size(cfg, ds));
}

inline TrainResult meta_train(const ModelContext& ctx, const Dataset& ds, const TrainConfig& cfg,
                              bool with_aux) {
    const auto view = training_view(ds);
    return meta_train(ctx, view, cfg, effective_batch_size(cfg, ds), with_aux);
}

}  // namespace madapt
