// SPDX-License-Identifier: Apache-2.0
#include "madapt/adapt.hpp"
#include "madapt/gradcheck.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace madapt;

namespace {

struct Constant {
    double operator()(std::span<const double>, std::span<double>) const { return 2.5; }
};

struct HalfSquare {
    double operator()(std::span<const double> w, std::span<double> g) const {
        double v = 0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            v += 0.5 * w[i] * w[i];
            g[i] += w[i];
        }
        return v;
    }
};

// Square that overflows to +inf once |w| leaves [-10, 10].
struct Exploding {
    double operator()(std::span<const double> w, std::span<double> g) const {
        if (std::abs(w[0]) > 10) return INFINITY;
        g[0] += 2 * w[0];
        return w[0] * w[0];
    }
};

AdaptationTrace run_flat(auto objective, std::vector<double> w, const AdaptConfig& cfg,
                         std::vector<double>* final_w = nullptr) {
    auto [out, trace] = run_adaptation(objective, w, cfg, nullptr, flat_layout(w.size()));
    if (final_w) *final_w = out;
    return trace;
}

// Models shared across the suite: a briefly pretrained network and a
// dual-network meta-trained pair on the default domain.
struct Models {
    ModelContext ctx = tu::small_context({32, 32});
    ParamVector pre, meta, aux;
    Dataset test;

    Models() {
        const auto train = make_dataset(ctx.skeleton, domain_preset("default"), 10, 20, 1);
        TrainConfig cfg;
        cfg.epochs = 10;
        cfg.beta_lr = 3e-3;
        cfg.seed = 2;
        pre = pretrain(ctx, train, cfg).main;
        cfg.alpha = 1e-5;
        auto m = meta_train(ctx, train, cfg, true);
        meta = m.main;
        aux = *m.aux;
        test = make_dataset(ctx.skeleton, domain_preset("default"), 1, 100, 3);
    }
};

const Models& models() {
    static const Models m;
    return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

TEST(RunAdaptation, ZeroStepsLeavesParams) {
    AdaptConfig cfg;
    cfg.max_steps = 0;
    std::vector<double> out;
    const auto tr = run_flat(HalfSquare{}, {1.0, -2.0}, cfg, &out);
    EXPECT_EQ(out, (std::vector<double>{1.0, -2.0}));
    EXPECT_EQ(tr.records.size(), 1u);
    EXPECT_EQ(tr.steps_executed, 0);
    EXPECT_FALSE(tr.stopped_early);
}

TEST(RunAdaptation, ConstantLossStopsAtSecondIteration) {
    AdaptConfig cfg;
    const auto tr = run_flat(Constant{}, {0.3, 0.4}, cfg);
    EXPECT_TRUE(tr.stopped_early);
    EXPECT_EQ(tr.stop_iteration, 2);
    EXPECT_EQ(tr.steps_executed, 1);
    EXPECT_EQ(tr.records.size(), 2u);
}

TEST(RunAdaptation, SteadyDecreaseRunsAllSteps) {
    AdaptConfig cfg;
    cfg.alpha = 0.01;  // loss ratio (1 - alpha)^2: relative change ~2e-2 > tol
    std::vector<double> out;
    const auto tr = run_flat(HalfSquare{}, {1.0}, cfg, &out);
    EXPECT_FALSE(tr.stopped_early);
    EXPECT_EQ(tr.steps_executed, 14);
    ASSERT_EQ(tr.records.size(), 15u);
    for (std::size_t t = 1; t < tr.records.size(); ++t) EXPECT_LT(tr.records[t].loss, tr.records[t - 1].loss);
    EXPECT_NEAR(out[0], std::pow(0.99, 14), 1e-15);
}

TEST(RunAdaptation, EarlyStopRuleIsExact) {
    EXPECT_TRUE(early_stop_triggered(1.0, 1.0 - 0.9e-3, 1e-3));
    EXPECT_FALSE(early_stop_triggered(1.0, 1.0 - 1.1e-3, 1e-3));
    EXPECT_FALSE(early_stop_triggered(1.0, 1.0 + 1.1e-3, 1e-3));
    EXPECT_TRUE(early_stop_triggered(0.0, 0.0, 1e-3));
    EXPECT_FALSE(early_stop_triggered(0.0, 1e-14, 1e-3));  // floor 1e-12 on the denominator
}

TEST(RunAdaptation, NonFiniteLossReturnsLastFiniteParams) {
    AdaptConfig cfg;
    cfg.alpha = 3.0;  // w <- -5 w
    std::vector<double> out;
    const auto tr = run_flat(Exploding{}, {0.1}, cfg, &out);
    EXPECT_TRUE(tr.diverged);
    EXPECT_EQ(tr.steps_executed, 2);  // 0.1 -> -0.5 -> 2.5 -> -12.5 (inf)
    EXPECT_DOUBLE_EQ(out[0], 2.5);
    for (const auto& r : tr.records) EXPECT_TRUE(std::isfinite(r.loss));
}

TEST(AdaptConfig, Validation) {
    AdaptConfig c;
    c.max_steps = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = AdaptConfig{};
    c.early_stop_rel_tol = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(adapt_mode_from_string("fast"), ConfigError);
}

// ---------------------------------------------------------------------------
// EFT and dual on real models
// ---------------------------------------------------------------------------

TEST(AdaptEft, ZeroStepsReturnsStart) {
    const auto& m = models();
    AdaptConfig cfg;
    cfg.max_steps = 0;
    const auto r = adapt_eft(m.ctx, m.pre, m.test.samples[0].evidence, cfg);
    EXPECT_TRUE(r.params == m.pre);
    EXPECT_EQ(r.trace.records.size(), 1u);
}

TEST(AdaptEft, ConvergedStartStopsAfterFirstStep) {
    const auto& m = models();
    Evidence ev = m.test.samples[0].evidence;
    const auto pred = regress(m.ctx, m.pre.values(), ev.observation);
    ev.target_j2d = project(forward_kinematics(m.ctx.skeleton, pred.body), pred.cam);
    const auto r = adapt_eft(m.ctx, m.pre, ev, AdaptConfig{});
    EXPECT_EQ(r.trace.records[0].loss, 0.0);
    EXPECT_TRUE(r.trace.stopped_early);
    EXPECT_EQ(r.trace.steps_executed, 1);
    EXPECT_EQ(r.trace.stop_iteration, 2);
    EXPECT_TRUE(r.params == m.pre);
}

TEST(AdaptEft, FittedLossDecreasesOnNoisySamples) {
    const auto& m = models();
    int decreased = 0;
    for (const auto& s : m.test.samples) {
        const auto r = adapt_eft(m.ctx, m.pre, s.evidence, AdaptConfig{});
        decreased += r.trace.records.back().loss < r.trace.records.front().loss;
    }
    EXPECT_EQ(decreased, 100);
}

TEST(AdaptEft, MostStepsDecreaseTheLoss) {
    const auto& m = models();
    for (auto mode : {AdaptMode::eft, AdaptMode::dual}) {
        int steps = 0, down = 0;
        AdaptConfig cfg;
        cfg.mode = mode;
        for (const auto& s : m.test.samples) {
            const auto r = adapt(m.ctx, mode == AdaptMode::dual ? m.meta : m.pre, &m.aux, s.evidence, cfg);
            for (std::size_t t = 1; t < r.trace.records.size(); ++t, ++steps)
                down += r.trace.records[t].loss < r.trace.records[t - 1].loss;
        }
        ASSERT_GT(steps, 0);
        EXPECT_GE(static_cast<double>(down) / steps, 0.95) << to_string(mode);
    }
}

TEST(AdaptEft, EarlyStopSoundnessOnEveryTrace) {
    const auto& m = models();
    AdaptConfig cfg;
    cfg.alpha = 1e-4;
    cfg.early_stop_rel_tol = 5e-3;
    int stops = 0;
    for (const auto& s : m.test.samples) {
        const auto tr = adapt_eft(m.ctx, m.pre, s.evidence, cfg).trace;
        EXPECT_EQ(tr.records.size(), static_cast<std::size_t>(tr.steps_executed) + 1);
        for (int t = 1; t <= tr.steps_executed; ++t) {
            const double a = tr.records[t - 1].loss, b = tr.records[t].loss;
            const bool rule = std::abs(b - a) / std::max(a, 1e-12) < cfg.early_stop_rel_tol;
            // The rule fires exactly at the last executed step when stopped early.
            EXPECT_EQ(rule, tr.stopped_early && t == tr.steps_executed) << t;
        }
        stops += tr.stopped_early;
    }
    EXPECT_GT(stops, 0);
}

TEST(AdaptDual, TrueGroundTruthLabelDescendsTowardIt) {
    const auto& m = models();
    const auto& spec = m.ctx.spec;
    const auto L = m.ctx.layout;
    AdaptConfig cfg;
    cfg.mode = AdaptMode::dual;
    cfg.loss.lambda_2d = 0.0;
    cfg.alpha = 1e-4;
    cfg.early_stop_rel_tol = 1e-9;
    for (std::size_t i = 0; i < 10; ++i) {
        const auto& s = m.test.samples[i];
        // Auxiliary network with a zero last layer and biases set to the GT:
        // it outputs the true body for every input.
        auto u = ParamVector::zeros(L).to_vector();
        const std::size_t bias = L->offset(L->layer_count() - 1);
        const int J = spec.joints;
        for (int j = 0; j < J; ++j)
            for (int k = 0; k < 3; ++k) u[bias + 3 * j + k] = s.truth.body.theta(j, k) / spec.gain(3 * j + k);
        for (int b = 0; b < spec.shape_dim; ++b) u[bias + 3 * J + b] = s.truth.body.beta[b] / spec.gain(3 * J + b);
        const ParamVector aux(L, u);
        ASSERT_LT((pseudo_label(m.ctx, aux.values(), s.evidence).joints - s.truth.joints).cwiseAbs().maxCoeff(), 1e-12);

        const auto obs = metric_observer(m.ctx, s.evidence, s.truth.joints);
        const auto r = adapt_dual(m.ctx, m.meta, aux, s.evidence, cfg, &obs);
        ASSERT_EQ(r.trace.steps_executed, 14);
        for (std::size_t t = 1; t < r.trace.records.size(); ++t)
            EXPECT_LE(*r.trace.records[t].mpjpe, *r.trace.records[t - 1].mpjpe) << "sample " << i << " step " << t;
        EXPECT_LT(*r.trace.records.back().mpjpe, *r.trace.records.front().mpjpe);
    }
}

TEST(AdaptDual, ObserverIsTransparent) {
    const auto& m = models();
    AdaptConfig cfg;
    cfg.mode = AdaptMode::dual;
    for (std::size_t i = 0; i < 10; ++i) {
        const auto& s = m.test.samples[i];
        const auto obs = metric_observer(m.ctx, s.evidence, s.truth.joints);
        const auto a = adapt_dual(m.ctx, m.meta, m.aux, s.evidence, cfg);
        const auto b = adapt_dual(m.ctx, m.meta, m.aux, s.evidence, cfg, &obs);
        ASSERT_EQ(a.trace.records.size(), b.trace.records.size());
        for (std::size_t t = 0; t < a.trace.records.size(); ++t) {
            EXPECT_EQ(a.trace.records[t].loss, b.trace.records[t].loss);
            EXPECT_FALSE(a.trace.records[t].mpjpe.has_value());
            EXPECT_TRUE(b.trace.records[t].mpjpe.has_value());
        }
        EXPECT_TRUE(a.params == b.params);
    }
}

TEST(AdaptDual, HoistedPseudoLabelEqualsPerStepRecompute) {
    const auto& m = models();
    AdaptConfig cfg;
    cfg.mode = AdaptMode::dual;
    cfg.early_stop_rel_tol = 1e-12;  // run all steps
    for (std::size_t i = 0; i < 5; ++i) {
        const auto& s = m.test.samples[i];
        const auto r = adapt_dual(m.ctx, m.meta, m.aux, s.evidence, cfg);
        // Loop as printed: the pseudo label is recomputed inside every iteration.
        auto w = m.meta;
        for (int t = 0; t < r.trace.steps_executed; ++t) {
            const Target3D pseudo = pseudo_label(m.ctx, m.aux.values(), s.evidence);
            w = inner_step(m.ctx, w, &pseudo, s.evidence, cfg.alpha, cfg.loss);
        }
        EXPECT_TRUE(w == r.params) << i;
    }
}

TEST(Adapt, SamplesAreIsolated) {
    const auto& m = models();
    const auto meta_copy = m.meta.to_vector(), aux_copy = m.aux.to_vector();
    AdaptConfig cfg;
    cfg.mode = AdaptMode::dual;
    const auto alone = adapt(m.ctx, m.meta, &m.aux, m.test.samples[1].evidence, cfg);
    (void)adapt(m.ctx, m.meta, &m.aux, m.test.samples[0].evidence, cfg);
    const auto after = adapt(m.ctx, m.meta, &m.aux, m.test.samples[1].evidence, cfg);
    EXPECT_TRUE(alone.params == after.params);
    EXPECT_EQ(m.meta.to_vector(), meta_copy);
    EXPECT_EQ(m.aux.to_vector(), aux_copy);
}

TEST(Adapt, NoneModeIsInference) {
    const auto& m = models();
    AdaptConfig cfg;
    cfg.mode = AdaptMode::none;
    const auto r = adapt(m.ctx, m.pre, nullptr, m.test.samples[2].evidence, cfg);
    EXPECT_TRUE(r.params == m.pre);
    cfg.mode = AdaptMode::dual;
    EXPECT_THROW(adapt(m.ctx, m.pre, nullptr, m.test.samples[2].evidence, cfg), ConfigError);
}

TEST(Infer, WrapsRegressAndIgnoresAux) {
    const auto& m = models();
    const auto& ev = m.test.samples[3].evidence;
    const auto a = infer(m.ctx, m.meta, ev);
    const auto b = regress(m.ctx.spec, m.meta, ev.observation);
    const auto c = infer(m.ctx, m.meta, ev);
    EXPECT_TRUE(a.body == b.body && a.cam == b.cam);
    EXPECT_TRUE(a.body == c.body && a.cam == c.cam);
}

TEST(Trace, CsvHasOneRowPerRecord) {
    const auto& m = models();
    const auto& s = m.test.samples[4];
    const auto obs = metric_observer(m.ctx, s.evidence, s.truth.joints);
    const auto r = adapt_eft(m.ctx, m.pre, s.evidence, AdaptConfig{}, &obs);
    auto w = AdaptationTrace::csv_writer();
    r.trace.append_csv(w, "4");
    const auto csv = w.str();
    EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), r.trace.records.size() + 1);
    EXPECT_EQ(csv.rfind("sample_id,step,loss,mpjpe,pa_mpjpe,stopped_early\n", 0), 0u);
}
