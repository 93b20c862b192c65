// SPDX-License-Identifier: Apache-2.0
//
// gradcheck.hpp - analytic vs central-difference gradients for every loss,
// over all weights of a small regressor on random (params, sample) pairs.
#pragma once

#include "madapt/csv.hpp"
#include "madapt/diffcore.hpp"
#include "madapt/losses.hpp"
#include "madapt/random.hpp"
#include "madapt/synth.hpp"
#include "madapt/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace madapt {

struct GradCheckRow {
    std::string loss;
    int pair = 0;
    std::string x_mode;
    std::size_t coordinates = 0;
    double loss_value = 0.0;
    double noise_floor = 0.0;     // floor actually used for the relative error
    double max_rel_error = 0.0;   // with noise_floor
    double raw_rel_error = 0.0;   // with the fixed 1e-8 floor, for reference
    std::size_t noise_limited = 0;  // coordinates below the noise floor
};

struct GradCheckReport {
    std::vector<GradCheckRow> rows;

    double worst() const {
        double w = 0.0;
        for (const auto& r : rows) w = std::max(w, r.max_rel_error);
        return w;
    }
    bool passed(double tol = 1e-4) const { return !rows.empty() && worst() < tol; }

    std::string to_csv() const {
        CsvWriter w({"loss", "pair", "x_mode", "coordinates", "loss_value", "noise_floor",
                     "max_rel_error", "raw_rel_error", "noise_limited"});
        for (const auto& r : rows)
            w.row({r.loss, std::to_string(r.pair), r.x_mode, std::to_string(r.coordinates),
                   fmt_double(r.loss_value), fmt_double(r.noise_floor), fmt_double(r.max_rel_error),
                   fmt_double(r.raw_rel_error), std::to_string(r.noise_limited)});
        return w.str();
    }
};

struct GradCheckOptions {
    int pairs = 20;
    double step = 1e-5;
    double tol = 1e-4;
    double floor = 1e-8;
    // Central differences cannot resolve a derivative below about
    // ulps * eps * |L| / h. Coordinates under that level are compared at the
    // noise level instead of relatively; see noise_floor().
    double roundoff_ulps = 4.0;
    std::vector<int> hidden = {8, 8};
};

/// Relative-error floor such that rel < tol is equivalent to the absolute
/// error being under the central-difference roundoff bound.
inline double noise_floor(const GradCheckOptions& opt, double loss_value) {
    const double noise = opt.roundoff_ulps * std::numeric_limits<double>::epsilon() *
                         std::max(1.0, std::abs(loss_value)) / opt.step;
    return std::max(opt.floor, noise / opt.tol);
}

inline const char* const kCheckedLosses[] = {"L_2D", "L_3D", "L_train", "L_test", "L_test-u"};

/// Weights from init_params plus N(0, 0.1) jitter so biases are nonzero.
inline ParamVector random_params(const RegressorSpec& spec, std::uint64_t seed) {
    auto base = init_params(spec, seed).to_vector();
    Rng rng(derive_seed(seed, "jitter"));
    for (auto& x : base) x += 0.1 * rng.normal();
    return ParamVector(spec.layout(), std::move(base));
}

inline GradCheckReport run_grad_check(std::uint64_t seed, const GradCheckOptions& opt = {}) {
    const auto sk = Skeleton::human16();
    const ModelContext ctx(sk, RegressorSpec::for_skeleton(sk, opt.hidden));
    const auto data = make_dataset(sk, domain_preset("default"), 1, opt.pairs, derive_seed(seed, "data"));
    const XMode modes[] = {XMode::joints3d, XMode::params_identity, XMode::both};
    GradCheckReport rep;
    for (int p = 0; p < opt.pairs; ++p) {
        const auto& s = data.samples[static_cast<std::size_t>(p)];
        const auto w = random_params(ctx.spec, splitmix64(seed + 2 * static_cast<std::uint64_t>(p)));
        const auto u = random_params(ctx.spec, splitmix64(seed + 2 * static_cast<std::uint64_t>(p) + 1));
        const Target3D pseudo = pseudo_label(ctx, u.values(), s.evidence);
        LossConfig cfg;
        cfg.x_mode = modes[p % 3];
        cfg.lambda_2d = 0.5 + 0.1 * (p % 5);
        cfg.lambda_3d = 1.5 - 0.1 * (p % 4);
        LossConfig only2d = cfg, only3d = cfg;
        only2d.lambda_3d = 0.0;
        only2d.lambda_2d = 1.0;
        only3d.lambda_2d = 0.0;
        only3d.lambda_3d = 1.0;
        const SampleObjective objectives[] = {
            {ctx, s.evidence, &s.truth, only2d, ObjectiveKind::train},
            {ctx, s.evidence, &s.truth, only3d, ObjectiveKind::train},
            {ctx, s.evidence, &s.truth, cfg, ObjectiveKind::train},
            {ctx, s.evidence, nullptr, cfg, ObjectiveKind::test},
            {ctx, s.evidence, &pseudo, cfg, ObjectiveKind::test_u},
        };
        for (int k = 0; k < 5; ++k) {
            const auto vg = evaluate_with_gradient(objectives[k], w);
            const auto fd = finite_difference_gradient(value_only(objectives[k]), w, opt.step);
            const double nf = noise_floor(opt, vg.value);
            GradCheckRow row;
            row.loss = kCheckedLosses[k];
            row.pair = p;
            row.x_mode = to_string(cfg.x_mode);
            row.coordinates = w.size();
            row.loss_value = vg.value;
            row.noise_floor = nf;
            row.max_rel_error = max_relative_error(vg.gradient, fd, nf);
            row.raw_rel_error = max_relative_error(vg.gradient, fd, opt.floor);
            for (std::size_t i = 0; i < fd.size(); ++i)
                if (std::max(std::abs(vg.gradient[i]), std::abs(fd[i])) < nf) ++row.noise_limited;
            rep.rows.push_back(std::move(row));
        }
    }
    return rep;
}

}  // namespace madapt
