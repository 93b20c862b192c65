// SPDX-License-Identifier: Apache-2.0
//
// losses.hpp - reprojection and 3D objectives, and the per-sample objective
// that differentiates them through the regressor.
//
// All terms are scaled per-joint means (K = kLossScale):
//   L_2D = K sum_j c_j |proj_j - target_j|^2 / J
//   L_3D = K sum_j |X(pred)_j - X(gt)_j|^2 / J             (joints3d)
//        = K |(theta, beta) - (theta', beta')|^2 / (3J + S)  (params_identity)
// K fixes the units of every step size. Coordinates are normalised to about
// [-1, 1]; K = 1000 makes alpha = 1e-5 a stable, effective test-time rate for
// the shipped regressor.
//   L_train = lambda_2d L_2D + lambda_3d L_3D
//   L_test  = L_2D
//   L_test-u = L_train with the pseudo label in place of ground truth
#pragma once

#include "madapt/body_model.hpp"
#include "madapt/diffcore.hpp"
#include "madapt/regressor.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <span>
#include <stdexcept>
#include <string>

namespace madapt {

inline constexpr double kLossScale = 1000.0;

enum class XMode { joints3d, params_identity, both };

inline std::string to_string(XMode m) {
    switch (m) {
        case XMode::joints3d: return "joints3d";
        case XMode::params_identity: return "params_identity";
        case XMode::both: return "both";
    }
    return "?";
}

inline XMode xmode_from_string(const std::string& s) {
    if (s == "joints3d") return XMode::joints3d;
    if (s == "params_identity") return XMode::params_identity;
    if (s == "both") return XMode::both;
    throw std::invalid_argument("unknown x_mode '" + s + "'");
}

struct LossConfig {
    double lambda_2d = 1.0;
    double lambda_3d = 1.0;
    XMode x_mode = XMode::joints3d;
    bool confidence_weighting = true;

    void validate() const {
        if (!(lambda_2d >= 0.0) || !(lambda_3d >= 0.0))
            throw std::invalid_argument("LossConfig: weights must be >= 0");
        if (!(lambda_2d > 0.0 || lambda_3d > 0.0))
            throw std::invalid_argument("LossConfig: at least one weight must be > 0");
    }
};

inline void to_json(nlohmann::json& j, const LossConfig& c) {
    j = {{"lambda_2d", c.lambda_2d},
         {"lambda_3d", c.lambda_3d},
         {"x_mode", to_string(c.x_mode)},
         {"confidence_weighting", c.confidence_weighting}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
    c.lambda_2d = j.value("lambda_2d", c.lambda_2d);
    c.lambda_3d = j.value("lambda_3d", c.lambda_3d);
    if (j.contains("x_mode")) c.x_mode = xmode_from_string(j.at("x_mode").get<std::string>());
    c.confidence_weighting = j.value("confidence_weighting", c.confidence_weighting);
}

/// What the network may see at test time: its input and the 2D supervision.
struct Evidence {
    Eigen::VectorXd observation;
    Joints2D target_j2d;
    Eigen::VectorXd conf;
};

/// 3D supervision: body parameters plus their FK joints (X in both modes).
struct Target3D {
    BodyParams body;
    Joints3D joints;

    static Target3D from_body(const Skeleton& sk, BodyParams body) {
        auto j = forward_kinematics(sk, body);
        return {std::move(body), std::move(j)};
    }
};

struct LossTerms {
    double total = 0.0;
    double l2d = 0.0;
    double l3d = 0.0;
};

enum class ObjectiveKind { train, test, test_u };

namespace detail {

inline Eigen::VectorXd joint_weights(const Eigen::VectorXd& conf, bool use_conf) {
    return use_conf ? conf : Eigen::VectorXd::Ones(conf.size());
}

// Core evaluation shared by the scalar losses and the differentiable
// objective. `target` may be null only when lambda_3d is unused.
inline LossTerms prediction_loss(const Skeleton& sk, const Prediction& pred,
                                 const Joints2D& target_j2d, const Eigen::VectorXd& weights,
                                 const Target3D* target, double lambda_2d, double lambda_3d,
                                 XMode x_mode, PredictionGradient* grad) {
    const int J = sk.joint_count();
    if (target_j2d.rows() != J || weights.size() != J)
        throw DimensionError("2D targets do not match skeleton joint count");
    const bool need_fk = lambda_2d > 0.0 || (lambda_3d > 0.0 && x_mode != XMode::params_identity);
    LossTerms out;
    FkTape tape;
    Joints3D d_joints;
    if (need_fk) {
        tape = forward_kinematics_tape(sk, pred.body, grad != nullptr);
        d_joints.setZero(J, 3);
    } else {
        check_dims(sk, pred.body);
    }

    if (lambda_2d > 0.0) {
        const Joints2D proj = project(tape.joints, pred.cam);
        const Joints2D r = proj - target_j2d;
        const Eigen::VectorXd sq = r.rowwise().squaredNorm();
        out.l2d = kLossScale * weights.dot(sq) / J;
        if (grad) {
            const Joints2D d_proj = (r.array().colwise() * weights.array()).matrix() *
                                    (2.0 * kLossScale * lambda_2d / J);
            project_backward(tape.joints, pred.cam, d_proj, d_joints, grad->cam);
        }
    }

    if (lambda_3d > 0.0) {
        if (!target) throw std::invalid_argument("3D loss requested without a 3D target");
        check_dims(sk, target->body);
        if (x_mode != XMode::params_identity) {
            const Joints3D d = tape.joints - target->joints;
            out.l3d += kLossScale * d.squaredNorm() / J;
            if (grad) d_joints += d * (2.0 * kLossScale * lambda_3d / J);
        }
        if (x_mode != XMode::joints3d) {
            const double n = (3.0 * J + sk.shape_dim()) / kLossScale;
            const AxisAngles dt = pred.body.theta - target->body.theta;
            const Eigen::VectorXd db = pred.body.beta - target->body.beta;
            out.l3d += (dt.squaredNorm() + db.squaredNorm()) / n;
            if (grad) {
                grad->theta += dt * (2.0 * lambda_3d / n);
                grad->beta += db * (2.0 * lambda_3d / n);
            }
        }
    }

    if (grad && need_fk) forward_kinematics_backward(sk, tape, d_joints, grad->theta, grad->beta);
    out.total = lambda_2d * out.l2d + lambda_3d * out.l3d;
    check_finite("loss", out.total);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scalar losses on decoded predictions
// ---------------------------------------------------------------------------

inline double loss_2d(const Skeleton& sk, const Prediction& pred, const Joints2D& target_j2d,
                      const Eigen::VectorXd& conf) {
    return detail::prediction_loss(sk, pred, target_j2d, conf, nullptr, 1.0, 0.0,
                                   XMode::joints3d, nullptr)
        .l2d;
}

inline double loss_3d(const Skeleton& sk, const BodyParams& pred, const BodyParams& gt,
                      const LossConfig& cfg) {
    const auto target = Target3D::from_body(sk, gt);
    Prediction p{pred, CameraParams{}};
    const Joints2D dummy = Joints2D::Zero(sk.joint_count(), 2);
    return detail::prediction_loss(sk, p, dummy, Eigen::VectorXd::Zero(sk.joint_count()), &target,
                                   0.0, 1.0, cfg.x_mode, nullptr)
        .l3d;
}

inline LossTerms loss_train_terms(const Skeleton& sk, const Prediction& pred, const Target3D& gt,
                                  const Joints2D& target_j2d, const Eigen::VectorXd& conf,
                                  const LossConfig& cfg) {
    return detail::prediction_loss(sk, pred, target_j2d,
                                   detail::joint_weights(conf, cfg.confidence_weighting), &gt,
                                   cfg.lambda_2d, cfg.lambda_3d, cfg.x_mode, nullptr);
}

inline double loss_train(const Skeleton& sk, const Prediction& pred, const BodyParams& gt_body,
                         const Joints2D& target_j2d, const Eigen::VectorXd& conf,
                         const LossConfig& cfg) {
    return loss_train_terms(sk, pred, Target3D::from_body(sk, gt_body), target_j2d, conf, cfg)
        .total;
}

inline double loss_test(const Skeleton& sk, const Prediction& pred, const Joints2D& target_j2d,
                        const Eigen::VectorXd& conf) {
    return loss_2d(sk, pred, target_j2d, conf);
}

/// Same functional form as loss_train; the pseudo label stands in for GT.
inline double loss_test_u(const Skeleton& sk, const Prediction& pred, const BodyParams& pseudo_gt,
                          const Joints2D& target_j2d, const Eigen::VectorXd& conf,
                          const LossConfig& cfg) {
    return loss_train(sk, pred, pseudo_gt, target_j2d, conf, cfg);
}

// ---------------------------------------------------------------------------
// Differentiable per-sample objective over regressor weights
// ---------------------------------------------------------------------------

/// Immutable bundle of what every objective needs about the model.
struct ModelContext {
    Skeleton skeleton;
    RegressorSpec spec;
    LayoutPtr layout;

    ModelContext(Skeleton sk, RegressorSpec sp)
        : skeleton(std::move(sk)), spec(std::move(sp)), layout(spec.layout()) {
        if (spec.joints != skeleton.joint_count() || spec.shape_dim != skeleton.shape_dim())
            throw DimensionError("regressor spec does not match skeleton");
    }
};

inline Prediction regress(const ModelContext& ctx, std::span<const double> w,
                          const Eigen::VectorXd& observation) {
    return decode_output(ctx.spec,
                         regress_tape(ctx.spec, *ctx.layout, w, observation).raw_output);
}

/// One sample's loss as a function of the network weights.
/// train / test_u use `target` (GT or pseudo label); test ignores it.
class SampleObjective {
public:
    SampleObjective(const ModelContext& ctx, const Evidence& ev, const Target3D* target,
                    const LossConfig& cfg, ObjectiveKind kind)
        : ctx_(ctx), ev_(ev), target_(target), cfg_(cfg), kind_(kind) {
        if (kind_ != ObjectiveKind::test && !target_)
            throw std::invalid_argument("SampleObjective: train/test_u need a 3D target");
    }

    double operator()(std::span<const double> w, std::span<double> grad) const {
        return evaluate(w, grad).total;
    }

    LossTerms evaluate(std::span<const double> w, std::span<double> grad) const {
        const auto tape = regress_tape(ctx_.spec, *ctx_.layout, w, ev_.observation);
        const auto pred = decode_output(ctx_.spec, tape.raw_output);
        auto g = PredictionGradient::zeros(ctx_.spec.joints, ctx_.spec.shape_dim);
        const bool want_grad = !grad.empty();
        LossTerms terms;
        if (kind_ == ObjectiveKind::test) {
            terms = detail::prediction_loss(ctx_.skeleton, pred, ev_.target_j2d, ev_.conf, nullptr,
                                            1.0, 0.0, cfg_.x_mode, want_grad ? &g : nullptr);
        } else {
            terms = detail::prediction_loss(
                ctx_.skeleton, pred, ev_.target_j2d,
                detail::joint_weights(ev_.conf, cfg_.confidence_weighting), target_,
                cfg_.lambda_2d, cfg_.lambda_3d, cfg_.x_mode, want_grad ? &g : nullptr);
        }
        if (want_grad)
            regress_backward(ctx_.spec, *ctx_.layout, w, tape,
                             encode_gradient(ctx_.spec, tape.raw_output, g), grad);
        return terms;
    }

    double value(std::span<const double> w) const { return evaluate(w, {}).total; }

private:
    const ModelContext& ctx_;
    const Evidence& ev_;
    const Target3D* target_;
    LossConfig cfg_;
    ObjectiveKind kind_;
};

}  // namespace madapt
