// SPDX-License-Identifier: Apache-2.0
#include "madapt/gradcheck.hpp"
#include "madapt/losses.hpp"
#include "madapt/training.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <Eigen/Geometry>

#include <functional>

using namespace madapt;

namespace {

// Forward kinematics by recursion over parents with Eigen's AngleAxis,
// sharing nothing with the library implementation.
Joints3D oracle_fk(const Skeleton& sk, const BodyParams& b) {
    const int J = sk.joint_count();
    std::vector<Eigen::Matrix3d> R(J);
    std::vector<bool> done(J, false);
    Joints3D pos = Joints3D::Zero(J, 3);
    auto local = [&](int j) -> Eigen::Matrix3d {
        const Eigen::Vector3d v = b.theta.row(j).transpose();
        if (v.norm() == 0.0) return Eigen::Matrix3d::Identity();
        return Eigen::AngleAxisd(v.norm(), v.normalized()).toRotationMatrix();
    };
    std::function<void(int)> visit = [&](int j) {
        if (done[j]) return;
        const int p = sk.parent(j);
        if (p < 0) {
            R[j] = local(j);
        } else {
            visit(p);
            const double mult = 1.0 + sk.shape_basis().row(j).dot(b.beta);
            pos.row(j) = pos.row(p) + (R[p] * (mult * sk.rest_offsets().row(j).transpose())).transpose();
            R[j] = R[p] * local(j);
        }
        done[j] = true;
    };
    for (int j = 0; j < J; ++j) visit(j);
    return pos;
}

struct Instance {
    Prediction pred;
    BodyParams gt;
    Joints2D target;
    Eigen::VectorXd conf;
};

Instance random_instance(const Skeleton& sk, std::uint64_t seed) {
    Rng rng(seed);
    Instance in;
    in.pred.body = tu::random_body(sk, rng);
    in.pred.cam = CameraParams::make(rng.uniform(0.7, 1.3), {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)});
    in.gt = tu::random_body(sk, rng);
    in.target = project(forward_kinematics(sk, in.gt), CameraParams{});
    for (int j = 0; j < in.target.rows(); ++j) in.target.row(j) += Eigen::RowVector2d(0.02 * rng.normal(), 0.02 * rng.normal());
    in.conf = Eigen::VectorXd::Ones(sk.joint_count());
    for (int j = 0; j < sk.joint_count(); ++j)
        if (rng.uniform() < 0.2) in.conf[j] = 0.0;
    return in;
}

}  // namespace

// ---------------------------------------------------------------------------
// Scalar losses. Every loss is multiplied by kLossScale (1000); the expected
// values below carry that factor explicitly.
// ---------------------------------------------------------------------------

TEST(Loss2D, PerfectFitIsZero) {
    const auto sk = Skeleton::human16();
    Rng rng(1);
    Prediction p{tu::random_body(sk, rng), CameraParams::make(1.1, {0.05, -0.02})};
    const Joints2D target = project(forward_kinematics(sk, p.body), p.cam);
    EXPECT_EQ(loss_2d(sk, p, target, Eigen::VectorXd::Ones(16)), 0.0);
}

TEST(Loss2D, OneJointOffByATenth) {
    const auto sk = Skeleton::human16();
    Prediction p{BodyParams::zeros(16, 4), CameraParams{}};
    Joints2D target = project(forward_kinematics(sk, p.body), p.cam);
    target(5, 0) += 0.1;
    EXPECT_NEAR(loss_2d(sk, p, target, Eigen::VectorXd::Ones(16)), kLossScale * 0.01 / 16, 1e-12);
    EXPECT_NEAR(kLossScale * 0.01 / 16, 0.625, 1e-15);
}

TEST(Loss2D, ZeroConfidenceAnnihilates) {
    const auto sk = Skeleton::human16();
    const auto in = random_instance(sk, 2);
    EXPECT_EQ(loss_2d(sk, in.pred, in.target, Eigen::VectorXd::Zero(16)), 0.0);
}

TEST(Loss3D, IdentityIsZeroForEveryMode) {
    const auto sk = Skeleton::human16();
    const auto in = random_instance(sk, 3);
    for (auto m : {XMode::joints3d, XMode::params_identity, XMode::both}) {
        LossConfig c;
        c.x_mode = m;
        EXPECT_EQ(loss_3d(sk, in.gt, in.gt, c), 0.0) << to_string(m);
    }
}

TEST(Loss3D, ParamsIdentityArithmetic) {
    const auto sk = Skeleton::human16();
    LossConfig c;
    c.x_mode = XMode::params_identity;
    auto pred = BodyParams::zeros(16, 4);
    pred.theta(7, 1) = 0.3;
    EXPECT_NEAR(loss_3d(sk, pred, BodyParams::zeros(16, 4), c), kLossScale * 0.09 / (3 * 16 + 4), 1e-13);
}

TEST(Loss3D, JointsModeMatchesIndependentFk) {
    const auto sk = Skeleton::human16();
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto in = random_instance(sk, 100 + s);
        const Joints3D d = oracle_fk(sk, in.pred.body) - oracle_fk(sk, in.gt);
        const double expect = kLossScale * d.squaredNorm() / 16;
        EXPECT_NEAR(loss_3d(sk, in.pred.body, in.gt, LossConfig{}), expect, 1e-12 * expect);
    }
}

TEST(Loss3D, BothIsSumOfModes) {
    const auto sk = Skeleton::human16();
    const auto in = random_instance(sk, 4);
    LossConfig a, b, c;
    a.x_mode = XMode::joints3d;
    b.x_mode = XMode::params_identity;
    c.x_mode = XMode::both;
    EXPECT_NEAR(loss_3d(sk, in.pred.body, in.gt, c),
                loss_3d(sk, in.pred.body, in.gt, a) + loss_3d(sk, in.pred.body, in.gt, b), 1e-12);
}

TEST(LossTrain, PerfectPredictionIsZero) {
    const auto sk = Skeleton::human16();
    Rng rng(5);
    Prediction p{tu::random_body(sk, rng), CameraParams{}};
    const Joints2D target = project(forward_kinematics(sk, p.body), p.cam);
    EXPECT_EQ(loss_train(sk, p, p.body, target, Eigen::VectorXd::Ones(16), LossConfig{}), 0.0);
}

TEST(LossTrain, NoThreeDWeightEqualsTwoD) {
    const auto sk = Skeleton::human16();
    LossConfig c;
    c.lambda_3d = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto in = random_instance(sk, 200 + s);
        EXPECT_EQ(loss_train(sk, in.pred, in.gt, in.target, in.conf, c), loss_2d(sk, in.pred, in.target, in.conf));
    }
}

TEST(LossTrain, RecombinesComponents) {
    const auto sk = Skeleton::human16();
    LossConfig c;
    c.lambda_2d = 0.7;
    c.lambda_3d = 1.3;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto in = random_instance(sk, 300 + s);
        const double want = 0.7 * loss_2d(sk, in.pred, in.target, in.conf) + 1.3 * loss_3d(sk, in.pred.body, in.gt, c);
        EXPECT_NEAR(loss_train(sk, in.pred, in.gt, in.target, in.conf, c), want, 1e-12 * want);
    }
}

TEST(LossTest, IsBitIdenticalAliasOfTwoD) {
    const auto sk = Skeleton::human16();
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto in = random_instance(sk, 400 + s);
        EXPECT_EQ(loss_test(sk, in.pred, in.target, in.conf), loss_2d(sk, in.pred, in.target, in.conf));
    }
}

TEST(LossTestU, TrueGroundTruthEqualsTrain) {
    const auto sk = Skeleton::human16();
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto in = random_instance(sk, 500 + s);
        LossConfig c;
        c.x_mode = static_cast<XMode>(s % 3);
        EXPECT_EQ(loss_test_u(sk, in.pred, in.gt, in.target, in.conf, c),
                  loss_train(sk, in.pred, in.gt, in.target, in.conf, c));
    }
}

TEST(LossTestU, NoThreeDWeightCollapsesToTest) {
    const auto sk = Skeleton::human16();
    LossConfig c;
    c.lambda_3d = 0.0;
    const auto in = random_instance(sk, 6);
    EXPECT_EQ(loss_test_u(sk, in.pred, in.gt, in.target, in.conf, c), loss_test(sk, in.pred, in.target, in.conf));
}

TEST(LossTestU, PositiveWhenBothTermsMismatch) {
    const auto sk = Skeleton::human16();
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto in = random_instance(sk, 600 + s);
        EXPECT_GT(loss_test_u(sk, in.pred, in.gt, in.target, in.conf, LossConfig{}), 0.0);
    }
}

TEST(Losses, NonNegativeOnRandomInputs) {
    const auto sk = Skeleton::human16();
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto in = random_instance(sk, 700 + s);
        LossConfig c;
        c.x_mode = static_cast<XMode>(s % 3);
        EXPECT_GE(loss_2d(sk, in.pred, in.target, in.conf), 0.0);
        EXPECT_GE(loss_3d(sk, in.pred.body, in.gt, c), 0.0);
        EXPECT_GE(loss_train(sk, in.pred, in.gt, in.target, in.conf, c), 0.0);
    }
}

// ---------------------------------------------------------------------------
// Objectives over network weights
// ---------------------------------------------------------------------------

class ObjectiveTest : public ::testing::Test {
protected:
    ModelContext ctx = tu::small_context();
    Dataset ds = make_dataset(ctx.skeleton, domain_preset("default"), 1, 10, 31);
};

TEST_F(ObjectiveTest, TestUIsStructurallyTrain) {
    // Same functional form: with any label, test_u and train agree exactly in
    // value and gradient.
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& s = ds.samples[i];
        const auto w = random_params(ctx.spec, 40 + i);
        const Target3D label = pseudo_label(ctx, random_params(ctx.spec, 90 + i).values(), s.evidence);
        LossConfig c;
        c.x_mode = static_cast<XMode>(i % 3);
        for (const Target3D* t : {&s.truth, &label}) {
            const SampleObjective train(ctx, s.evidence, t, c, ObjectiveKind::train);
            const SampleObjective tu_obj(ctx, s.evidence, t, c, ObjectiveKind::test_u);
            const auto a = evaluate_with_gradient(train, w), b = evaluate_with_gradient(tu_obj, w);
            EXPECT_EQ(a.value, b.value);
            EXPECT_LE(max_relative_error(a.gradient, b.gradient, 1e-300), 1e-15);
        }
    }
}

TEST_F(ObjectiveTest, TestLossIgnoresThreeDTarget) {
    const auto& s = ds.samples[0];
    const auto w = random_params(ctx.spec, 3);
    const SampleObjective a(ctx, s.evidence, nullptr, LossConfig{}, ObjectiveKind::test);
    const SampleObjective b(ctx, s.evidence, &ds.samples[1].truth, LossConfig{}, ObjectiveKind::test);
    const auto ga = evaluate_with_gradient(a, w), gb = evaluate_with_gradient(b, w);
    EXPECT_EQ(ga.value, gb.value);
    EXPECT_TRUE(ga.gradient == gb.gradient);
    // Matches the scalar alias on the decoded prediction.
    const auto pred = regress(ctx, w.values(), s.evidence.observation);
    EXPECT_EQ(ga.value, loss_test(ctx.skeleton, pred, s.evidence.target_j2d, s.evidence.conf));
}

TEST_F(ObjectiveTest, TrainNeedsATarget) {
    EXPECT_THROW(SampleObjective(ctx, ds.samples[0].evidence, nullptr, LossConfig{}, ObjectiveKind::train),
                 std::invalid_argument);
    EXPECT_THROW(SampleObjective(ctx, ds.samples[0].evidence, nullptr, LossConfig{}, ObjectiveKind::test_u),
                 std::invalid_argument);
}

TEST_F(ObjectiveTest, GradientsMatchFiniteDifferencesWithoutConfidence) {
    GradCheckOptions opt;
    LossConfig c;
    c.confidence_weighting = false;
    c.x_mode = XMode::both;
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& s = ds.samples[i];
        const auto w = random_params(ctx.spec, 70 + i);
        for (auto kind : {ObjectiveKind::train, ObjectiveKind::test, ObjectiveKind::test_u}) {
            const SampleObjective obj(ctx, s.evidence, &s.truth, c, kind);
            const auto vg = evaluate_with_gradient(obj, w);
            const auto fd = finite_difference_gradient(value_only(obj), w, opt.step);
            EXPECT_LT(max_relative_error(vg.gradient, fd, noise_floor(opt, vg.value)), 1e-4);
        }
    }
}
