// SPDX-License-Identifier: Apache-2.0
#include "madapt/regressor.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace madapt;

namespace {

Eigen::VectorXd random_observation(const RegressorSpec& spec, std::uint64_t seed) {
    const auto v = tu::random_vector(static_cast<std::size_t>(spec.input_dim()), seed);
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

RegressorSpec small_spec() { return RegressorSpec::for_skeleton(Skeleton::human16(), {8, 8}); }

}  // namespace

TEST(InitParams, SameSeedIsBitIdentical) {
    const auto spec = small_spec();
    EXPECT_TRUE(init_params(spec, 42) == init_params(spec, 42));
    EXPECT_FALSE(init_params(spec, 42) == init_params(spec, 43));
}

TEST(InitParams, BiasesAreZero) {
    const auto spec = RegressorSpec::for_skeleton(Skeleton::human16());
    const auto p = init_params(spec, 1);
    const auto& L = p.layout();
    for (std::size_t i = 1; i < L.layer_count(); i += 2)
        for (std::size_t k = 0; k < L.layer(i).size(); ++k) EXPECT_EQ(p[L.offset(i) + k], 0.0);
}

TEST(InitParams, WeightsFollowScaledUniform) {
    // Plain spec without gains so every layer is exactly U(-b, b).
    RegressorSpec spec;
    spec.hidden = {128, 128};
    const auto p = init_params(spec, 7);
    const auto& L = p.layout();
    for (std::size_t i = 0; i < L.layer_count(); i += 2) {
        const auto& s = L.layer(i);
        const double bound = std::sqrt(6.0 / static_cast<double>(s.rows + s.cols));
        const std::size_t n = std::min<std::size_t>(s.size(), 10000);
        double sum = 0, sq = 0, mx = 0;
        for (std::size_t k = 0; k < n; ++k) {
            const double x = p[L.offset(i) + k];
            sum += x;
            sq += x * x;
            mx = std::max(mx, std::abs(x));
        }
        const double sigma = bound / std::sqrt(3.0);
        EXPECT_LT(std::abs(sum / n), 3 * sigma / std::sqrt(static_cast<double>(n))) << s.name;
        EXPECT_NEAR(std::sqrt(sq / n), sigma, 0.05 * sigma) << s.name;
        EXPECT_LE(mx, bound);
    }
}

TEST(InitParams, LastLayerIsDividedByGain) {
    auto spec = small_spec();
    RegressorSpec plain = spec;
    plain.output_gain.clear();
    const auto a = init_params(spec, 3), b = init_params(plain, 3);
    const auto& L = a.layout();
    const std::size_t last = L.layer_count() - 2;
    const auto rows = L.layer(last).rows;
    for (std::size_t k = 0; k < L.layer(last).size(); ++k)
        EXPECT_DOUBLE_EQ(a[L.offset(last) + k] * spec.gain(static_cast<int>(k % rows)),
                         b[L.offset(last) + k]);
    // So the initial prediction is the same with or without gains.
    const auto obs = random_observation(spec, 4);
    const auto pa = regress(spec, a, obs), pb = regress(plain, b, obs);
    EXPECT_LT((pa.body.theta - pb.body.theta).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Regress, ZeroNetworkGivesKnownCamera) {
    const auto spec = small_spec();
    const auto p = ParamVector::zeros(spec.layout());
    const auto pred = regress(spec, p, random_observation(spec, 1));
    EXPECT_TRUE(pred.body.theta.isZero(0.0));
    EXPECT_TRUE(pred.body.beta.isZero(0.0));
    EXPECT_DOUBLE_EQ(pred.cam.scale, std::log(2.0) + 0.5);
    EXPECT_TRUE(pred.cam.trans.isZero(0.0));
}

TEST(Regress, OutputShapesIndependentOfInput) {
    const auto spec = small_spec();
    const auto p = init_params(spec, 5);
    for (std::uint64_t s = 0; s < 5; ++s) {
        Eigen::VectorXd obs = random_observation(spec, s) * (s == 4 ? 1e3 : 1.0);
        const auto pred = regress(spec, p, obs);
        EXPECT_EQ(pred.body.theta.rows(), 16);
        EXPECT_EQ(pred.body.theta.cols(), 3);
        EXPECT_EQ(pred.body.beta.size(), 4);
        EXPECT_GT(pred.cam.scale, 0.5);
    }
    EXPECT_EQ(spec.output_dim(), 3 * 16 + 4 + 3);
    EXPECT_EQ(spec.input_dim(), 3 * 16);
}

TEST(Regress, DimensionMismatchThrows) {
    const auto spec = small_spec();
    const auto p = init_params(spec, 5);
    EXPECT_THROW(regress(spec, p, Eigen::VectorXd::Zero(10)), DimensionError);
    const auto other = init_params(RegressorSpec::for_skeleton(Skeleton::human16(), {9, 8}), 5);
    EXPECT_THROW(regress(spec, other, random_observation(spec, 1)), DimensionError);
}

TEST(Regress, CameraScaleStaysPositiveUnderExtremeWeights) {
    const auto spec = small_spec();
    auto v = init_params(spec, 6).to_vector();
    for (auto& x : v) x *= -1e3;
    const ParamVector p(spec.layout(), v);
    for (std::uint64_t s = 0; s < 20; ++s) EXPECT_GE(regress(spec, p, random_observation(spec, s)).cam.scale, 0.5);
}

TEST(Regress, SquaredOutputGradientMatchesFiniteDifferences) {
    const auto spec = small_spec();
    const auto layout = spec.layout();
    for (std::uint64_t trial = 0; trial < 5; ++trial) {
        const auto obs = random_observation(spec, 100 + trial);
        auto w = init_params(spec, trial).to_vector();
        Rng rng(trial);
        for (auto& x : w) x += 0.1 * rng.normal();
        const ParamVector p(layout, w);
        auto sq = [&](const Prediction& pr) {
            return pr.body.theta.squaredNorm() + pr.body.beta.squaredNorm() + pr.cam.scale * pr.cam.scale +
                   pr.cam.trans.squaredNorm();
        };
        auto value = [&](std::span<const double> ww) {
            return sq(decode_output(spec, regress_tape(spec, *layout, ww, obs).raw_output));
        };
        const auto tape = regress_tape(spec, *layout, p.values(), obs);
        const auto pred = decode_output(spec, tape.raw_output);
        auto g = PredictionGradient::zeros(spec.joints, spec.shape_dim);
        g.theta = 2 * pred.body.theta;
        g.beta = 2 * pred.body.beta;
        g.cam.scale = 2 * pred.cam.scale;
        g.cam.trans = 2 * pred.cam.trans;
        std::vector<double> grad(p.size(), 0.0);
        regress_backward(spec, *layout, p.values(), tape, encode_gradient(spec, tape.raw_output, g), grad);
        const auto fd = finite_difference_gradient(value, p, 1e-6);
        EXPECT_LT(max_relative_error(GradientVector(layout, grad), fd, 1e-6), 1e-4) << trial;
    }
}

TEST(Regress, LocallyLipschitzSanity) {
    const auto spec = small_spec();
    const auto p = init_params(spec, 8);
    const auto obs = random_observation(spec, 9);
    const auto base = regress(spec, p, obs);
    double prev_ratio = -1;
    for (double eps : {1e-3, 1e-5, 1e-7}) {
        auto v = p.to_vector();
        const auto dir = tu::random_vector(v.size(), 10);
        double n = 0;
        for (double d : dir) n += d * d;
        n = std::sqrt(n);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += eps * dir[i] / n;
        const auto moved = regress(spec, ParamVector(spec.layout(), v), obs);
        const double change = (moved.body.theta - base.body.theta).norm();
        const double ratio = change / eps;
        EXPECT_LT(ratio, 1e3);
        if (prev_ratio > 0) {
            EXPECT_NEAR(ratio, prev_ratio, 0.1 * prev_ratio + 1e-6);
        }
        prev_ratio = ratio;
    }
}

TEST(HeadGains, ClampedAndFinite) {
    const auto g = head_gains(Skeleton::human16());
    ASSERT_EQ(g.size(), 3u * 16 + 4 + 3);
    for (double x : g) {
        EXPECT_GE(x, kGainMin);
        EXPECT_LE(x, kGainMax);
    }
    // Leaf joints (wrists, ankles, head) have no bone below them, so their
    // rotations do not move any joint and keep gain 1.
    for (int leaf : {3, 6, 9, 12, 15}) {
        for (int k = 0; k < 3; ++k) EXPECT_EQ(g[3 * leaf + k], 1.0) << leaf;
    }
}

TEST(Checkpoint, RoundTripIsExact) {
    const auto spec = small_spec();
    const auto p = init_params(spec, 77);
    const auto dir = tu::scratch_dir("ckpt");
    save_checkpoint(dir / "m.bin", spec, p, 77);
    const auto c = load_checkpoint(dir / "m.bin");
    EXPECT_TRUE(c.spec == spec);
    EXPECT_TRUE(c.params == p);
    EXPECT_EQ(c.seed, 77u);
    EXPECT_EQ(encode_checkpoint(c.spec, c.params), encode_checkpoint(spec, p));
}

TEST(Checkpoint, CorruptionIsReportedWithPosition) {
    const auto spec = small_spec();
    const auto bytes = encode_checkpoint(spec, init_params(spec, 1));
    EXPECT_THROW(decode_checkpoint("XXXX" + bytes.substr(4), spec), CorruptFileError);

    auto versioned = bytes;
    versioned[4] = 9;
    EXPECT_THROW(decode_checkpoint(versioned, spec), VersionError);

    try {
        decode_checkpoint(bytes.substr(0, bytes.size() - 3), spec);
        FAIL() << "truncated checkpoint accepted";
    } catch (const CorruptFileError& e) {
        EXPECT_GT(e.position(), 0u);
        EXPECT_LE(e.position(), bytes.size());
    }
    EXPECT_THROW(decode_checkpoint(bytes + "x", spec), CorruptFileError);

    auto other = spec;
    other.hidden = {8, 9};
    EXPECT_THROW(decode_checkpoint(bytes, other), CorruptFileError);
}

TEST(Checkpoint, MissingFileIsIoError) {
    EXPECT_THROW(load_checkpoint(tu::scratch_dir("ckpt_missing") / "nope.bin"), IoError);
}
