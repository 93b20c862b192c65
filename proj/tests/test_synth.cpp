// SPDX-License-Identifier: Apache-2.0
#include "madapt/manifest.hpp"
#include "madapt/metrics.hpp"
#include "madapt/synth.hpp"
#include "madapt/training.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <fstream>
#include <numbers>

using namespace madapt;

namespace {

const std::filesystem::path kData = MADAPT_TEST_DATA;

DomainConfig quiet_domain() {
    auto d = domain_preset("default");
    d.detector_noise_sigma = 0.0;
    d.occlusion_prob = 0.0;
    return d;
}

}  // namespace

TEST(DomainConfig, PresetsAndValidation) {
    EXPECT_EQ(domain_preset("default").pose_scale, 0.4);
    EXPECT_EQ(domain_preset("indoor-like").pose_scale, 0.3);
    EXPECT_EQ(domain_preset("in-the-wild-like").pose_scale, 0.6);
    EXPECT_THROW(domain_preset("outdoor"), ConfigError);
    auto d = domain_preset("default");
    d.occlusion_prob = 1.5;
    EXPECT_THROW(d.validate(), ConfigError);
    d = domain_preset("default");
    d.beta_range = {1.0, -1.0};
    EXPECT_THROW(d.validate(), ConfigError);
    d = domain_preset("default");
    d.detector_noise_sigma = -0.1;
    EXPECT_THROW(d.validate(), ConfigError);
}

TEST(DomainConfig, JsonOverridesAndUnknownKeys) {
    const auto d = nlohmann::json::parse(R"({"preset":"indoor-like","detector_noise_sigma":0.01})").get<DomainConfig>();
    EXPECT_EQ(d.pose_scale, 0.3);
    EXPECT_EQ(d.detector_noise_sigma, 0.01);
    try {
        (void)nlohmann::json::parse(R"({"pose_scael":0.3})").get<DomainConfig>();
        FAIL() << "typo accepted";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.field()).find("pose_scael"), std::string::npos);
    }
}

TEST(SampleBody, ZeroPoseScaleIsRestPose) {
    const auto sk = Skeleton::human16();
    auto d = domain_preset("default");
    d.pose_scale = 0.0;
    Rng rng(1);
    for (int i = 0; i < 20; ++i) EXPECT_TRUE(sample_body(sk, d, rng).first.theta.isZero(0.0));
}

TEST(SampleBody, SameSeedSameBody) {
    const auto sk = Skeleton::human16();
    Rng a(5), b(5);
    const auto x = sample_body(sk, domain_preset("default"), a);
    const auto y = sample_body(sk, domain_preset("default"), b);
    EXPECT_TRUE(x.first == y.first);
    EXPECT_TRUE(x.second == y.second);
}

TEST(SampleBody, AngleMagnitudeIsHalfNormal) {
    const auto sk = Skeleton::human16();
    for (double scale : {0.3, 0.4, 0.6}) {
        auto d = domain_preset("default");
        d.pose_scale = scale;
        Rng rng(7);
        double sum = 0;
        int n = 0;
        while (n < 10000) {
            const auto body = sample_body(sk, d, rng).first;
            for (int j = 0; j < 16 && n < 10000; ++j, ++n) sum += body.theta.row(j).norm();
        }
        const double expect = scale * std::sqrt(2.0 / std::numbers::pi);
        EXPECT_NEAR(sum / n, expect, 0.05 * expect) << scale;
    }
}

TEST(SampleBody, RangesRespected) {
    const auto sk = Skeleton::human16();
    const auto d = domain_preset("in-the-wild-like");
    Rng rng(8);
    for (int i = 0; i < 500; ++i) {
        const auto [b, c] = sample_body(sk, d, rng);
        for (int j = 0; j < 16; ++j) EXPECT_LE(b.theta.row(j).norm(), std::numbers::pi);
        EXPECT_LE(b.beta.cwiseAbs().maxCoeff(), 2.0);
        EXPECT_GE(c.scale, 0.8);
        EXPECT_LE(c.scale, 1.2);
        EXPECT_LE(c.trans.cwiseAbs().maxCoeff(), 0.2);
    }
}

TEST(SimulateDetector, NoiselessIsExact) {
    Rng rng(9), jr(10);
    const Joints2D clean = tu::random_joints(16, jr).leftCols<2>();
    const auto det = simulate_detector(clean, quiet_domain(), rng);
    EXPECT_TRUE(det.noisy == clean);
    EXPECT_TRUE(det.conf == Eigen::VectorXd::Ones(16));
}

TEST(SimulateDetector, FullOcclusion) {
    auto d = domain_preset("default");
    d.occlusion_prob = 1.0;
    Rng rng(11), jr(12);
    const auto det = simulate_detector(tu::random_joints(16, jr).leftCols<2>(), d, rng);
    EXPECT_TRUE(det.conf.isZero(0.0));
    EXPECT_TRUE(det.noisy.isZero(0.0));
}

TEST(SimulateDetector, NoiseStdMatchesSigma) {
    for (double sigma : {0.01, 0.02}) {
        auto d = quiet_domain();
        d.detector_noise_sigma = sigma;
        Rng rng(13);
        const Joints2D clean = Joints2D::Zero(16, 2);
        double sq = 0;
        int n = 0;
        while (n < 10000) {
            const auto det = simulate_detector(clean, d, rng);
            for (int j = 0; j < 16; ++j)
                for (int c = 0; c < 2; ++c, ++n) sq += det.noisy(j, c) * det.noisy(j, c);
        }
        EXPECT_NEAR(std::sqrt(sq / n), sigma, 0.03 * sigma);
    }
}

TEST(SimulateDetector, OcclusionRate) {
    auto d = domain_preset("default");
    Rng rng(14);
    int occluded = 0, n = 0;
    for (int i = 0; i < 2000; ++i) {
        const auto det = simulate_detector(Joints2D::Zero(16, 2), d, rng);
        occluded += static_cast<int>((det.conf.array() == 0.0).count());
        n += 16;
    }
    // 32000 Bernoulli(0.05) draws: std of the rate is about 0.0012.
    EXPECT_NEAR(static_cast<double>(occluded) / n, 0.05, 0.005);
}

TEST(MakeDataset, CountsAndConstructionInvariants) {
    const auto sk = Skeleton::human16();
    const auto ds = make_dataset(sk, domain_preset("default"), 2, 3, 4);
    EXPECT_EQ(ds.size(), 6u);
    EXPECT_EQ(ds.batches, 2);
    EXPECT_EQ(ds.batch_size, 3);
    for (const auto& s : ds.samples) {
        EXPECT_TRUE(s.truth.joints == forward_kinematics(sk, s.truth.body));
        EXPECT_TRUE(s.gt_j2d_clean == project(s.truth.joints, s.gt_cam));
        EXPECT_TRUE(s.evidence.observation == make_observation(s.evidence.target_j2d, s.evidence.conf));
    }
    EXPECT_THROW(make_dataset(sk, domain_preset("default"), 0, 3, 4), std::invalid_argument);
}

TEST(MakeDataset, ReproducibleBytes) {
    const auto sk = Skeleton::human16();
    const auto a = encode_dataset(make_dataset(sk, domain_preset("indoor-like"), 3, 4, 99));
    const auto b = encode_dataset(make_dataset(sk, domain_preset("indoor-like"), 3, 4, 99));
    EXPECT_EQ(a, b);
    EXPECT_NE(a, encode_dataset(make_dataset(sk, domain_preset("indoor-like"), 3, 4, 100)));
}

TEST(DatasetFile, RoundTripIsLossless) {
    const auto sk = Skeleton::human16();
    const auto ds = make_dataset(sk, domain_preset("in-the-wild-like"), 2, 5, 21);
    const auto path = tu::scratch_dir("ds") / "d.mads";
    serialize_dataset(ds, path);
    const auto back = load_dataset(path);
    EXPECT_TRUE(back == ds);
    EXPECT_EQ(encode_dataset(back), read_file(path));
}

TEST(DatasetFile, TruncationAndCorruptionAreExplicit) {
    const auto sk = Skeleton::human16();
    const auto bytes = encode_dataset(make_dataset(sk, domain_preset("default"), 1, 3, 22));
    for (std::size_t cut : {std::size_t{2}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
        try {
            decode_dataset(std::string_view(bytes).substr(0, cut));
            FAIL() << "truncated at " << cut << " accepted";
        } catch (const CorruptFileError& e) {
            EXPECT_LE(e.position(), cut);
        }
    }
    auto flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    EXPECT_THROW(decode_dataset(flipped), CorruptFileError);
    EXPECT_THROW(decode_dataset("XXXX" + bytes.substr(4)), CorruptFileError);
    auto versioned = bytes;
    versioned[4] = 2;
    EXPECT_THROW(decode_dataset(versioned), VersionError);
    EXPECT_THROW(load_dataset(tu::scratch_dir("ds_missing") / "none.mads"), IoError);
}

TEST(DatasetFile, GoldenFileIsStable) {
    // Generated once with: madapt gen-data --domain default --b 2 --m 3 --seed 1234
    const auto golden = read_file(kData / "golden_default_b2m3_s1234.mads");
    std::ifstream f(kData / "golden_default_b2m3_s1234.sha1");
    std::string hash;
    f >> hash;
    EXPECT_EQ(git_blob_hash(golden), hash);
    const auto fresh = encode_dataset(make_dataset(Skeleton::human16(), domain_preset("default"), 2, 3, 1234));
    EXPECT_EQ(git_blob_hash(fresh), hash);
    EXPECT_TRUE(fresh == golden);
}

TEST(TrainingView, CleanTwoDJointsNeverReachTraining) {
    // Zeroing the diagnostic clean 2D joints must not change any training output.
    const auto ctx = tu::small_context();
    auto ds = make_dataset(ctx.skeleton, domain_preset("default"), 2, 4, 23);
    auto blanked = ds;
    for (auto& s : blanked.samples) s.gt_j2d_clean.setZero();
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.beta_lr = 1e-3;
    cfg.alpha = 1e-3;
    for (int mode = 0; mode < 3; ++mode) {
        TrainResult a, b;
        if (mode == 0) {
            a = pretrain(ctx, ds, cfg);
            b = pretrain(ctx, blanked, cfg);
        } else {
            a = meta_train(ctx, ds, cfg, mode == 2);
            b = meta_train(ctx, blanked, cfg, mode == 2);
        }
        EXPECT_TRUE(a.main == b.main) << mode;
        EXPECT_EQ(a.history.to_csv(), b.history.to_csv());
    }
}

TEST(DomainShift, PoseScaleChangesErrorOfAFixedModel) {
    const auto ctx = tu::small_context({32, 32});
    const auto train = make_dataset(ctx.skeleton, domain_preset("indoor-like"), 10, 20, 24);
    TrainConfig cfg;
    cfg.epochs = 10;
    cfg.beta_lr = 3e-3;
    const auto model = pretrain(ctx, train, cfg).main;
    auto err = [&](const char* dom) {
        const auto test = make_dataset(ctx.skeleton, domain_preset(dom), 1, 200, 25);
        double e = 0;
        for (const auto& s : test.samples)
            e += mpjpe(forward_kinematics(ctx.skeleton, regress(ctx, model.values(), s.evidence.observation).body),
                       s.truth.joints);
        return e / test.size();
    };
    const double narrow = err("indoor-like"), wide = err("in-the-wild-like");
    EXPECT_GT(wide, 1.1 * narrow) << narrow << " vs " << wide;
}
