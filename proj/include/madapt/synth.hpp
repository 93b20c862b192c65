// SPDX-License-Identifier: Apache-2.0
//
// synth.hpp - synthetic pose-lifting task: body/camera sampling, a keypoint
// detector simulator and reproducible datasets.
#pragma once

#include "madapt/binary_io.hpp"
#include "madapt/body_model.hpp"
#include "madapt/config_error.hpp"
#include "madapt/hashing.hpp"
#include "madapt/losses.hpp"
#include "madapt/random.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

namespace madapt {

struct Range {
    double lo = 0.0;
    double hi = 0.0;
    bool operator==(const Range&) const = default;
};

/// Sampling distribution of one synthetic "dataset". Detector noise presets:
/// sigma 0.02 stands in for a weak detector, 0.01 for a strong one, 0 for
/// ground-truth keypoints.
struct DomainConfig {
    std::string name = "default";
    double pose_scale = 0.4;
    Range beta_range{-2.0, 2.0};
    Range camera_scale_range{0.8, 1.2};
    Range camera_trans_range{-0.2, 0.2};
    double detector_noise_sigma = 0.02;
    double occlusion_prob = 0.05;

    void validate() const {
        auto check_range = [](const Range& r, const char* f) {
            if (!(r.lo <= r.hi)) throw ConfigError(f, "empty range");
        };
        if (!(pose_scale >= 0.0)) throw ConfigError("pose_scale", "must be >= 0");
        check_range(beta_range, "beta_range");
        check_range(camera_scale_range, "camera_scale_range");
        check_range(camera_trans_range, "camera_trans_range");
        if (!(camera_scale_range.lo > 0.0)) throw ConfigError("camera_scale_range", "must be > 0");
        if (!(detector_noise_sigma >= 0.0)) throw ConfigError("detector_noise_sigma", "must be >= 0");
        if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0))
            throw ConfigError("occlusion_prob", "must lie in [0, 1]");
    }

    bool operator==(const DomainConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const Range& r) { j = nlohmann::json::array({r.lo, r.hi}); }
inline void from_json(const nlohmann::json& j, Range& r) {
    if (!j.is_array() || j.size() != 2) throw std::invalid_argument("range must be [lo, hi]");
    r.lo = j[0].get<double>();
    r.hi = j[1].get<double>();
}

inline void to_json(nlohmann::json& j, const DomainConfig& d) {
    j = {{"name", d.name},
         {"pose_scale", d.pose_scale},
         {"beta_range", d.beta_range},
         {"camera_scale_range", d.camera_scale_range},
         {"camera_trans_range", d.camera_trans_range},
         {"detector_noise_sigma", d.detector_noise_sigma},
         {"occlusion_prob", d.occlusion_prob}};
}

/// Presets by name:
///   default           pose_scale 0.4 (training domain)
///   indoor-like       pose_scale 0.3 (narrow poses)
///   in-the-wild-like  pose_scale 0.6 (wide poses)
inline DomainConfig domain_preset(const std::string& name) {
    DomainConfig d;
    d.name = name;
    if (name == "default") return d;
    if (name == "indoor-like") {
        d.pose_scale = 0.3;
        return d;
    }
    if (name == "in-the-wild-like") {
        d.pose_scale = 0.6;
        return d;
    }
    throw ConfigError("domain", "unknown preset '" + name + "'");
}

/// Either a preset name or an object ({"preset": "...", overrides...}).
inline void from_json(const nlohmann::json& j, DomainConfig& d) {
    if (j.is_string()) {
        d = domain_preset(j.get<std::string>());
        return;
    }
    reject_unknown_keys(j, {"name", "preset", "pose_scale", "beta_range", "camera_scale_range",
                            "camera_trans_range", "detector_noise_sigma", "occlusion_prob"},
                        "domain.");
    d = domain_preset(j.value("preset", std::string("default")));
    read_field(j, "name", d.name, "domain.");
    read_field(j, "pose_scale", d.pose_scale, "domain.");
    auto range_field = [&](const char* k, Range& r) {
        if (!j.contains(k)) return;
        try {
            r = j.at(k).get<Range>();
        } catch (const std::exception& e) {
            throw ConfigError(std::string("domain.") + k, e.what());
        }
    };
    range_field("beta_range", d.beta_range);
    range_field("camera_scale_range", d.camera_scale_range);
    range_field("camera_trans_range", d.camera_trans_range);
    read_field(j, "detector_noise_sigma", d.detector_noise_sigma, "domain.");
    read_field(j, "occlusion_prob", d.occlusion_prob, "domain.");
}

// ---------------------------------------------------------------------------
// Samples
// ---------------------------------------------------------------------------

/// One task instance. `evidence` is all a test-time procedure may consume;
/// `truth` is the 3D supervision used by training; `gt_j2d_clean` exists for
/// diagnostics only and is not reachable from training/adaptation views.
struct Sample {
    Evidence evidence;
    Target3D truth;
    CameraParams gt_cam;
    Joints2D gt_j2d_clean;

    const Eigen::VectorXd& observation() const { return evidence.observation; }
    const Joints2D& target_j2d() const { return evidence.target_j2d; }
    const Eigen::VectorXd& conf() const { return evidence.conf; }
    const BodyParams& gt_body() const { return truth.body; }
    const Joints3D& gt_j3d() const { return truth.joints; }

    bool operator==(const Sample& o) const {
        return evidence.observation == o.evidence.observation &&
               evidence.target_j2d == o.evidence.target_j2d && evidence.conf == o.evidence.conf &&
               truth.body == o.truth.body && truth.joints == o.truth.joints &&
               gt_cam == o.gt_cam && gt_j2d_clean == o.gt_j2d_clean;
    }
};

/// Noisy joints flattened joint-major (x0, y0, x1, y1, ...) then confidences.
inline Eigen::VectorXd make_observation(const Joints2D& j2d, const Eigen::VectorXd& conf) {
    const auto J = j2d.rows();
    Eigen::VectorXd obs(3 * J);
    for (Eigen::Index j = 0; j < J; ++j) {
        obs[2 * j] = j2d(j, 0);
        obs[2 * j + 1] = j2d(j, 1);
    }
    obs.tail(J) = conf;
    return obs;
}

inline std::pair<BodyParams, CameraParams> sample_body(const Skeleton& sk,
                                                       const DomainConfig& domain, Rng& rng) {
    domain.validate();
    const int J = sk.joint_count();
    BodyParams body = BodyParams::zeros(J, sk.shape_dim());
    for (int j = 0; j < J; ++j) {
        const Eigen::Vector3d axis = rng.unit_vector();
        const double angle = std::min(std::abs(rng.normal()) * domain.pose_scale, std::numbers::pi);
        body.theta.row(j) = (angle * axis).transpose();
    }
    for (int s = 0; s < sk.shape_dim(); ++s)
        body.beta[s] = rng.uniform(domain.beta_range.lo, domain.beta_range.hi);
    CameraParams cam;
    cam.scale = rng.uniform(domain.camera_scale_range.lo, domain.camera_scale_range.hi);
    cam.trans.x() = rng.uniform(domain.camera_trans_range.lo, domain.camera_trans_range.hi);
    cam.trans.y() = rng.uniform(domain.camera_trans_range.lo, domain.camera_trans_range.hi);
    return {std::move(body), cam};
}

struct Detection {
    Joints2D noisy;
    Eigen::VectorXd conf;
};

/// Gaussian jitter plus independent occlusion (conf 0, position zeroed).
/// Always consumes three draws per joint so streams stay aligned across sigmas.
inline Detection simulate_detector(const Joints2D& clean, const DomainConfig& domain, Rng& rng) {
    domain.validate();
    const auto J = clean.rows();
    Detection d{clean, Eigen::VectorXd::Ones(J)};
    for (Eigen::Index j = 0; j < J; ++j) {
        const double nx = rng.normal(), ny = rng.normal();
        const bool occluded = rng.uniform() < domain.occlusion_prob;
        d.noisy(j, 0) += domain.detector_noise_sigma * nx;
        d.noisy(j, 1) += domain.detector_noise_sigma * ny;
        if (occluded) {
            d.noisy.row(j).setZero();
            d.conf[j] = 0.0;
        }
    }
    return d;
}

inline Sample make_sample(const Skeleton& sk, const DomainConfig& domain, Rng& rng) {
    auto [body, cam] = sample_body(sk, domain, rng);
    auto truth = Target3D::from_body(sk, std::move(body));
    Joints2D clean = project(truth.joints, cam);
    auto det = simulate_detector(clean, domain, rng);
    Sample s;
    s.evidence.observation = make_observation(det.noisy, det.conf);
    s.evidence.target_j2d = std::move(det.noisy);
    s.evidence.conf = std::move(det.conf);
    s.truth = std::move(truth);
    s.gt_cam = cam;
    s.gt_j2d_clean = std::move(clean);
    return s;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Dataset {
    std::vector<Sample> samples;
    DomainConfig domain;
    std::uint64_t seed = 0;
    int batches = 0;     // B
    int batch_size = 0;  // M
    int joints = 0;
    int shape_dim = 0;
    std::uint64_t skeleton_hash = 0;

    std::size_t size() const { return samples.size(); }
    bool operator==(const Dataset&) const = default;
};

inline Dataset make_dataset(const Skeleton& sk, const DomainConfig& domain, int batches,
                            int batch_size, std::uint64_t seed) {
    if (batches < 1 || batch_size < 1) throw std::invalid_argument("make_dataset: B, M must be >= 1");
    domain.validate();
    Dataset ds{{}, domain, seed, batches, batch_size, sk.joint_count(), sk.shape_dim(), sk.hash()};
    Rng rng(seed);
    ds.samples.reserve(static_cast<std::size_t>(batches) * batch_size);
    for (int i = 0; i < batches * batch_size; ++i) ds.samples.push_back(make_sample(sk, domain, rng));
    return ds;
}

/// What training may read: evidence plus 3D truth, never the clean 2D joints.
struct LabeledExample {
    const Evidence* evidence;
    const Target3D* truth;
};

inline std::vector<LabeledExample> training_view(const Dataset& ds) {
    std::vector<LabeledExample> v;
    v.reserve(ds.size());
    for (const auto& s : ds.samples) v.push_back({&s.evidence, &s.truth});
    return v;
}

// ---------------------------------------------------------------------------
// Dataset file
//
//   "MADS"                      4 bytes
//   format version              u32 (= 1)
//   metadata length             u32
//   metadata                    UTF-8 JSON: format, domain, seed, B, M,
//                               joints, shape_dim, skeleton_hash,
//                               doubles_per_sample
//   per sample (f64 LE):
//     observation    3J
//     target_j2d     2J  joint-major (x, y)
//     conf           J
//     gt theta       3J  joint-major
//     gt beta        S
//     gt camera      3   (scale, tx, ty)
//     gt_j3d         3J  joint-major
//     gt_j2d_clean   2J  joint-major
//   checksum                    u64 FNV-1a over all preceding bytes
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kDatasetVersion = 1;

inline int doubles_per_sample(int J, int S) { return 14 * J + S + 3; }

namespace detail {

template <class M>
void put_rows(ByteWriter& w, const M& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
}

template <class M>
void get_rows(ByteReader& r, M& m, const char* what) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(i, c) = r.f64(what);
}

}  // namespace detail

inline std::string encode_dataset(const Dataset& ds) {
    ByteWriter w;
    w.bytes("MADS");
    w.u32(kDatasetVersion);
    nlohmann::json meta = {{"format", "madapt-dataset"},
                           {"domain", ds.domain},
                           {"seed", ds.seed},
                           {"B", ds.batches},
                           {"M", ds.batch_size},
                           {"joints", ds.joints},
                           {"shape_dim", ds.shape_dim},
                           {"skeleton_hash", hex64(ds.skeleton_hash)},
                           {"doubles_per_sample", doubles_per_sample(ds.joints, ds.shape_dim)}};
    w.str(meta.dump());
    for (const auto& s : ds.samples) {
        detail::put_rows(w, s.evidence.observation);
        detail::put_rows(w, s.evidence.target_j2d);
        detail::put_rows(w, s.evidence.conf);
        detail::put_rows(w, s.truth.body.theta);
        detail::put_rows(w, s.truth.body.beta);
        w.f64(s.gt_cam.scale);
        w.f64(s.gt_cam.trans.x());
        w.f64(s.gt_cam.trans.y());
        detail::put_rows(w, s.truth.joints);
        detail::put_rows(w, s.gt_j2d_clean);
    }
    w.u64(fnv1a64(w.view()));
    return std::string(w.view());
}

inline Dataset decode_dataset(std::string_view bytes) {
    ByteReader r(bytes);
    if (r.bytes(4, "magic") != "MADS") throw CorruptFileError("bad dataset magic", 0);
    const auto version = r.u32("format version");
    if (version != kDatasetVersion)
        throw VersionError("unsupported dataset format version " + std::to_string(version));
    const auto meta_pos = r.position();
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(r.str("metadata"));
    } catch (const nlohmann::json::parse_error& e) {
        throw CorruptFileError(std::string("metadata is not valid JSON: ") + e.what(), meta_pos);
    }
    Dataset ds;
    try {
        ds.domain = meta.at("domain").get<DomainConfig>();
        ds.seed = meta.at("seed").get<std::uint64_t>();
        ds.batches = meta.at("B").get<int>();
        ds.batch_size = meta.at("M").get<int>();
        ds.joints = meta.at("joints").get<int>();
        ds.shape_dim = meta.at("shape_dim").get<int>();
        ds.skeleton_hash = std::stoull(meta.at("skeleton_hash").get<std::string>(), nullptr, 16);
    } catch (const std::exception& e) {
        throw CorruptFileError(std::string("bad metadata: ") + e.what(), meta_pos);
    }
    const int J = ds.joints, S = ds.shape_dim;
    const auto n = static_cast<std::size_t>(ds.batches) * ds.batch_size;
    const auto need = n * doubles_per_sample(J, S) * sizeof(double) + sizeof(std::uint64_t);
    if (r.remaining() != need)
        throw CorruptFileError("payload is " + std::to_string(r.remaining()) + " bytes, expected " +
                                   std::to_string(need),
                               r.position());
    const std::uint64_t expect = fnv1a64(bytes.substr(0, bytes.size() - sizeof(std::uint64_t)));
    ds.samples.resize(n);
    for (auto& s : ds.samples) {
        s.evidence.observation.resize(3 * J);
        s.evidence.target_j2d.resize(J, 2);
        s.evidence.conf.resize(J);
        s.truth.body = BodyParams::zeros(J, S);
        s.truth.joints.resize(J, 3);
        s.gt_j2d_clean.resize(J, 2);
        detail::get_rows(r, s.evidence.observation, "observation");
        detail::get_rows(r, s.evidence.target_j2d, "target_j2d");
        detail::get_rows(r, s.evidence.conf, "conf");
        detail::get_rows(r, s.truth.body.theta, "gt theta");
        detail::get_rows(r, s.truth.body.beta, "gt beta");
        s.gt_cam.scale = r.f64("gt camera");
        s.gt_cam.trans.x() = r.f64("gt camera");
        s.gt_cam.trans.y() = r.f64("gt camera");
        detail::get_rows(r, s.truth.joints, "gt_j3d");
        detail::get_rows(r, s.gt_j2d_clean, "gt_j2d_clean");
    }
    const auto sum_pos = r.position();
    if (r.u64("checksum") != expect) throw CorruptFileError("checksum mismatch", sum_pos);
    return ds;
}

inline void serialize_dataset(const Dataset& ds, const std::filesystem::path& path) {
    write_file(path, encode_dataset(ds));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    return decode_dataset(read_file(path));
}

}  // namespace madapt
