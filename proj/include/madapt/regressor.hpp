// SPDX-License-Identifier: Apache-2.0
//
// regressor.hpp - fully-connected network mapping an observation vector to
// body parameters and a camera, with its reverse pass and checkpoint format.
//
// Output vector layout (length 3J + S + 3):
//   [0, 3J)        theta, joint-major (joint j axis k at 3j + k)
//   [3J, 3J+S)     beta
//   3J+S           camera scale, pre-activation: scale = softplus(x) + 0.5
//   3J+S+1, +2     camera translation
//
// Each raw output is multiplied by a fixed per-output gain before decoding.
// The gains come from the skeleton (see head_gains) and even out the
// curvature of the reprojection loss across outputs, so one step size suits
// the camera and the distal joints alike.
#pragma once

#include "madapt/binary_io.hpp"
#include "madapt/body_model.hpp"
#include "madapt/diffcore.hpp"
#include "madapt/hashing.hpp"
#include "madapt/random.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace madapt {

inline constexpr double kCameraScaleOffset = 0.5;

enum class Activation { tanh, relu };

inline std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "relu"; }

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::tanh;
    if (s == "relu") return Activation::relu;
    throw std::invalid_argument("unknown activation '" + s + "'");
}

/// Camera-scale pre-activation giving scale 1.
inline double unit_scale_preactivation() { return std::log(std::expm1(1.0 - kCameraScaleOffset)); }

inline constexpr double kGainTarget = 0.05;
inline constexpr double kGainMin = 0.1;
inline constexpr double kGainMax = 10.0;

/// Per-output gains g_k = clamp(sqrt(c / h_k)), where h_k is the Gauss-Newton
/// diagonal w.r.t. output k of the mean squared 2D reprojection error plus the
/// mean squared 3D joint error, taken at the rest pose with unit camera.
/// Outputs with no effect get gain 1.
inline std::vector<double> head_gains(const Skeleton& sk) {
    const int n = sk.joint_count(), s = sk.shape_dim();
    const int out = 3 * n + s + 3;
    const auto body = BodyParams::zeros(n, s);
    const auto tape = forward_kinematics_tape(sk, body);
    const CameraParams cam{1.0, Eigen::Vector2d::Zero()};
    const double dscale = diff::sigmoid(unit_scale_preactivation());
    std::vector<double> h(out, 0.0);
    auto accumulate = [&](const Joints3D& dj, const CameraGradient& dc) {
        AxisAngles dt = AxisAngles::Zero(n, 3);
        Eigen::VectorXd db = Eigen::VectorXd::Zero(s);
        forward_kinematics_backward(sk, tape, dj, dt, db);
        for (int r = 0; r < n; ++r)
            for (int k = 0; k < 3; ++k) h[3 * r + k] += dt(r, k) * dt(r, k);
        for (int k = 0; k < s; ++k) h[3 * n + k] += db[k] * db[k];
        h[3 * n + s] += dc.scale * dscale * dc.scale * dscale;
        h[3 * n + s + 1] += dc.trans[0] * dc.trans[0];
        h[3 * n + s + 2] += dc.trans[1] * dc.trans[1];
    };
    for (int j = 0; j < n; ++j) {
        for (int c = 0; c < 2; ++c) {
            Joints2D unit = Joints2D::Zero(n, 2);
            unit(j, c) = 1.0;
            Joints3D dj = Joints3D::Zero(n, 3);
            CameraGradient dc;
            project_backward(tape.joints, cam, unit, dj, dc);
            accumulate(dj, dc);
        }
        for (int c = 0; c < 3; ++c) {
            Joints3D dj = Joints3D::Zero(n, 3);
            dj(j, c) = 1.0;
            accumulate(dj, CameraGradient{});
        }
    }
    std::vector<double> g(out, 1.0);
    for (int k = 0; k < out; ++k) {
        const double hk = 2.0 * h[k] / n;
        if (hk > 0.0) g[k] = std::clamp(std::sqrt(kGainTarget / hk), kGainMin, kGainMax);
    }
    return g;
}

struct RegressorSpec {
    int joints = 16;
    int shape_dim = 4;
    std::vector<int> hidden = {128, 128};
    Activation activation = Activation::tanh;
    std::vector<double> output_gain;  // empty means all ones

    static RegressorSpec for_skeleton(const Skeleton& sk, std::vector<int> hidden = {128, 128},
                                      Activation act = Activation::tanh) {
        return {sk.joint_count(), sk.shape_dim(), std::move(hidden), act, head_gains(sk)};
    }

    double gain(int k) const { return output_gain.empty() ? 1.0 : output_gain[static_cast<std::size_t>(k)]; }

    /// Noisy 2D joints (2J) followed by per-joint confidences (J).
    int input_dim() const { return 3 * joints; }
    int output_dim() const { return 3 * joints + shape_dim + 3; }
    int layer_count() const { return static_cast<int>(hidden.size()) + 1; }

    std::vector<int> widths() const {
        std::vector<int> w{input_dim()};
        w.insert(w.end(), hidden.begin(), hidden.end());
        w.push_back(output_dim());
        return w;
    }

    LayoutPtr layout() const {
        std::vector<LayerShape> layers;
        const auto w = widths();
        for (int l = 0; l + 1 < static_cast<int>(w.size()); ++l) {
            const auto name = "fc" + std::to_string(l);
            layers.push_back({name + ".weight", static_cast<std::size_t>(w[l + 1]),
                              static_cast<std::size_t>(w[l])});
            layers.push_back({name + ".bias", static_cast<std::size_t>(w[l + 1]), 1});
        }
        return make_layout(std::move(layers));
    }

    nlohmann::json to_json() const {
        return {{"joints", joints},
                {"shape_dim", shape_dim},
                {"hidden", hidden},
                {"activation", to_string(activation)},
                {"output_gain", output_gain},
                {"input_dim", input_dim()},
                {"output_dim", output_dim()}};
    }

    static RegressorSpec from_json(const nlohmann::json& j) {
        RegressorSpec s;
        s.joints = j.at("joints").get<int>();
        s.shape_dim = j.at("shape_dim").get<int>();
        s.hidden = j.at("hidden").get<std::vector<int>>();
        s.activation = activation_from_string(j.at("activation").get<std::string>());
        if (j.contains("output_gain")) s.output_gain = j.at("output_gain").get<std::vector<double>>();
        return s;
    }

    std::uint64_t hash() const { return fnv1a64(to_json().dump()); }

    void validate() const {
        if (joints < 1 || shape_dim < 0) throw std::invalid_argument("RegressorSpec: bad dimensions");
        for (int h : hidden)
            if (h < 1) throw std::invalid_argument("RegressorSpec: hidden sizes must be >= 1");
        if (!output_gain.empty() && static_cast<int>(output_gain.size()) != output_dim())
            throw std::invalid_argument("RegressorSpec: output_gain must have output_dim entries");
        for (double g : output_gain)
            if (!(g > 0.0) || !std::isfinite(g))
                throw std::invalid_argument("RegressorSpec: output gains must be positive");
    }

    bool operator==(const RegressorSpec&) const = default;
};

/// Glorot-uniform weights, zero biases; fully determined by seed. Rows of the
/// last layer are divided by the output gain so initial predictions do not
/// depend on the gains.
inline ParamVector init_params(const RegressorSpec& spec, std::uint64_t seed) {
    spec.validate();
    auto layout = spec.layout();
    std::vector<double> v(layout->total_size(), 0.0);
    Rng rng(seed);
    for (std::size_t i = 0; i < layout->layer_count(); i += 2) {
        const auto& w = layout->layer(i);
        const double bound = std::sqrt(6.0 / static_cast<double>(w.rows + w.cols));
        const auto off = layout->offset(i);
        for (std::size_t k = 0; k < w.size(); ++k) v[off + k] = rng.uniform(-bound, bound);
        if (i + 2 == layout->layer_count())
            for (std::size_t k = 0; k < w.size(); ++k)
                v[off + k] /= spec.gain(static_cast<int>(k % w.rows));  // column-major
    }
    return ParamVector(std::move(layout), std::move(v));
}

struct Prediction {
    BodyParams body;
    CameraParams cam;
};

/// Gradient of a scalar w.r.t. the decoded prediction.
struct PredictionGradient {
    AxisAngles theta;
    Eigen::VectorXd beta;
    CameraGradient cam;

    static PredictionGradient zeros(int joints, int shape_dim) {
        return {AxisAngles::Zero(joints, 3), Eigen::VectorXd::Zero(shape_dim), {}};
    }
};

inline Prediction decode_output(const RegressorSpec& spec, const Eigen::VectorXd& raw_in) {
    const int j = spec.joints, s = spec.shape_dim;
    Eigen::VectorXd raw = raw_in;
    for (int k = 0; k < raw.size(); ++k) raw[k] *= spec.gain(k);
    Prediction p;
    p.body.theta.resize(j, 3);
    for (int r = 0; r < j; ++r)
        for (int k = 0; k < 3; ++k) p.body.theta(r, k) = raw[3 * r + k];
    p.body.beta = raw.segment(3 * j, s);
    p.cam.scale = diff::softplus(raw[3 * j + s]) + kCameraScaleOffset;
    p.cam.trans = raw.segment<2>(3 * j + s + 1);
    return p;
}

/// Maps dL/dprediction back to dL/draw_output.
inline Eigen::VectorXd encode_gradient(const RegressorSpec& spec, const Eigen::VectorXd& raw,
                                       const PredictionGradient& g) {
    const int j = spec.joints, s = spec.shape_dim;
    Eigen::VectorXd d(spec.output_dim());
    for (int r = 0; r < j; ++r)
        for (int k = 0; k < 3; ++k) d[3 * r + k] = g.theta(r, k);
    d.segment(3 * j, s) = g.beta;
    d[3 * j + s] = g.cam.scale * diff::sigmoid(spec.gain(3 * j + s) * raw[3 * j + s]);
    d.segment<2>(3 * j + s + 1) = g.cam.trans;
    for (int k = 0; k < d.size(); ++k) d[k] *= spec.gain(k);
    return d;
}

/// Activations kept for the reverse pass. activations[0] is the input,
/// activations[l] the post-nonlinearity output of hidden layer l.
struct RegressorTape {
    std::vector<Eigen::VectorXd> activations;
    Eigen::VectorXd raw_output;
};

namespace detail {

inline void check_param_span(const RegressorSpec& spec, const Layout& layout, std::size_t n) {
    if (n != layout.total_size())
        throw DimensionError("parameter vector has " + std::to_string(n) +
                             " entries, regressor spec needs " +
                             std::to_string(layout.total_size()));
    (void)spec;
}

}  // namespace detail

/// Forward pass over raw weights laid out per `layout` (from spec.layout()).
inline RegressorTape regress_tape(const RegressorSpec& spec, const Layout& layout,
                                  std::span<const double> w, const Eigen::VectorXd& observation) {
    detail::check_param_span(spec, layout, w.size());
    if (observation.size() != spec.input_dim())
        throw DimensionError("observation has length " + std::to_string(observation.size()) +
                             ", expected " + std::to_string(spec.input_dim()));
    RegressorTape tape;
    tape.activations.reserve(spec.hidden.size() + 1);
    tape.activations.push_back(observation);
    const int layers = spec.layer_count();
    for (int l = 0; l < layers; ++l) {
        const auto& ws = layout.layer(2 * l);
        const diff::ConstMatMap W(w.data() + layout.offset(2 * l), static_cast<Eigen::Index>(ws.rows),
                                  static_cast<Eigen::Index>(ws.cols));
        const diff::ConstVecMap b(w.data() + layout.offset(2 * l + 1),
                                  static_cast<Eigen::Index>(ws.rows));
        Eigen::VectorXd y = diff::affine(W, b, tape.activations.back());
        if (l + 1 == layers) {
            tape.raw_output = std::move(y);
        } else {
            if (spec.activation == Activation::tanh)
                diff::tanh_inplace(y);
            else
                diff::relu_inplace(y);
            tape.activations.push_back(std::move(y));
        }
    }
    return tape;
}

/// Accumulates dL/dw into grad given dL/draw_output.
inline void regress_backward(const RegressorSpec& spec, const Layout& layout,
                             std::span<const double> w, const RegressorTape& tape,
                             Eigen::VectorXd d_out, std::span<double> grad) {
    const int layers = spec.layer_count();
    for (int l = layers - 1; l >= 0; --l) {
        const auto& ws = layout.layer(2 * l);
        const auto rows = static_cast<Eigen::Index>(ws.rows), cols = static_cast<Eigen::Index>(ws.cols);
        const diff::ConstMatMap W(w.data() + layout.offset(2 * l), rows, cols);
        diff::MatMap dW(grad.data() + layout.offset(2 * l), rows, cols);
        diff::VecMap db(grad.data() + layout.offset(2 * l + 1), rows);
        Eigen::VectorXd dx;
        diff::affine_backward(W, tape.activations[l], d_out, dW, db, l > 0 ? &dx : nullptr);
        if (l > 0) {
            if (spec.activation == Activation::tanh)
                diff::tanh_backward(tape.activations[l], dx);
            else
                diff::relu_backward(tape.activations[l], dx);
            d_out = std::move(dx);
        }
    }
}

inline Prediction regress(const RegressorSpec& spec, const ParamVector& params,
                          const Eigen::VectorXd& observation) {
    const auto layout = spec.layout();
    if (!params.same_layout(*layout))
        throw DimensionError("parameter layout does not match regressor spec");
    return decode_output(spec, regress_tape(spec, *layout, params.values(), observation).raw_output);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// <name>.bin:
//   "MADP"            4 bytes
//   version           u32 (= 1)
//   spec hash         u64 (FNV-1a of the spec JSON)
//   layer count       u32
//   per layer:        name (u32 length + bytes), rows u32, cols u32
//   value count       u64
//   values            f64 little-endian, layout order, column-major per layer
// <name>.json: {"format":"madapt-checkpoint","version":1,"spec":{...},"seed":N,
//               "spec_hash":"<hex>"}
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    RegressorSpec spec;
    ParamVector params;
    std::uint64_t seed = 0;
};

inline std::string encode_checkpoint(const RegressorSpec& spec, const ParamVector& params) {
    if (!params.same_layout(*spec.layout()))
        throw DimensionError("checkpoint: params do not match spec");
    ByteWriter w;
    w.bytes("MADP");
    w.u32(kCheckpointVersion);
    w.u64(spec.hash());
    const auto& layout = params.layout();
    w.u32(static_cast<std::uint32_t>(layout.layer_count()));
    for (const auto& l : layout.layers()) {
        w.str(l.name);
        w.u32(static_cast<std::uint32_t>(l.rows));
        w.u32(static_cast<std::uint32_t>(l.cols));
    }
    w.u64(params.size());
    for (double v : params.values()) w.f64(v);
    return std::string(w.view());
}

inline ParamVector decode_checkpoint(std::string_view bytes, const RegressorSpec& spec) {
    ByteReader r(bytes);
    if (r.bytes(4, "magic") != "MADP") throw CorruptFileError("bad checkpoint magic", 0);
    const auto version = r.u32("version");
    if (version != kCheckpointVersion)
        throw VersionError("unsupported checkpoint version " + std::to_string(version));
    const auto hash_pos = r.position();
    if (r.u64("spec hash") != spec.hash())
        throw CorruptFileError("checkpoint spec hash does not match sidecar spec", hash_pos);
    const auto n_layers = r.u32("layer count");
    std::vector<LayerShape> layers;
    for (std::uint32_t i = 0; i < n_layers; ++i) {
        LayerShape l;
        l.name = r.str("layer name");
        l.rows = r.u32("layer rows");
        l.cols = r.u32("layer cols");
        layers.push_back(std::move(l));
    }
    auto layout = make_layout(std::move(layers));
    if (!(*layout == *spec.layout()))
        throw CorruptFileError("checkpoint layout does not match spec", r.position());
    const auto count_pos = r.position();
    const auto n = r.u64("value count");
    if (n != layout->total_size()) throw CorruptFileError("value count mismatch", count_pos);
    std::vector<double> v(n);
    for (auto& x : v) x = r.f64("values");
    if (r.remaining() != 0) throw CorruptFileError("trailing bytes after checkpoint", r.position());
    return ParamVector(std::move(layout), std::move(v));
}

inline void save_checkpoint(const std::filesystem::path& bin_path, const RegressorSpec& spec,
                            const ParamVector& params, std::uint64_t seed) {
    write_file(bin_path, encode_checkpoint(spec, params));
    nlohmann::json side = {{"format", "madapt-checkpoint"},
                           {"version", kCheckpointVersion},
                           {"spec", spec.to_json()},
                           {"spec_hash", hex64(spec.hash())},
                           {"seed", seed}};
    auto json_path = bin_path;
    json_path.replace_extension(".json");
    write_file(json_path, side.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& bin_path) {
    auto json_path = bin_path;
    json_path.replace_extension(".json");
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(read_file(json_path));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(std::string("checkpoint sidecar: ") + e.what(), 0);
    }
    if (side.value("version", 0) != static_cast<int>(kCheckpointVersion))
        throw VersionError("unsupported checkpoint sidecar version");
    auto spec = RegressorSpec::from_json(side.at("spec"));
    auto params = decode_checkpoint(read_file(bin_path), spec);
    return {std::move(spec), std::move(params), side.value("seed", std::uint64_t{0})};
}

}  // namespace madapt
