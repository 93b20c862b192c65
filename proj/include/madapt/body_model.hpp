// SPDX-License-Identifier: Apache-2.0
//
// body_model.hpp - articulated skeleton, forward kinematics and the
// weak-perspective camera, each with a reverse pass.
//
// Joint i sits at  p_i = p_parent + G_parent * (m_i * o_i)  where G is the
// accumulated (global) rotation, o_i the rest offset and m_i = 1 + B_i . beta
// the bone-length multiplier. The root is pinned at the origin and carries the
// global orientation, so leaf rotations never move a joint.
#pragma once

#include "madapt/diffcore.hpp"
#include "madapt/hashing.hpp"
#include "madapt/rotation.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <array>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace madapt {

using Joints3D = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using Joints2D = Eigen::Matrix<double, Eigen::Dynamic, 2>;
using AxisAngles = Eigen::Matrix<double, Eigen::Dynamic, 3>;

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Skeleton
// ---------------------------------------------------------------------------

class Skeleton {
public:
    Skeleton(std::vector<std::string> names, std::vector<int> parents, Joints3D rest_offsets,
             Eigen::MatrixXd shape_basis)
        : names_(std::move(names)),
          parents_(std::move(parents)),
          offsets_(std::move(rest_offsets)),
          basis_(std::move(shape_basis)) {
        validate();
    }

    /// 16-joint human-like tree:
    ///   0 pelvis
    ///   1 spine  2 neck  3 head
    ///   4 l_shoulder  5 l_elbow  6 l_wrist      (parent of 4 is neck)
    ///   7 r_shoulder  8 r_elbow  9 r_wrist      (parent of 7 is neck)
    ///  10 l_hip  11 l_knee  12 l_ankle          (parent of 10 is pelvis)
    ///  13 r_hip  14 r_knee  15 r_ankle          (parent of 13 is pelvis)
    /// Shape basis: 16x4, uniform in [-0.1, 0.1] from a fixed seed.
    static Skeleton human16() {
        std::vector<std::string> names = {
            "pelvis",  "spine",      "neck",    "head",    "l_shoulder", "l_elbow",
            "l_wrist", "r_shoulder", "r_elbow", "r_wrist", "l_hip",      "l_knee",
            "l_ankle", "r_hip",      "r_knee",  "r_ankle"};
        std::vector<int> parents = {-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14};
        Joints3D off(16, 3);
        off << 0.0, 0.0, 0.0,
               0.0, 0.25, -0.02,
               0.0, 0.25, 0.0,
               0.0, 0.15, 0.03,
               0.16, -0.02, 0.0,
               0.28, 0.0, 0.0,
               0.25, 0.0, 0.0,
              -0.16, -0.02, 0.0,
              -0.28, 0.0, 0.0,
              -0.25, 0.0, 0.0,
               0.10, -0.08, 0.0,
               0.0, -0.42, 0.0,
               0.0, -0.40, -0.03,
              -0.10, -0.08, 0.0,
               0.0, -0.42, 0.0,
               0.0, -0.40, -0.03;
        return Skeleton(std::move(names), std::move(parents), std::move(off),
                        seeded_basis(16, 4, kShapeBasisSeed));
    }

    static constexpr std::uint64_t kShapeBasisSeed = 0x5EED5EEDULL;

    /// Uniform [-0.1, 0.1] entries from mt19937_64 raw draws (portable).
    static Eigen::MatrixXd seeded_basis(int joints, int dims, std::uint64_t seed) {
        std::mt19937_64 gen(seed);
        Eigen::MatrixXd b(joints, dims);
        for (int s = 0; s < dims; ++s)
            for (int j = 0; j < joints; ++j) {
                const double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
                b(j, s) = -0.1 + 0.2 * u;
            }
        return b;
    }

    int joint_count() const { return static_cast<int>(parents_.size()); }
    int shape_dim() const { return static_cast<int>(basis_.cols()); }
    int parent(int j) const { return parents_[j]; }
    const std::vector<int>& parents() const { return parents_; }
    const std::vector<std::string>& names() const { return names_; }
    const Joints3D& rest_offsets() const { return offsets_; }
    const Eigen::MatrixXd& shape_basis() const { return basis_; }
    /// Root first; every joint after its parent.
    const std::vector<int>& order() const { return order_; }

    bool is_descendant(int j, int ancestor) const {
        for (int p = parents_[j]; p >= 0; p = parents_[p])
            if (p == ancestor) return true;
        return false;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format"] = "madapt-skeleton";
        j["version"] = 1;
        j["joint_count"] = joint_count();
        j["shape_dim"] = shape_dim();
        auto& joints = j["joints"] = nlohmann::json::array();
        for (int i = 0; i < joint_count(); ++i) {
            std::vector<double> basis_row(basis_.cols());
            for (int s = 0; s < basis_.cols(); ++s) basis_row[s] = basis_(i, s);
            joints.push_back({{"name", names_[i]},
                              {"parent", parents_[i]},
                              {"offset", {offsets_(i, 0), offsets_(i, 1), offsets_(i, 2)}},
                              {"shape_basis", basis_row}});
        }
        return j;
    }

    static Skeleton from_json(const nlohmann::json& j) {
        if (j.at("format") != "madapt-skeleton" || j.at("version") != 1)
            throw std::runtime_error("unsupported skeleton file");
        const auto& joints = j.at("joints");
        const int n = static_cast<int>(joints.size());
        const int s = j.at("shape_dim").get<int>();
        std::vector<std::string> names;
        std::vector<int> parents;
        Joints3D off(n, 3);
        Eigen::MatrixXd basis(n, s);
        for (int i = 0; i < n; ++i) {
            const auto& e = joints[i];
            names.push_back(e.at("name").get<std::string>());
            parents.push_back(e.at("parent").get<int>());
            for (int k = 0; k < 3; ++k) off(i, k) = e.at("offset").at(k).get<double>();
            const auto& row = e.at("shape_basis");
            if (static_cast<int>(row.size()) != s)
                throw std::runtime_error("skeleton: shape_basis row length mismatch");
            for (int k = 0; k < s; ++k) basis(i, k) = row.at(k).get<double>();
        }
        return Skeleton(std::move(names), std::move(parents), std::move(off), std::move(basis));
    }

    /// Fingerprint of the canonical JSON form.
    std::uint64_t hash() const { return fnv1a64(to_json().dump()); }

private:
    void validate() {
        const int n = joint_count();
        if (n < 1) throw std::invalid_argument("skeleton: no joints");
        if (static_cast<int>(names_.size()) != n || offsets_.rows() != n || basis_.rows() != n)
            throw std::invalid_argument("skeleton: inconsistent joint counts");
        if (parents_[0] != -1) throw std::invalid_argument("skeleton: joint 0 must be the root");
        std::vector<std::vector<int>> children(n);
        for (int i = 1; i < n; ++i) {
            const int p = parents_[i];
            if (p < 0 || p >= n || p == i)
                throw std::invalid_argument("skeleton: joint " + std::to_string(i) +
                                            " has invalid parent");
            if (offsets_.row(i).norm() <= 0.0)
                throw std::invalid_argument("skeleton: joint " + std::to_string(i) +
                                            " has zero rest offset");
            children[p].push_back(i);
        }
        order_.clear();
        order_.push_back(0);
        for (std::size_t k = 0; k < order_.size(); ++k)
            for (int c : children[order_[k]]) order_.push_back(c);
        if (static_cast<int>(order_.size()) != n)
            throw std::invalid_argument("skeleton: parent links contain a cycle or unreachable joint");
    }

    std::vector<std::string> names_;
    std::vector<int> parents_;
    Joints3D offsets_;
    Eigen::MatrixXd basis_;
    std::vector<int> order_;
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// theta: J x 3 axis-angle (radians); beta: S shape coefficients.
/// Plain aggregate so regressor outputs can be carried unconstrained;
/// `canonical()` enforces the sampled-pose invariant.
struct BodyParams {
    AxisAngles theta;
    Eigen::VectorXd beta;

    static BodyParams zeros(int joints, int shape_dim) {
        return {AxisAngles::Zero(joints, 3), Eigen::VectorXd::Zero(shape_dim)};
    }

    static BodyParams canonical(AxisAngles theta, Eigen::VectorXd beta) {
        for (int j = 0; j < theta.rows(); ++j)
            if (theta.row(j).norm() > std::numbers::pi + 1e-12)
                throw std::invalid_argument("BodyParams: axis-angle norm exceeds pi at joint " +
                                            std::to_string(j));
        if (!theta.allFinite() || !beta.allFinite())
            throw std::invalid_argument("BodyParams: non-finite value");
        return {std::move(theta), std::move(beta)};
    }

    bool operator==(const BodyParams& o) const { return theta == o.theta && beta == o.beta; }
};

struct CameraParams {
    double scale = 1.0;
    Eigen::Vector2d trans = Eigen::Vector2d::Zero();

    static CameraParams make(double scale, Eigen::Vector2d trans) {
        if (!(scale > 0.0)) throw std::invalid_argument("CameraParams: scale must be > 0");
        return {scale, trans};
    }

    bool operator==(const CameraParams& o) const { return scale == o.scale && trans == o.trans; }
};

inline void check_dims(const Skeleton& sk, const BodyParams& body) {
    if (body.theta.rows() != sk.joint_count() || body.beta.size() != sk.shape_dim())
        throw DimensionError("body parameters (" + std::to_string(body.theta.rows()) + " joints, " +
                             std::to_string(body.beta.size()) + " shape) do not match skeleton (" +
                             std::to_string(sk.joint_count()) + ", " +
                             std::to_string(sk.shape_dim()) + ")");
}

// ---------------------------------------------------------------------------
// Forward kinematics
// ---------------------------------------------------------------------------

struct FkTape {
    std::vector<Eigen::Matrix3d> global;
    std::vector<Eigen::Matrix3d> local;
    std::vector<std::array<Eigen::Matrix3d, 3>> d_local;  // dR_j / dtheta_j
    Eigen::VectorXd multipliers;
    Joints3D joints;
};

inline FkTape forward_kinematics_tape(const Skeleton& sk, const BodyParams& body,
                                      bool with_derivatives = true) {
    check_dims(sk, body);
    const int n = sk.joint_count();
    FkTape t;
    t.global.resize(n);
    t.local.resize(n);
    if (with_derivatives) t.d_local.resize(n);
    t.multipliers = Eigen::VectorXd::Ones(n) + sk.shape_basis() * body.beta;
    t.joints.setZero(n, 3);
    for (int j : sk.order()) {
        const Eigen::Vector3d aa = body.theta.row(j).transpose();
        t.local[j] = rodrigues(aa);
        if (with_derivatives) t.d_local[j] = rodrigues_derivatives(aa);
        const int p = sk.parent(j);
        if (p < 0) {
            t.global[j] = t.local[j];
            continue;
        }
        const Eigen::Vector3d bone = t.multipliers[j] * sk.rest_offsets().row(j).transpose();
        t.joints.row(j) = t.joints.row(p) + (t.global[p] * bone).transpose();
        t.global[j] = t.global[p] * t.local[j];
    }
    check_finite("forward_kinematics", std::span<const double>(t.joints.data(), t.joints.size()));
    return t;
}

inline Joints3D forward_kinematics(const Skeleton& sk, const BodyParams& body) {
    return forward_kinematics_tape(sk, body, false).joints;
}

/// Accumulates dL/dtheta and dL/dbeta given dL/djoints.
inline void forward_kinematics_backward(const Skeleton& sk, const FkTape& t,
                                        const Joints3D& d_joints, AxisAngles& d_theta,
                                        Eigen::VectorXd& d_beta) {
    const int n = sk.joint_count();
    const auto& order = sk.order();
    // Subtree sums: a bone vector moves every joint below it.
    Joints3D subtree = d_joints;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (sk.parent(*it) >= 0) subtree.row(sk.parent(*it)) += subtree.row(*it);

    std::vector<Eigen::Matrix3d> d_global(n, Eigen::Matrix3d::Zero());
    Eigen::VectorXd d_mult = Eigen::VectorXd::Zero(n);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const int j = *it;
        const int p = sk.parent(j);
        Eigen::Matrix3d d_local;
        if (p < 0) {
            d_local = d_global[j];
        } else {
            const Eigen::Vector3d off = sk.rest_offsets().row(j).transpose();
            const Eigen::Vector3d s = subtree.row(j).transpose();
            d_global[p].noalias() += s * (t.multipliers[j] * off).transpose();
            d_mult[j] += s.dot(t.global[p] * off);
            d_global[p].noalias() += d_global[j] * t.local[j].transpose();
            d_local.noalias() = t.global[p].transpose() * d_global[j];
        }
        for (int k = 0; k < 3; ++k) d_theta(j, k) += (d_local.cwiseProduct(t.d_local[j][k])).sum();
    }
    d_beta.noalias() += sk.shape_basis().transpose() * d_mult;
}

// ---------------------------------------------------------------------------
// Weak-perspective projection: p2d = scale * (x, y) + trans.
// ---------------------------------------------------------------------------

inline Joints2D project(const Joints3D& joints, const CameraParams& cam) {
    Joints2D out = cam.scale * joints.leftCols<2>();
    out.rowwise() += cam.trans.transpose();
    return out;
}

struct CameraGradient {
    double scale = 0.0;
    Eigen::Vector2d trans = Eigen::Vector2d::Zero();
};

inline void project_backward(const Joints3D& joints, const CameraParams& cam,
                             const Joints2D& d_out, Joints3D& d_joints, CameraGradient& d_cam) {
    d_joints.leftCols<2>() += cam.scale * d_out;
    d_cam.scale += (joints.leftCols<2>().array() * d_out.array()).sum();
    d_cam.trans += d_out.colwise().sum().transpose();
}

}  // namespace madapt
