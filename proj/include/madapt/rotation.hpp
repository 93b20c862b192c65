// SPDX-License-Identifier: Apache-2.0
//
// Axis-angle exponential map and its derivatives.
#pragma once

#include "madapt/diffcore.hpp"

#include <Eigen/Dense>

#include <array>
#include <cmath>

namespace madapt {

inline Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
    Eigen::Matrix3d k;
    k << 0.0, -v.z(), v.y(),
         v.z(), 0.0, -v.x(),
        -v.y(), v.x(), 0.0;
    return k;
}

namespace detail {

// R = I + a K + b K^2 with K = [v]x, t = |v|.
// a = sin t / t, b = (1 - cos t) / t^2,
// da = (da/dt) / t, db = (db/dt) / t.
struct RodriguesCoeffs {
    double a, b, da, db;
};

inline RodriguesCoeffs rodrigues_coeffs(double t) {
    const double t2 = t * t;
    if (t < 1e-2) {
        const double t4 = t2 * t2;
        return {1.0 - t2 / 6.0 + t4 / 120.0,
                0.5 - t2 / 24.0 + t4 / 720.0,
                -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0,
                -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0};
    }
    const double s = std::sin(t), c = std::cos(t);
    return {s / t, (1.0 - c) / t2, (t * c - s) / (t2 * t), (t * s - 2.0 * (1.0 - c)) / (t2 * t2)};
}

}  // namespace detail

/// Rotation matrix for an axis-angle vector; smooth through the origin.
inline Eigen::Matrix3d rodrigues(const Eigen::Vector3d& axis_angle) {
    const auto c = detail::rodrigues_coeffs(axis_angle.norm());
    const Eigen::Matrix3d k = skew(axis_angle);
    Eigen::Matrix3d r = Eigen::Matrix3d::Identity() + c.a * k + c.b * k * k;
    check_finite("rodrigues", std::span<const double>(r.data(), 9));
    return r;
}

/// dR/dv_i for i = 0, 1, 2.
inline std::array<Eigen::Matrix3d, 3> rodrigues_derivatives(const Eigen::Vector3d& v) {
    const auto c = detail::rodrigues_coeffs(v.norm());
    const Eigen::Matrix3d k = skew(v);
    const Eigen::Matrix3d k2 = k * k;
    std::array<Eigen::Matrix3d, 3> out;
    for (int i = 0; i < 3; ++i) {
        const Eigen::Matrix3d ei = skew(Eigen::Vector3d::Unit(i));
        out[i] = c.a * ei + c.b * (ei * k + k * ei) + (c.da * v[i]) * k + (c.db * v[i]) * k2;
    }
    return out;
}

}  // namespace madapt
