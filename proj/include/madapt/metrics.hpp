// SPDX-License-Identifier: Apache-2.0
//
// metrics.hpp - MPJPE, similarity Procrustes alignment and PA-MPJPE.
#pragma once

#include "madapt/body_model.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <stdexcept>
#include <string>

namespace madapt {

class DegenerateError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct SimilarityTransform {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    double scale = 1.0;
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();

    /// s R p + t applied to each row.
    Joints3D apply(const Joints3D& p) const {
        Joints3D out = (scale * (p * rotation.transpose()));
        out.rowwise() += translation.transpose();
        return out;
    }
};

inline void check_same_joints(const Joints3D& a, const Joints3D& b) {
    if (a.rows() != b.rows())
        throw DimensionError("joint count mismatch: " + std::to_string(a.rows()) + " vs " +
                             std::to_string(b.rows()));
}

inline Joints3D root_centered(const Joints3D& j, int root = 0) {
    Joints3D out = j;
    out.rowwise() -= j.row(root);
    return out;
}

/// Per-joint Euclidean distances after root-centering both sets.
inline Eigen::VectorXd per_joint_error_centered(const Joints3D& pred, const Joints3D& gt) {
    check_same_joints(pred, gt);
    return (root_centered(pred) - root_centered(gt)).rowwise().norm();
}

inline double mpjpe(const Joints3D& pred, const Joints3D& gt) {
    return per_joint_error_centered(pred, gt).mean();
}

/// Closed-form similarity alignment minimising sum |s R pred_j + t - gt_j|^2:
/// centre both sets, SVD of the cross-covariance with a reflection guard,
/// optimal scale from the singular values.
inline SimilarityTransform procrustes_align(const Joints3D& pred, const Joints3D& gt) {
    check_same_joints(pred, gt);
    const auto n = pred.rows();
    if (n < 3) throw DegenerateError("procrustes_align: need at least 3 points");
    const Eigen::RowVector3d mu_p = pred.colwise().mean();
    const Eigen::RowVector3d mu_g = gt.colwise().mean();
    const Joints3D p = pred.rowwise() - mu_p;
    const Joints3D g = gt.rowwise() - mu_g;

    Eigen::JacobiSVD<Eigen::MatrixXd> shape_svd(p, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto sv = shape_svd.singularValues();
    if (!(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0])
        throw DegenerateError("procrustes_align: source points are rank " +
                              std::string(sv[0] > 0.0 ? "1 (collinear)" : "0 (coincident)"));

    const Eigen::Matrix3d cov = g.transpose() * p;  // sum g_j p_j^T
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;

    SimilarityTransform t;
    t.rotation = svd.matrixU() * d * svd.matrixV().transpose();
    const double var_p = p.squaredNorm();
    t.scale = (svd.singularValues().asDiagonal() * d).trace() / var_p;
    t.translation = mu_g.transpose() - t.scale * t.rotation * mu_p.transpose();
    return t;
}

inline Eigen::VectorXd per_joint_error_aligned(const Joints3D& pred, const Joints3D& gt) {
    const auto t = procrustes_align(pred, gt);
    return (t.apply(pred) - gt).rowwise().norm();
}

inline double pa_mpjpe(const Joints3D& pred, const Joints3D& gt) {
    return per_joint_error_aligned(pred, gt).mean();
}

inline Eigen::VectorXd per_joint_error(const Joints3D& pred, const Joints3D& gt, bool aligned) {
    return aligned ? per_joint_error_aligned(pred, gt) : per_joint_error_centered(pred, gt);
}

struct PoseErrors {
    double mpjpe = 0.0;
    double pa_mpjpe = 0.0;
};

inline PoseErrors pose_errors(const Joints3D& pred, const Joints3D& gt) {
    return {mpjpe(pred, gt), pa_mpjpe(pred, gt)};
}

}  // namespace madapt
