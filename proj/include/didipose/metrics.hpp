#pragma once

#include <cmath>
#include <string>

#include <Eigen/Core>
#include <Eigen/LU>
#include <Eigen/SVD>

#include "didipose/skeleton.hpp"

namespace didipose {

// Mean per-joint position error after root alignment (joint 0 subtracted from
// both poses), in millimeters.
inline double mpjpe(const Pose& pred, const Pose& gt) {
    if (pred.joints != gt.joints)
        throw DataError("mpjpe: joint count mismatch (" + std::to_string(pred.joints) + " vs " +
                        std::to_string(gt.joints) + ")");
    if (pred.joints == 0) throw DataError("mpjpe: empty pose");
    double acc = 0.0;
    for (int j = 0; j < pred.joints; ++j) {
        double d2 = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double dp = pred.at(j, c) - pred.at(0, c);
            const double dg = gt.at(j, c) - gt.at(0, c);
            d2 += (dp - dg) * (dp - dg);
        }
        acc += std::sqrt(d2);
    }
    return acc / pred.joints;
}

// MPJPE after a least-squares similarity alignment (rotation + translation +
// uniform scale, rotation kept proper via determinant correction) of pred onto
// gt. Throws AlignmentError for degenerate (collinear or collapsed) inputs.
inline double pa_mpjpe(const Pose& pred, const Pose& gt) {
    if (pred.joints != gt.joints)
        throw DataError("pa_mpjpe: joint count mismatch (" + std::to_string(pred.joints) + " vs " +
                        std::to_string(gt.joints) + ")");
    const int j = pred.joints;
    if (j < 3) throw DataError("pa_mpjpe: need at least 3 joints for alignment");

    Eigen::MatrixXd p(j, 3), g(j, 3);
    for (int r = 0; r < j; ++r)
        for (int c = 0; c < 3; ++c) {
            p(r, c) = pred.at(r, c);
            g(r, c) = gt.at(r, c);
        }
    const Eigen::RowVector3d pc = p.colwise().mean();
    const Eigen::RowVector3d gc = g.colwise().mean();
    p.rowwise() -= pc;
    g.rowwise() -= gc;

    const double pnorm2 = p.squaredNorm();
    if (pnorm2 <= 0.0) throw AlignmentError("pa_mpjpe: predicted joints are coincident");

    const Eigen::Matrix3d h = p.transpose() * g;  // cross-covariance
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Eigen::Vector3d sv = svd.singularValues();
    if (!(sv(1) > 1e-9 * std::max(sv(0), 1e-30)))
        throw AlignmentError("pa_mpjpe: degenerate (collinear) joint configuration, alignment unstable");

    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1.0;
    const Eigen::Matrix3d rot = svd.matrixV() * d * svd.matrixU().transpose();
    const double scale = (sv(0) + sv(1) + d(2, 2) * sv(2)) / pnorm2;

    const Eigen::MatrixXd aligned = scale * (p * rot.transpose());
    double acc = 0.0;
    for (int r = 0; r < j; ++r) acc += (aligned.row(r) - g.row(r)).norm();
    return acc / j;
}

}  // namespace didipose
