#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "didipose/common.hpp"

namespace didipose {

// Fixed articulated skeleton: a parent tree rooted at joint 0, bone lengths in
// millimeters, per-joint Euler angle limits, and the rest direction each bone
// points in when all angles are zero.
struct SkeletonDef {
    int joint_count = 0;
    std::vector<int> parent;                       // parent[0] == -1
    std::vector<double> bone_length_mm;            // [J]; entry 0 unused
    std::vector<std::array<double, 3>> rest_dir;   // unit vectors; entry 0 unused
    std::vector<std::array<double, 3>> angle_min;  // radians, (rx, ry, rz)
    std::vector<std::array<double, 3>> angle_max;

    void validate() const {
        if (joint_count <= 0) throw ConfigError("skeleton: joint_count must be positive");
        const auto j = static_cast<std::size_t>(joint_count);
        if (parent.size() != j || bone_length_mm.size() != j || rest_dir.size() != j ||
            angle_min.size() != j || angle_max.size() != j)
            throw ConfigError("skeleton: field sizes do not match joint_count");
        if (parent[0] != -1) throw ConfigError("skeleton: joint 0 must be the root (parent -1)");
        for (int k = 1; k < joint_count; ++k) {
            // parent index below child guarantees a cycle-free tree reaching the root
            if (parent[static_cast<std::size_t>(k)] < 0 || parent[static_cast<std::size_t>(k)] >= k)
                throw ConfigError("skeleton: parent of joint " + std::to_string(k) +
                                  " must precede it in the joint order");
            if (!(bone_length_mm[static_cast<std::size_t>(k)] > 0.0))
                throw ConfigError("skeleton: bone length of joint " + std::to_string(k) +
                                  " must be strictly positive");
        }
        for (int k = 0; k < joint_count; ++k)
            for (int a = 0; a < 3; ++a)
                if (!(angle_min[static_cast<std::size_t>(k)][static_cast<std::size_t>(a)] <=
                      angle_max[static_cast<std::size_t>(k)][static_cast<std::size_t>(a)]))
                    throw ConfigError("skeleton: angle_min > angle_max at joint " + std::to_string(k));
    }

    // 17-joint Human3.6M convention (root = pelvis), bone lengths from
    // anthropometric averages. angle_range_scale scales every joint's angle
    // range around the rest angle; 0 collapses to the rest pose.
    static SkeletonDef default_h36m17(double angle_range_scale = 1.0) {
        struct Row {
            int parent;
            double len;
            std::array<double, 3> dir;
            std::array<double, 3> half_range;
        };
        // x: left(+)/right(-), y: up(+), z: forward(+)
        static const Row rows[17] = {
            /* 0 pelvis    */ {-1, 0.0, {0, 0, 0}, {0.40, 3.14159265358979, 0.40}},
            /* 1 r hip     */ {0, 132.0, {-1, 0, 0}, {0.70, 0.35, 0.35}},
            /* 2 r knee    */ {1, 450.0, {0, -1, 0}, {1.00, 0.20, 0.20}},
            /* 3 r ankle   */ {2, 440.0, {0, -1, 0}, {0.90, 0.15, 0.15}},
            /* 4 l hip     */ {0, 132.0, {1, 0, 0}, {0.70, 0.35, 0.35}},
            /* 5 l knee    */ {4, 450.0, {0, -1, 0}, {1.00, 0.20, 0.20}},
            /* 6 l ankle   */ {5, 440.0, {0, -1, 0}, {0.90, 0.15, 0.15}},
            /* 7 spine     */ {0, 230.0, {0, 1, 0}, {0.35, 0.30, 0.30}},
            /* 8 thorax    */ {7, 255.0, {0, 1, 0}, {0.30, 0.30, 0.25}},
            /* 9 neck      */ {8, 120.0, {0, 1, 0}, {0.35, 0.40, 0.30}},
            /*10 head      */ {9, 115.0, {0, 1, 0}, {0.30, 0.40, 0.25}},
            /*11 l shoulder*/ {8, 150.0, {1, 0, 0}, {0.50, 0.50, 0.50}},
            /*12 l elbow   */ {11, 280.0, {0, -1, 0}, {1.20, 0.60, 1.20}},
            /*13 l wrist   */ {12, 250.0, {1.20, 0.60, 0.2}, {1.20, 0.60, 0.20}},
            /*14 r shoulder*/ {8, 150.0, {-1, 0, 0}, {0.50, 0.50, 0.50}},
            /*15 r elbow   */ {14, 280.0, {0, -1, 0}, {1.20, 0.60, 1.20}},
            /*16 r wrist   */ {15, 250.0, {-1.20, 0.60, 0.2}, {1.20, 0.60, 0.20}},
        };
        SkeletonDef s;
        s.joint_count = 17;
        for (const Row& r : rows) {
            s.parent.push_back(r.parent);
            s.bone_length_mm.push_back(r.len);
            double nrm = std::sqrt(r.dir[0] * r.dir[0] + r.dir[1] * r.dir[1] + r.dir[2] * r.dir[2]);
            if (nrm == 0.0) nrm = 1.0;
            s.rest_dir.push_back({r.dir[0] / nrm, r.dir[1] / nrm, r.dir[2] / nrm});
            std::array<double, 3> lo{}, hi{};
            for (int a = 0; a < 3; ++a) {
                lo[static_cast<std::size_t>(a)] = -r.half_range[static_cast<std::size_t>(a)] * angle_range_scale;
                hi[static_cast<std::size_t>(a)] = r.half_range[static_cast<std::size_t>(a)] * angle_range_scale;
            }
            s.angle_min.push_back(lo);
            s.angle_max.push_back(hi);
        }
        s.validate();
        return s;
    }
};

// Root-relative 3D pose, millimeters, row-major J x 3.
struct Pose {
    int joints = 0;
    std::vector<double> coords_mm;

    Pose() = default;
    explicit Pose(int j) : joints(j), coords_mm(static_cast<std::size_t>(j) * 3, 0.0) {}

    double& at(int j, int c) { return coords_mm[static_cast<std::size_t>(j) * 3 + static_cast<std::size_t>(c)]; }
    double at(int j, int c) const {
        return coords_mm[static_cast<std::size_t>(j) * 3 + static_cast<std::size_t>(c)];
    }

    bool all_finite() const {
        for (double v : coords_mm)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

namespace detail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 mat3_identity() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 r{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += a[i][k] * b[k][j];
            r[i][j] = s;
        }
    return r;
}

inline std::array<double, 3> mat3_apply(const Mat3& m, const std::array<double, 3>& v) {
    return {m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2]};
}

// R = Rz(c) * Ry(b) * Rx(a)
inline Mat3 euler_zyx(double a, double b, double c) {
    const double ca = std::cos(a), sa = std::sin(a);
    const double cb = std::cos(b), sb = std::sin(b);
    const double cc = std::cos(c), sc = std::sin(c);
    Mat3 rx = {{{1, 0, 0}, {0, ca, -sa}, {0, sa, ca}}};
    Mat3 ry = {{{cb, 0, sb}, {0, 1, 0}, {-sb, 0, cb}}};
    Mat3 rz = {{{cc, -sc, 0}, {sc, cc, 0}, {0, 0, 1}}};
    return mat3_mul(rz, mat3_mul(ry, rx));
}

}  // namespace detail

// Forward kinematics from uniformly sampled joint angles. Deterministic in the
// rng state; draws exactly 3 uniforms per joint in joint order.
inline Pose generate_pose(const SkeletonDef& skel, Rng& rng) {
    Pose pose(skel.joint_count);
    std::vector<detail::Mat3> world_rot(static_cast<std::size_t>(skel.joint_count));
    for (int j = 0; j < skel.joint_count; ++j) {
        const auto js = static_cast<std::size_t>(j);
        const double ax = rng.uniform(skel.angle_min[js][0], skel.angle_max[js][0]);
        const double ay = rng.uniform(skel.angle_min[js][1], skel.angle_max[js][1]);
        const double az = rng.uniform(skel.angle_min[js][2], skel.angle_max[js][2]);
        const detail::Mat3 local = detail::euler_zyx(ax, ay, az);
        if (j == 0) {
            world_rot[js] = local;
            continue;  // root stays at the origin
        }
        const auto ps = static_cast<std::size_t>(skel.parent[js]);
        world_rot[js] = detail::mat3_mul(world_rot[ps], local);
        const std::array<double, 3> offset = detail::mat3_apply(
            world_rot[js], {skel.rest_dir[js][0] * skel.bone_length_mm[js],
                            skel.rest_dir[js][1] * skel.bone_length_mm[js],
                            skel.rest_dir[js][2] * skel.bone_length_mm[js]});
        for (int c = 0; c < 3; ++c) pose.at(j, c) = pose.at(skel.parent[js], c) + offset[static_cast<std::size_t>(c)];
    }
    return pose;
}

// Largest deviation of implied bone lengths from the skeleton table, in mm.
inline double max_bone_length_error(const Pose& pose, const SkeletonDef& skel) {
    double worst = 0.0;
    for (int j = 1; j < skel.joint_count; ++j) {
        const int p = skel.parent[static_cast<std::size_t>(j)];
        double d2 = 0;
        for (int c = 0; c < 3; ++c) {
            const double d = pose.at(j, c) - pose.at(p, c);
            d2 += d * d;
        }
        worst = std::max(worst, std::abs(std::sqrt(d2) - skel.bone_length_mm[static_cast<std::size_t>(j)]));
    }
    return worst;
}

}  // namespace didipose
