#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "didipose/skeleton.hpp"

namespace didipose {

// Axis-aligned occluder rectangle in the projection plane. A point is occluded
// iff it lies strictly inside, so a zero-area rectangle occludes nothing.
struct Rect {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    bool contains_strict(double x, double y) const { return x > x0 && x < x1 && y > y0 && y < y1; }
    double area() const { return std::max(0.0, x1 - x0) * std::max(0.0, y1 - y0); }

    static Rect everything() {
        const double big = 1e18;
        return Rect{-big, -big, big, big};
    }
};

// Sampling parameters for occluder rectangles: side lengths uniform in
// [min_size, max_size] (mm in the projection plane), center uniform over the
// pose's 2D bounding box expanded by `margin` on each side.
struct OccluderSpec {
    double min_size = 0.0;
    double max_size = 0.0;
    double margin = 0.0;

    void validate() const {
        if (min_size < 0 || max_size < min_size)
            throw ConfigError("occluder: need 0 <= min_size <= max_size");
        if (margin < 0) throw ConfigError("occluder: margin must be nonnegative");
    }
};

// Occluded 2D view of a pose: orthographic (x, y) projection plus a
// visibility mask. Stands in for the conditioning image.
struct Observation {
    int joints = 0;
    std::vector<double> proj2d;        // J x 2, mm
    std::vector<std::uint8_t> visible; // J
    Rect occluder;

    double px(int j) const { return proj2d[static_cast<std::size_t>(j) * 2]; }
    double py(int j) const { return proj2d[static_cast<std::size_t>(j) * 2 + 1]; }
};

// Deterministic core: project and apply a given rectangle.
inline Observation project_with_rect(const Pose& pose, const Rect& rect) {
    Observation obs;
    obs.joints = pose.joints;
    obs.proj2d.resize(static_cast<std::size_t>(pose.joints) * 2);
    obs.visible.resize(static_cast<std::size_t>(pose.joints));
    obs.occluder = rect;
    for (int j = 0; j < pose.joints; ++j) {
        const double x = pose.at(j, 0);
        const double y = pose.at(j, 1);
        obs.proj2d[static_cast<std::size_t>(j) * 2] = x;
        obs.proj2d[static_cast<std::size_t>(j) * 2 + 1] = y;
        obs.visible[static_cast<std::size_t>(j)] = rect.contains_strict(x, y) ? 0 : 1;
    }
    return obs;
}

inline Observation project_and_occlude(const Pose& pose, const OccluderSpec& spec, Rng& rng) {
    spec.validate();
    double minx = std::numeric_limits<double>::infinity(), maxx = -minx;
    double miny = minx, maxy = -minx;
    for (int j = 0; j < pose.joints; ++j) {
        minx = std::min(minx, pose.at(j, 0));
        maxx = std::max(maxx, pose.at(j, 0));
        miny = std::min(miny, pose.at(j, 1));
        maxy = std::max(maxy, pose.at(j, 1));
    }
    const double sx = rng.uniform(spec.min_size, spec.max_size);
    const double sy = rng.uniform(spec.min_size, spec.max_size);
    const double cx = rng.uniform(minx - spec.margin, maxx + spec.margin);
    const double cy = rng.uniform(miny - spec.margin, maxy + spec.margin);
    Rect rect{cx - sx / 2, cy - sy / 2, cx + sx / 2, cy + sy / 2};
    return project_with_rect(pose, rect);
}

inline double occluded_fraction(const Observation& obs) {
    if (obs.joints == 0) return 0.0;
    int occ = 0;
    for (auto v : obs.visible) occ += (v == 0);
    return static_cast<double>(occ) / static_cast<double>(obs.joints);
}

}  // namespace didipose
