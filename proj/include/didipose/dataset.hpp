#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "didipose/observation.hpp"
#include "didipose/skeleton.hpp"

namespace didipose {

struct Sample {
    Pose pose;
    Observation obs;
};

struct PoseDataset {
    SkeletonDef skeleton;
    std::vector<Sample> samples;
    std::uint64_t seed = 0;
    std::string split = "train";
    std::string config_hash;  // provenance of the generating config; may be empty
};

// Sample i draws from an rng stream forked at i, so generation parallelises
// and is independent of batch boundaries.
inline PoseDataset generate_dataset(const SkeletonDef& skel, const OccluderSpec& occ, int count,
                                    std::uint64_t seed, const std::string& split) {
    skel.validate();
    occ.validate();
    if (count < 0) throw ConfigError("generate_dataset: count must be nonnegative");
    PoseDataset ds;
    ds.skeleton = skel;
    ds.seed = seed;
    ds.split = split;
    const Rng base(seed);
    ds.samples.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        Rng rng = base.fork(static_cast<std::uint64_t>(i));
        Sample s;
        s.pose = generate_pose(skel, rng);
        s.obs = project_and_occlude(s.pose, occ, rng);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

namespace detail {

inline nlohmann::json skeleton_to_json(const SkeletonDef& s) {
    nlohmann::json o;
    o["joints"] = s.joint_count;
    o["parent"] = s.parent;
    o["bone_length_mm"] = s.bone_length_mm;
    o["rest_dir"] = s.rest_dir;
    o["angle_min"] = s.angle_min;
    o["angle_max"] = s.angle_max;
    return o;
}

inline SkeletonDef skeleton_from_json(const nlohmann::json& o) {
    SkeletonDef s;
    s.joint_count = o.at("joints").get<int>();
    s.parent = o.at("parent").get<std::vector<int>>();
    s.bone_length_mm = o.at("bone_length_mm").get<std::vector<double>>();
    s.rest_dir = o.at("rest_dir").get<std::vector<std::array<double, 3>>>();
    s.angle_min = o.at("angle_min").get<std::vector<std::array<double, 3>>>();
    s.angle_max = o.at("angle_max").get<std::vector<std::array<double, 3>>>();
    s.validate();
    return s;
}

}  // namespace detail

// Line-delimited text format: one JSON header line (skeleton, seed, split,
// count) followed by one JSON object per sample. Doubles are serialized as
// shortest round-trip decimals, so write/read is bit-exact.
inline void write_dataset(const PoseDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("dataset: cannot open '" + path + "' for writing");
    nlohmann::json header;
    header["format"] = "didipose-dataset";
    header["version"] = 1;
    header["skeleton"] = detail::skeleton_to_json(ds.skeleton);
    header["seed"] = ds.seed;
    header["split"] = ds.split;
    header["count"] = ds.samples.size();
    header["config_hash"] = ds.config_hash;
    out << header.dump() << "\n";
    for (const Sample& s : ds.samples) {
        nlohmann::json o;
        auto coords = nlohmann::json::array();
        for (int j = 0; j < s.pose.joints; ++j)
            coords.push_back({s.pose.at(j, 0), s.pose.at(j, 1), s.pose.at(j, 2)});
        o["coords"] = coords;
        auto proj = nlohmann::json::array();
        for (int j = 0; j < s.obs.joints; ++j) proj.push_back({s.obs.px(j), s.obs.py(j)});
        o["proj2d"] = proj;
        auto vis = nlohmann::json::array();
        for (auto v : s.obs.visible) vis.push_back(v != 0);
        o["visible"] = vis;
        o["occluder"] = {s.obs.occluder.x0, s.obs.occluder.y0, s.obs.occluder.x1, s.obs.occluder.y1};
        out << o.dump() << "\n";
    }
    if (!out) throw DataError("dataset: write failed for '" + path + "'");
}

inline PoseDataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("dataset: cannot open '" + path + "'");
    std::string line;
    long line_no = 0;

    auto parse_line = [&](const std::string& text) -> nlohmann::json {
        try {
            return nlohmann::json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw DataError("dataset: parse error at line " + std::to_string(line_no) + ", byte " +
                            std::to_string(e.byte) + ": " + e.what());
        }
    };

    if (!std::getline(in, line)) throw DataError("dataset: '" + path + "' is empty");
    ++line_no;
    const nlohmann::json header = parse_line(line);
    try {
        if (header.at("format").get<std::string>() != "didipose-dataset")
            throw DataError("dataset: '" + path + "' has unknown format tag");
        PoseDataset ds;
        ds.skeleton = detail::skeleton_from_json(header.at("skeleton"));
        ds.seed = header.at("seed").get<std::uint64_t>();
        ds.split = header.at("split").get<std::string>();
        ds.config_hash = header.value("config_hash", "");
        const std::size_t count = header.at("count").get<std::size_t>();
        const int joints = ds.skeleton.joint_count;

        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const nlohmann::json o = parse_line(line);
            Sample s;
            const auto& coords = o.at("coords");
            if (static_cast<int>(coords.size()) != joints)
                throw DataError("dataset: line " + std::to_string(line_no) + ": expected " +
                                std::to_string(joints) + " joints, got " + std::to_string(coords.size()));
            s.pose = Pose(joints);
            for (int j = 0; j < joints; ++j)
                for (int c = 0; c < 3; ++c)
                    s.pose.at(j, c) = coords.at(static_cast<std::size_t>(j)).at(static_cast<std::size_t>(c)).get<double>();
            const auto& proj = o.at("proj2d");
            const auto& vis = o.at("visible");
            if (static_cast<int>(proj.size()) != joints || static_cast<int>(vis.size()) != joints)
                throw DataError("dataset: line " + std::to_string(line_no) + ": proj2d/visible size mismatch");
            s.obs.joints = joints;
            s.obs.proj2d.resize(static_cast<std::size_t>(joints) * 2);
            s.obs.visible.resize(static_cast<std::size_t>(joints));
            for (int j = 0; j < joints; ++j) {
                s.obs.proj2d[static_cast<std::size_t>(j) * 2] =
                    proj.at(static_cast<std::size_t>(j)).at(0).get<double>();
                s.obs.proj2d[static_cast<std::size_t>(j) * 2 + 1] =
                    proj.at(static_cast<std::size_t>(j)).at(1).get<double>();
                s.obs.visible[static_cast<std::size_t>(j)] = vis.at(static_cast<std::size_t>(j)).get<bool>() ? 1 : 0;
            }
            const auto& occ = o.at("occluder");
            s.obs.occluder = Rect{occ.at(0).get<double>(), occ.at(1).get<double>(), occ.at(2).get<double>(),
                                  occ.at(3).get<double>()};
            ds.samples.push_back(std::move(s));
        }
        if (ds.samples.size() != count)
            throw DataError("dataset: '" + path + "' header announces " + std::to_string(count) +
                            " samples but file holds " + std::to_string(ds.samples.size()));
        return ds;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("dataset: schema error in '" + path + "' near line " + std::to_string(line_no) +
                        ": " + e.what());
    }
}

inline bool same_skeleton(const SkeletonDef& a, const SkeletonDef& b) {
    return a.joint_count == b.joint_count && a.parent == b.parent &&
           a.bone_length_mm == b.bone_length_mm && a.rest_dir == b.rest_dir &&
           a.angle_min == b.angle_min && a.angle_max == b.angle_max;
}

}  // namespace didipose
