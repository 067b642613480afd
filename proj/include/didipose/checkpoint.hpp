#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "didipose/tensor.hpp"

namespace didipose {

// Parameter checkpoint file:
//   line 1: "DIDIPOSE-CKPT v1"
//   line 2: one JSON object {"dtype":"f64","meta":{...},"tensors":[{"name":..,"shape":[..]},..]}
//   then:   raw little-endian FP64 buffers, concatenated in manifest order.
// meta carries the owning module's config header (fsq levels, schedule
// endpoints, dims, optimizer step counter, ...).

inline constexpr const char* kCheckpointMagic = "DIDIPOSE-CKPT v1";

struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Tensor>> tensors;  // manifest order

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw DataError("checkpoint: missing tensor '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }
};

inline void save_checkpoint(const std::string& path, const nlohmann::json& meta,
                            const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    nlohmann::json header;
    header["dtype"] = "f64";
    header["meta"] = meta;
    auto manifest = nlohmann::json::array();
    for (const auto& [name, t] : tensors) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t->shape();
        manifest.push_back(e);
    }
    header["tensors"] = manifest;
    out << kCheckpointMagic << "\n" << header.dump() << "\n";
    for (const auto& [name, t] : tensors) {
        out.write(reinterpret_cast<const char*>(t->data()),
                  static_cast<std::streamsize>(t->size() * static_cast<std::int64_t>(sizeof(double))));
    }
    if (!out) throw DataError("checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
    std::string magic, header_line;
    if (!std::getline(in, magic) || magic != kCheckpointMagic)
        throw DataError("checkpoint: bad magic in '" + path + "'");
    if (!std::getline(in, header_line)) throw DataError("checkpoint: missing header in '" + path + "'");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_line);
    } catch (const nlohmann::json::parse_error& e) {
        throw DataError("checkpoint: malformed header in '" + path + "': " + e.what());
    }
    if (header.value("dtype", "") != "f64") throw DataError("checkpoint: unsupported dtype");
    Checkpoint ck;
    ck.meta = header.value("meta", nlohmann::json::object());
    for (const auto& e : header.at("tensors")) {
        Shape shape = e.at("shape").get<Shape>();
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.mut()),
                static_cast<std::streamsize>(t.size() * static_cast<std::int64_t>(sizeof(double))));
        if (!in) throw DataError("checkpoint: truncated buffer for '" + e.at("name").get<std::string>() + "'");
        ck.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
    return ck;
}

}  // namespace didipose
