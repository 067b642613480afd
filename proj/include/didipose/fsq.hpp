#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "didipose/common.hpp"

namespace didipose {

// Finite scalar quantization. Channel i is bounded by floor(L_i/2)*tanh(.) and
// rounded, so it takes one of the L_i integer values -floor(L_i/2) ..
// +floor(L_i/2). The implied codebook has prod(L_i) entries, indexed 1..|C| by
// a mixed-radix layout with channel 0 as the least significant digit:
//   index = 1 + sum_i (code_i + floor(L_i/2)) * prod_{j<i} L_j
struct FSQConfig {
    std::vector<int> levels;

    FSQConfig() = default;
    explicit FSQConfig(std::vector<int> lv) : levels(std::move(lv)) { validate(); }

    void validate() const {
        if (levels.empty()) throw ConfigError("fsq: levels list must be nonempty");
        for (int l : levels)
            if (l < 3 || l % 2 == 0)
                throw ConfigError("fsq: each level must be an odd integer >= 3, got " + std::to_string(l));
    }

    int dims() const { return static_cast<int>(levels.size()); }

    std::int64_t codebook_size() const {
        std::int64_t n = 1;
        for (int l : levels) n *= l;
        return n;
    }

    int half_level(int i) const { return levels[static_cast<std::size_t>(i)] / 2; }
};

inline double fsq_bound(double q, int level) {
    return static_cast<double>(level / 2) * std::tanh(q);
}

// code (integer lattice point) -> index in {1, .., |C|}
inline std::int64_t fsq_code_to_index(const std::vector<int>& code, const FSQConfig& fsq) {
    if (static_cast<int>(code.size()) != fsq.dims())
        throw ConfigError("fsq: code has " + std::to_string(code.size()) + " channels, expected " +
                          std::to_string(fsq.dims()));
    std::int64_t index = 0;
    std::int64_t radix = 1;
    for (int i = 0; i < fsq.dims(); ++i) {
        const int half = fsq.half_level(i);
        const int c = code[static_cast<std::size_t>(i)];
        if (c < -half || c > half)
            throw ConfigError("fsq: code channel " + std::to_string(i) + " value " + std::to_string(c) +
                              " outside [-" + std::to_string(half) + "," + std::to_string(half) + "]");
        index += static_cast<std::int64_t>(c + half) * radix;
        radix *= fsq.levels[static_cast<std::size_t>(i)];
    }
    return index + 1;
}

inline std::vector<int> fsq_index_to_code(std::int64_t index, const FSQConfig& fsq) {
    if (index < 1 || index > fsq.codebook_size())
        throw ConfigError("fsq: index " + std::to_string(index) + " outside [1," +
                          std::to_string(fsq.codebook_size()) + "]");
    std::int64_t rest = index - 1;
    std::vector<int> code(static_cast<std::size_t>(fsq.dims()));
    for (int i = 0; i < fsq.dims(); ++i) {
        const int l = fsq.levels[static_cast<std::size_t>(i)];
        code[static_cast<std::size_t>(i)] = static_cast<int>(rest % l) - fsq.half_level(i);
        rest /= l;
    }
    return code;
}

struct FSQResult {
    std::vector<int> code;
    std::int64_t index = 0;
};

inline FSQResult fsq_quantize(const std::vector<double>& q_vec, const FSQConfig& fsq) {
    if (static_cast<int>(q_vec.size()) != fsq.dims())
        throw ConfigError("fsq: vector has " + std::to_string(q_vec.size()) + " channels, expected " +
                          std::to_string(fsq.dims()));
    FSQResult r;
    r.code.resize(q_vec.size());
    for (int i = 0; i < fsq.dims(); ++i) {
        const double q = q_vec[static_cast<std::size_t>(i)];
        if (!std::isfinite(q)) throw DataError("fsq: non-finite input in channel " + std::to_string(i));
        r.code[static_cast<std::size_t>(i)] =
            static_cast<int>(std::round(fsq_bound(q, fsq.levels[static_cast<std::size_t>(i)])));
    }
    r.index = fsq_code_to_index(r.code, fsq);
    return r;
}

}  // namespace didipose
