#pragma once

#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>

namespace didipose {

static_assert(std::endian::native == std::endian::little,
              "checkpoint/dataset binary layout assumes a little-endian host");

// Error taxonomy maps onto CLI exit codes: config=2, data=3, divergence=4.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class DivergenceError : public std::runtime_error {
public:
    explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape mismatch in a tensor op; message names the op and the offending shapes.
class DimensionError : public ConfigError {
public:
    explicit DimensionError(const std::string& msg) : ConfigError(msg) {}
};

// Degenerate joint configuration (e.g. collinear) in Procrustes alignment.
class AlignmentError : public DataError {
public:
    explicit AlignmentError(const std::string& msg) : DataError(msg) {}
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    std::uint64_t s = a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2));
    std::uint64_t x = splitmix64(s);
    return x ^ splitmix64(s);
}

// Deterministic counter-free PRNG. All randomness in the project flows through
// explicit Rng values; there is no global generator. fork(i) derives an
// independent stream so sample i's draws do not depend on how many draws
// earlier samples consumed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : base_(seed), state_(seed) {
        // warm up so small seeds do not produce correlated first draws
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // {0, ..., n-1}, unbiased
    std::int64_t uniform_int(std::int64_t n) {
        if (n <= 0) throw ConfigError("Rng::uniform_int: n must be positive");
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<std::int64_t>(x % un);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    Rng fork(std::uint64_t stream) const { return Rng(mix64(base_, stream + 1)); }

    std::uint64_t base_seed() const { return base_; }

private:
    std::uint64_t base_;
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// DIDIPOSE_THREADS override; default is single-threaded so runs are
// reproducible without any environment setup.
inline int thread_count() {
    if (const char* env = std::getenv("DIDIPOSE_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

}  // namespace didipose
