#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hpn {

// Error taxonomy mirrors the CLI exit-code contract:
// validation/parse -> 2, dependency/ordering -> 3, I/O -> 4.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : Error {
    using Error::Error;
};
struct ParseError : ValidationError {
    using ValidationError::ValidationError;
};
struct ShapeError : ValidationError {
    using ValidationError::ValidationError;
};
struct DependencyError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct ConfigError : ValidationError {
    using ValidationError::ValidationError;
};

// Deterministic RNG (splitmix64). All randomness in the project flows through
// this class; std::uniform_* distributions are avoided because their sequences
// are implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : s_(seed == 0 ? 0x9e3779b97f4a7c15ull : seed) {
        // warm up so nearby seeds diverge quickly
        for (int i = 0; i < 8; ++i) next_u64();
    }

    uint64_t next_u64() {
        // xoshiro-style splitmix step: fully portable, no state tables
        uint64_t z = (s_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // modulo bias is irrelevant at desk scale and keeps the draw portable
    uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

    int range_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
    }

    bool bernoulli(double p) { return next_double() < p; }

    double normal() {  // Box-Muller, one value per two draws, deterministic
        double u1 = next_double(), u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t s_;
};

// Stable seed derivation for named sub-streams.
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    uint64_t z = seed ^ (0x9e3779b97f4a7c15ull + (stream << 1));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

}  // namespace hpn
