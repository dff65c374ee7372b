#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace scalpel {

// All randomness flows from one root seed through named substreams so that
// stages are reproducible independently of each other.
inline std::uint64_t substream_seed(std::uint64_t root, std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : name) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    std::uint64_t z = root + 0x9e3779b97f4a7c15ull * (h | 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t root, std::string_view name) {
    return Rng(substream_seed(root, name));
}

// Hand-rolled draws instead of <random> distributions: the standard leaves
// distribution algorithms implementation-defined, and artifacts must be
// byte-identical across toolchains.
inline std::uint64_t rand_below(Rng& rng, std::uint64_t n) {
    return rng() % n;
}

inline double rand_unit(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double rand_normal(Rng& rng) {
    // Box-Muller, one value per call (spare discarded for simplicity).
    double u1 = rand_unit(rng);
    double u2 = rand_unit(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace scalpel
