#pragma once

#include <cstdint>
#include <random>

namespace cwm {

// splitmix64 finalizer. Used to derive independent per-episode / per-query
// seeds from (global seed, index) so work items are reproducible regardless
// of the order they are generated in.
inline std::uint64_t mix64(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t seed) {
    return std::mt19937_64(seed);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t index) {
    return std::mt19937_64(mix64(seed, index));
}

}  // namespace cwm
