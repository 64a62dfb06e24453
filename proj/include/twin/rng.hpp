#pragma once

#include <cstdint>
#include <random>

#include "twin/numerics.hpp"

// Seed derivation and parameter-filling helpers. Sub-seeds are mixed with
// splitmix64 so that parallel per-user / per-head generation matches the
// serial order exactly.

namespace twin {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a,
                                 std::uint64_t b = 0, std::uint64_t c = 0) {
    std::uint64_t h = splitmix64(master ^ 0x5851f42d4c957f2dULL);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    return h;
}

using Rng = std::mt19937_64;

inline void fill_gaussian(Matrix& m, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : m.data) x = dist(rng);
}

inline void fill_gaussian(Vector& v, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& x : v) x = dist(rng);
}

}  // namespace twin
