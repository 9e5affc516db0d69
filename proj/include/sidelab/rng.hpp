// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.

#ifndef SIDELAB_RNG_HPP
#define SIDELAB_RNG_HPP

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include "sidelab/util.hpp"

namespace sidelab {

inline uint64_t splitmix64(uint64_t &state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Derives an independent stream seed from (root, stage tag, index).
/// Every pipeline stage draws its randomness from a seed produced here,
/// so any stage can be reproduced in isolation from the master seed.
inline uint64_t derive_seed(uint64_t root, const std::string &tag, uint64_t index = 0) {
    uint64_t s = root ^ fnv1a64(tag) ^ (index * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull);
    return splitmix64(s);
}

/// xoshiro256** with Box-Muller normals. Self-contained so that streams are
/// bit-identical across standard libraries and platforms.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (auto &w : state_)
            w = splitmix64(sm);
    }

    uint64_t next() {
        uint64_t result = rotl(state_[1] * 5, 7) * 9;
        uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return static_cast<uint64_t>(uniform() * static_cast<double>(n)); }

    /// Standard normal (Box-Muller, one value per pair of uniforms).
    double normal() {
        double u1 = 1.0 - uniform(); // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    uint8_t byte() { return static_cast<uint8_t>(next() >> 56); }

    template <std::size_t N> std::array<uint8_t, N> bytes() {
        std::array<uint8_t, N> out{};
        for (auto &b : out)
            b = byte();
        return out;
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4]{};
};

} // namespace sidelab

#endif
