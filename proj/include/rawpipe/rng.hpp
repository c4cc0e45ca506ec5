#pragma once

#include <cmath>
#include <cstdint>

#include "rawpipe/tensor.hpp"

namespace rawpipe {

// Counter-based RNG. A key is derived by folding integers (seed, step,
// stage id, ...) into a 64-bit state; the i-th variate is a pure function
// of (key, i), so any stochastic stage can be replayed exactly.
struct RngKey {
    std::uint64_t state = 0x9e3779b97f4a7c15ull;

    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    RngKey fold(std::uint64_t x) const {
        RngKey k;
        k.state = mix(state ^ mix(x));
        return k;
    }

    // Uniform in (0,1]; bit pattern fully determined by (key, idx).
    double uniform(std::uint64_t idx) const {
        std::uint64_t h = mix(state ^ (idx * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull));
        return (double((h >> 11) + 1)) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; each index is an independent draw.
    double gauss(std::uint64_t idx) const {
        double u1 = uniform(2 * idx);
        double u2 = uniform(2 * idx + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // idx-th draw from [0, n)
    std::uint64_t uniform_index(std::uint64_t idx, std::uint64_t n) const {
        std::uint64_t h = mix(state ^ (idx * 0xd1342543de82ef95ull + 0x9e3779b97f4a7c15ull));
        return h % n;
    }

    double uniform_range(std::uint64_t idx, double lo, double hi) const {
        return lo + (hi - lo) * uniform(idx);
    }
};

inline Tensor randn(const std::vector<std::size_t>& shape, const RngKey& key, double stddev = 1.0) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * key.gauss(i);
    return t;
}

}  // namespace rawpipe
