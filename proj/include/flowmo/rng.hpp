#pragma once

#include <cstdint>
#include <random>

#include "flowmo/tensor.hpp"

namespace flowmo {

using Rng = std::mt19937_64;

inline Tensor normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.vec()) v = dist(rng);
    return t;
}

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

/// Independent child stream derived from a parent seed and a tag.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
    return Rng(seq);
}

}  // namespace flowmo
