// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "fmattn/core/tensor.hpp"

namespace fmattn::core {

/// Seeded generator. The value mappings are written out instead of using
/// <random> distributions so streams are identical across standard libraries.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n; }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

  private:
    std::mt19937_64 engine_;
};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& x : t.data()) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double stddev = 1.0) {
    Tensor<T> t(std::move(shape));
    for (auto& x : t.data()) x = static_cast<T>(stddev * rng.normal());
    return t;
}

}  // namespace fmattn::core
