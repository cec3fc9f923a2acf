// SPDX-License-Identifier: Apache-2.0
#pragma once

// Helpers shared by the unit and acceptance suites: random tensors, error
// norms, and central finite differences.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>

#include "fmattn/core/random.hpp"
#include "fmattn/core/tensor.hpp"

namespace fmattn::testing {

using core::Tensor;

inline Tensor<double> random_matrix(std::size_t rows, std::size_t cols, core::Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    return core::uniform_tensor<double>(core::Shape{rows, cols}, rng, lo, hi);
}

template <typename T>
double max_abs(const Tensor<T>& a) {
    double best = 0;
    for (T x : a.data()) best = std::max(best, std::abs(static_cast<double>(x)));
    return best;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b)) return INFINITY;
    double best = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        best = std::max(best, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return best;
}

/// Max-norm relative error of `got` against `want`: max|got - want| / max|want|.
inline double relative_error(const Tensor<double>& got, const Tensor<double>& want) {
    const double scale = max_abs(want);
    const double diff = max_abs_diff(got, want);
    return scale > 0 ? diff / scale : diff;
}

/// Central differences of a scalar function with respect to every entry of x.
inline Tensor<double> finite_difference(Tensor<double>& x, const std::function<double()>& f, double h = 1e-5) {
    Tensor<double> grad(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = f();
        x[i] = saved - h;
        const double down = f();
        x[i] = saved;
        grad[i] = (up - down) / (2 * h);
    }
    return grad;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double sum_of_squares(const Tensor<double>& a) { return dot(a, a); }

/// Distance in units in the last place between two doubles.
inline std::uint64_t ulp_distance(double a, double b) {
    if (a == b) return 0;
    auto ordered = [](double x) {
        std::int64_t bits;
        std::memcpy(&bits, &x, sizeof bits);
        return bits < 0 ? std::numeric_limits<std::int64_t>::min() - bits : bits;
    };
    const std::int64_t ia = ordered(a), ib = ordered(b);
    return ia > ib ? static_cast<std::uint64_t>(ia - ib) : static_cast<std::uint64_t>(ib - ia);
}

}  // namespace fmattn::testing
