// SPDX-License-Identifier: Apache-2.0
#pragma once

// Slow references. Nothing here shares code with the fast path: levels are
// decided from block arithmetic rather than interaction lists, downsampling is
// a plain loop, and the hierarchical score matrix is materialised with its
// repeated columns. Templated on the scalar so a forward-mode dual number can
// differentiate straight through the emulation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "fmattn/core/error.hpp"
#include "fmattn/core/tensor.hpp"
#include "fmattn/downsampler.hpp"
#include "fmattn/hierarchy.hpp"

namespace fmattn::oracle {

/// Forward-mode dual number: value and one directional derivative.
struct Dual {
    double v = 0;
    double d = 0;

    Dual() = default;
    Dual(double value, double derivative = 0) : v(value), d(derivative) {}

    Dual& operator+=(const Dual& o) { v += o.v; d += o.d; return *this; }
    friend Dual operator+(Dual a, const Dual& b) { return a += b; }
    friend Dual operator-(const Dual& a, const Dual& b) { return {a.v - b.v, a.d - b.d}; }
    friend Dual operator*(const Dual& a, const Dual& b) { return {a.v * b.v, a.d * b.v + a.v * b.d}; }
    friend Dual operator/(const Dual& a, const Dual& b) { return {a.v / b.v, (a.d * b.v - a.v * b.d) / (b.v * b.v)}; }
    friend Dual exp(const Dual& a) {
        const double e = std::exp(a.v);
        return {e, e * a.d};
    }
};

inline double value_of(double x) { return x; }
inline double value_of(const Dual& x) { return x.v; }
using std::exp;

template <typename S>
struct Matrix {
    std::size_t rows = 0, cols = 0;
    std::vector<S> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, S{0}) {}

    S& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    const S& operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }
};

/// Kernels laid out as kernels[stream][level - 1][(k * p + s) * m_l + t].
template <typename S>
struct EmulationWeights {
    HierarchyConfig config;
    std::size_t d = 0;
    bool has_query = false;
    std::array<std::vector<std::vector<S>>, stream_count> kernels;
};

enum class DuplicatePolicy {
    refuse,     // throw when a pair qualifies on more than one level
    count_all,  // every qualifying (pair, level) becomes its own score entry
};

/// Levels owning (i, j): 0 = fine, empty = not covered. Sets `masked` for
/// future pairs in causal mode.
inline std::vector<int> owning_levels(std::size_t i, std::size_t j, const HierarchyConfig& c, bool& masked) {
    masked = c.mode == Mode::causal && j > i;
    std::vector<int> out;
    if (masked) return out;
    auto block_gap = [](std::size_t a, std::size_t b, std::size_t size) {
        return static_cast<long>(a / size) - static_cast<long>(b / size);
    };
    const long fine_gap = block_gap(i, j, c.m);
    if (fine_gap >= -1 && fine_gap <= 1) out.push_back(0);
    for (int level = 1; level <= c.levels; ++level) {
        const std::size_t ml = c.m << (level - 1);
        const long gap = block_gap(i, j, ml);
        bool owns;
        if (c.rule == PartitionRule::fmm_parity) {
            // Separated at this size, adjacent one size up.
            const long parent_gap = block_gap(i, j, 2 * ml);
            owns = std::labs(gap) >= 2 && std::labs(parent_gap) <= 1;
        } else {
            owns = gap == 2 || gap == 3 || gap == -2 || gap == -3;
        }
        if (owns) out.push_back(level);
    }
    return out;
}

/// Summaries of x on `level`: out[g p + s][k] = sum_t w[k][s][t] x[g m_l + t][k].
template <typename S>
Matrix<S> summarise(const Matrix<S>& x, const EmulationWeights<S>& w, Stream stream, int level) {
    const auto& c = w.config;
    const std::size_t ml = c.m << (level - 1), p = c.p, groups = c.n / ml;
    const auto& kernel = w.kernels[static_cast<std::size_t>(stream)].at(level - 1);
    const bool causal_query = stream == Stream::query && c.mode == Mode::causal;
    Matrix<S> out(groups * p, x.cols);
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t s = 0; s < p; ++s)
            for (std::size_t k = 0; k < x.cols; ++k) {
                // Causal query summaries read only up to the first row that uses them.
                const std::size_t taps = causal_query ? s * (ml / p) + 1 : ml;
                S acc{0};
                for (std::size_t t = 0; t < taps; ++t) acc += kernel[(k * p + s) * ml + t] * x(g * ml + t, k);
                out(g * p + s, k) = acc;
            }
    return out;
}

namespace detail {

template <typename S>
S row_dot(const Matrix<S>& a, std::size_t i, const Matrix<S>& b, std::size_t j) {
    S acc{0};
    for (std::size_t k = 0; k < a.cols; ++k) acc += a(i, k) * b(j, k);
    return acc;
}

template <typename S>
void softmax_accumulate(const std::vector<S>& scores, const std::vector<const S*>& values, std::size_t d,
                        double scale, S* out) {
    if (scores.empty()) return;
    double best = value_of(scores[0]) * scale;
    for (const auto& s : scores) best = std::max(best, value_of(s) * scale);
    std::vector<S> e(scores.size());
    S total{0};
    for (std::size_t j = 0; j < scores.size(); ++j) {
        e[j] = exp(scores[j] * S{scale} - S{best});
        total += e[j];
    }
    for (std::size_t j = 0; j < scores.size(); ++j) {
        const S a = e[j] / total;
        for (std::size_t k = 0; k < d; ++k) out[k] += a * values[j][k];
    }
}

template <typename S>
Matrix<S> emulate(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v, const EmulationWeights<S>& w,
                  DuplicatePolicy policy, bool linear) {
    const auto& c = w.config;
    if (q.rows != c.n || k.rows != c.n || v.rows != c.n || q.cols != k.cols || q.cols != v.cols)
        throw ShapeError("oracle: Q, K, V must be [n x d]");
    if (c.n > 4096) throw ConfigError("oracle: n too large for dense emulation");
    const std::size_t n = c.n, d = q.cols;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<Matrix<S>> ks, vs, qs;
    for (int level = 1; level <= c.levels; ++level) {
        ks.push_back(summarise(k, w, Stream::key, level));
        vs.push_back(summarise(v, w, Stream::value, level));
        if (linear) qs.push_back(summarise(q, w, Stream::query, level));
    }

    Matrix<S> out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        // One entry per (column, level): repeated coarse columns stay repeated.
        std::vector<std::vector<S>> scores(c.levels + 1);
        std::vector<std::vector<const S*>> values(c.levels + 1);
        for (std::size_t j = 0; j < n; ++j) {
            bool masked = false;
            const auto levels = owning_levels(i, j, c, masked);
            if (masked || levels.empty()) continue;
            if (levels.size() > 1 && policy == DuplicatePolicy::refuse)
                throw ConfigError("oracle: pair (" + std::to_string(i) + ", " + std::to_string(j) + ") lies on " +
                                  std::to_string(levels.size()) + " levels; pass DuplicatePolicy::count_all");
            for (int level : levels) {
                const std::size_t bucket = linear ? static_cast<std::size_t>(level) : 0;
                if (level == 0) {
                    scores[bucket].push_back(row_dot(q, i, k, j));
                    values[bucket].push_back(&v.data[j * d]);
                    continue;
                }
                const std::size_t ml = c.m << (level - 1);
                const std::size_t col = j * c.p / ml;
                const std::size_t qrow = linear ? i * c.p / ml : i;
                const Matrix<S>& queries = linear ? qs[level - 1] : q;
                scores[bucket].push_back(row_dot(queries, qrow, ks[level - 1], col));
                values[bucket].push_back(&vs[level - 1].data[col * d]);
            }
        }
        for (std::size_t b = 0; b <= static_cast<std::size_t>(c.levels); ++b)
            softmax_accumulate(scores[b], values[b], d, scale, &out.data[i * d]);
    }
    return out;
}

}  // namespace detail

/// Literal score matrix with repeated columns and one softmax per row.
template <typename S>
Matrix<S> emulate_fma(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v, const EmulationWeights<S>& w,
                      DuplicatePolicy policy = DuplicatePolicy::refuse) {
    return detail::emulate(q, k, v, w, policy, false);
}

/// As emulate_fma but with summarised queries on coarse levels and one softmax
/// per (row, level).
template <typename S>
Matrix<S> emulate_fma_linear(const Matrix<S>& q, const Matrix<S>& k, const Matrix<S>& v,
                             const EmulationWeights<S>& w, DuplicatePolicy policy = DuplicatePolicy::refuse) {
    if (w.config.levels > 0 && !w.has_query) throw ConfigError("oracle: linear emulation needs query weights");
    return detail::emulate(q, k, v, w, policy, true);
}

// --- Tensor<double> entry points ---------------------------------------------

Matrix<double> to_matrix(const core::Tensor<double>& t);
core::Tensor<double> to_tensor(const Matrix<double>& m);
EmulationWeights<double> emulation_weights(const DownsampleWeights<double>& weights);

/// softmax(Q K^T / sqrt(d)) V with plain loops; causal mode masks j > i.
core::Tensor<double> dense_attention(const core::Tensor<double>& q, const core::Tensor<double>& k,
                                     const core::Tensor<double>& v, Mode mode);

core::Tensor<double> dense_fma_emulation(const core::Tensor<double>& q, const core::Tensor<double>& k,
                                         const core::Tensor<double>& v, const DownsampleWeights<double>& weights,
                                         const HierarchyConfig& config,
                                         DuplicatePolicy policy = DuplicatePolicy::refuse);

core::Tensor<double> dense_fma_linear_emulation(const core::Tensor<double>& q, const core::Tensor<double>& k,
                                                const core::Tensor<double>& v,
                                                const DownsampleWeights<double>& weights,
                                                const HierarchyConfig& config,
                                                DuplicatePolicy policy = DuplicatePolicy::refuse);

}  // namespace fmattn::oracle
