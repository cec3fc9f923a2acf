// SPDX-License-Identifier: Apache-2.0
#include "fmattn/oracle.hpp"

#include <cmath>

namespace fmattn::oracle {

Matrix<double> to_matrix(const core::Tensor<double>& t) {
    if (t.rank() != 2) throw ShapeError("oracle: expected a matrix, got " + core::shape_string(t.shape()));
    Matrix<double> m(t.rows(), t.cols());
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) m(i, j) = t(i, j);
    return m;
}

core::Tensor<double> to_tensor(const Matrix<double>& m) {
    core::Tensor<double> t(core::Shape{m.rows, m.cols});
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) t(i, j) = m(i, j);
    return t;
}

EmulationWeights<double> emulation_weights(const DownsampleWeights<double>& weights) {
    EmulationWeights<double> w;
    w.config = weights.config();
    w.d = weights.head_dim();
    w.has_query = weights.has(Stream::query);
    for (Stream stream : {Stream::key, Stream::value, Stream::query}) {
        if (!weights.has(stream)) continue;
        auto& dst = w.kernels[static_cast<std::size_t>(stream)];
        for (int level = 1; level <= weights.levels(); ++level) {
            const auto& value = weights.kernel(stream, level).value;
            const auto flat = value.data();
            dst.emplace_back(flat.begin(), flat.end());
        }
    }
    return w;
}

core::Tensor<double> dense_attention(const core::Tensor<double>& q, const core::Tensor<double>& k,
                                     const core::Tensor<double>& v, Mode mode) {
    if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
        throw ShapeError("oracle: Q, K, V must share one [n x d] shape");
    const std::size_t n = q.rows(), d = q.cols();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    core::Tensor<double> out(core::Shape{n, d});
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t live = mode == Mode::causal ? i + 1 : n;
        double best = -INFINITY;
        for (std::size_t j = 0; j < live; ++j) {
            double acc = 0;
            for (std::size_t c = 0; c < d; ++c) acc += q(i, c) * k(j, c);
            s[j] = acc * scale;
            best = std::max(best, s[j]);
        }
        double total = 0;
        for (std::size_t j = 0; j < live; ++j) {
            s[j] = std::exp(s[j] - best);
            total += s[j];
        }
        for (std::size_t j = 0; j < live; ++j)
            for (std::size_t c = 0; c < d; ++c) out(i, c) += s[j] / total * v(j, c);
    }
    return out;
}

namespace {

void check_config(const DownsampleWeights<double>& weights, const HierarchyConfig& config) {
    const auto& w = weights.config();
    if (w.n != config.n || w.m != config.m || w.p != config.p || w.levels != config.levels || w.mode != config.mode)
        throw ConfigError("oracle: weights were built for a different hierarchy");
}

}  // namespace

core::Tensor<double> dense_fma_emulation(const core::Tensor<double>& q, const core::Tensor<double>& k,
                                         const core::Tensor<double>& v, const DownsampleWeights<double>& weights,
                                         const HierarchyConfig& config, DuplicatePolicy policy) {
    check_config(weights, config);
    auto w = emulation_weights(weights);
    w.config = config;
    return to_tensor(emulate_fma(to_matrix(q), to_matrix(k), to_matrix(v), w, policy));
}

core::Tensor<double> dense_fma_linear_emulation(const core::Tensor<double>& q, const core::Tensor<double>& k,
                                                const core::Tensor<double>& v,
                                                const DownsampleWeights<double>& weights,
                                                const HierarchyConfig& config, DuplicatePolicy policy) {
    check_config(weights, config);
    auto w = emulation_weights(weights);
    w.config = config;
    return to_tensor(emulate_fma_linear(to_matrix(q), to_matrix(k), to_matrix(v), w, policy));
}

}  // namespace fmattn::oracle
