// SPDX-License-Identifier: Apache-2.0
#include "fmattn/lm/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fmattn/core/counters.hpp"

namespace fmattn::lm {

using core::Tensor;

namespace {

constexpr double layer_norm_eps = 1e-5;

void require_row_vector(const char* op, std::size_t width, std::size_t want) {
    if (width != want) throw ShapeError(std::string(op) + ": parameter width does not match input");
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, LayerNormCache<T>* cache) {
    const std::size_t rows = x.rows(), w = x.cols();
    require_row_vector("layer_norm", gain.size(), w);
    require_row_vector("layer_norm", bias.size(), w);
    Tensor<T> y(x.shape());
    Tensor<T> normalized(x.shape());
    std::vector<T> rstd(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const auto xi = x.row(i);
        T mean = 0;
        for (T v : xi) mean += v;
        mean /= static_cast<T>(w);
        T var = 0;
        for (T v : xi) var += (v - mean) * (v - mean);
        var /= static_cast<T>(w);
        rstd[i] = T{1} / std::sqrt(var + static_cast<T>(layer_norm_eps));
        auto ni = normalized.row(i);
        auto yi = y.row(i);
        for (std::size_t c = 0; c < w; ++c) {
            ni[c] = (xi[c] - mean) * rstd[i];
            yi[c] = gain[c] * ni[c] + bias[c];
        }
    }
    core::add_flops(8 * rows * w);
    if (cache) {
        cache->normalized = std::move(normalized);
        cache->rstd = std::move(rstd);
    }
    return y;
}

template <typename T>
Tensor<T> layer_norm_backward(const Tensor<T>& upstream, const Tensor<T>& gain, const LayerNormCache<T>& cache,
                              Tensor<T>& grad_gain, Tensor<T>& grad_bias) {
    const std::size_t rows = upstream.rows(), w = upstream.cols();
    Tensor<T> grad_x(upstream.shape());
    std::vector<T> g(w);
    for (std::size_t i = 0; i < rows; ++i) {
        const auto up = upstream.row(i);
        const auto ni = cache.normalized.row(i);
        T mean_g = 0, mean_gn = 0;
        for (std::size_t c = 0; c < w; ++c) {
            grad_gain[c] += up[c] * ni[c];
            grad_bias[c] += up[c];
            g[c] = up[c] * gain[c];
            mean_g += g[c];
            mean_gn += g[c] * ni[c];
        }
        mean_g /= static_cast<T>(w);
        mean_gn /= static_cast<T>(w);
        auto gx = grad_x.row(i);
        for (std::size_t c = 0; c < w; ++c) gx[c] = cache.rstd[i] * (g[c] - mean_g - ni[c] * mean_gn);
    }
    core::add_flops(10 * rows * w);
    return grad_x;
}

namespace {

template <typename T>
struct GeluTerms {
    T tanh_arg, th;
};

template <typename T>
GeluTerms<T> gelu_terms(T x) {
    const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    const T arg = k * (x + static_cast<T>(0.044715) * x * x * x);
    return {arg, std::tanh(arg)};
}

}  // namespace

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = static_cast<T>(0.5) * x[i] * (T{1} + gelu_terms(x[i]).th);
    core::add_flops(10 * x.size());
    return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& upstream, const Tensor<T>& x) {
    const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
    Tensor<T> grad(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T v = x[i];
        const T th = gelu_terms(v).th;
        const T darg = k * (T{1} + static_cast<T>(3 * 0.044715) * v * v);
        const T d = static_cast<T>(0.5) * (T{1} + th) + static_cast<T>(0.5) * v * (T{1} - th * th) * darg;
        grad[i] = upstream[i] * d;
    }
    core::add_flops(14 * x.size());
    return grad;
}

template <typename T>
void add_row_bias(Tensor<T>& x, const Tensor<T>& bias) {
    require_row_vector("add_row_bias", bias.size(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = x.row(i);
        for (std::size_t c = 0; c < r.size(); ++c) r[c] += bias[c];
    }
    core::add_flops(x.size());
}

template <typename T>
void row_bias_backward(const Tensor<T>& upstream, Tensor<T>& grad_bias) {
    for (std::size_t i = 0; i < upstream.rows(); ++i) {
        const auto r = upstream.row(i);
        for (std::size_t c = 0; c < r.size(); ++c) grad_bias[c] += r[c];
    }
}

template <typename T>
double cross_entropy(const Tensor<T>& logits, std::span<const int> targets, T scale, Tensor<T>* grad) {
    if (targets.size() != logits.rows()) throw ShapeError("cross_entropy: one target per row required");
    if (grad) *grad = Tensor<T>(logits.shape());
    const std::size_t v = logits.cols();
    double total = 0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        if (targets[i] < 0) continue;
        if (static_cast<std::size_t>(targets[i]) >= v) throw ShapeError("cross_entropy: target outside vocabulary");
        const auto row = logits.row(i);
        const T best = *std::max_element(row.begin(), row.end());
        double z = 0;
        for (T x : row) z += std::exp(static_cast<double>(x - best));
        const double log_z = std::log(z) + static_cast<double>(best);
        total += log_z - static_cast<double>(row[targets[i]]);
        if (!grad) continue;
        auto g = grad->row(i);
        for (std::size_t c = 0; c < v; ++c) g[c] = scale * static_cast<T>(std::exp(static_cast<double>(row[c]) - log_z));
        g[targets[i]] -= scale;
    }
    core::add_flops(4 * logits.size());
    if (!std::isfinite(total)) throw NumericError("cross_entropy: non-finite loss");
    return total;
}

#define FMATTN_INSTANTIATE_LAYERS(T)                                                                              \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, LayerNormCache<T>*);     \
    template Tensor<T> layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const LayerNormCache<T>&,         \
                                           Tensor<T>&, Tensor<T>&);                                              \
    template Tensor<T> gelu(const Tensor<T>&);                                                                  \
    template Tensor<T> gelu_backward(const Tensor<T>&, const Tensor<T>&);                                       \
    template void add_row_bias(Tensor<T>&, const Tensor<T>&);                                                   \
    template void row_bias_backward(const Tensor<T>&, Tensor<T>&);                                              \
    template double cross_entropy(const Tensor<T>&, std::span<const int>, T, Tensor<T>*);

FMATTN_INSTANTIATE_LAYERS(float)
FMATTN_INSTANTIATE_LAYERS(double)

}  // namespace fmattn::lm
