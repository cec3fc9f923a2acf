// SPDX-License-Identifier: Apache-2.0
#include "fmattn/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fmattn::core {

namespace {

// out[r x c] += a[r x k] * b[k x c]. Four output rows share each streamed row
// of b; every element still accumulates in increasing k.
template <typename T>
void gemm_nn_accumulate(std::size_t r, std::size_t k, std::size_t c, const T* __restrict a, const T* __restrict b,
                        T* __restrict out) {
    std::size_t i = 0;
    for (; i + 4 <= r; i += 4) {
        T* __restrict c0 = out + (i + 0) * c;
        T* __restrict c1 = out + (i + 1) * c;
        T* __restrict c2 = out + (i + 2) * c;
        T* __restrict c3 = out + (i + 3) * c;
        const T* a0 = a + (i + 0) * k;
        const T* a1 = a + (i + 1) * k;
        const T* a2 = a + (i + 2) * k;
        const T* a3 = a + (i + 3) * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T* __restrict brow = b + kk * c;
            const T x0 = a0[kk], x1 = a1[kk], x2 = a2[kk], x3 = a3[kk];
            for (std::size_t j = 0; j < c; ++j) {
                const T bv = brow[j];
                c0[j] += x0 * bv;
                c1[j] += x1 * bv;
                c2[j] += x2 * bv;
                c3[j] += x3 * bv;
            }
        }
    }
    for (; i < r; ++i) {
        T* __restrict ci = out + i * c;
        const T* ai = a + i * k;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T* __restrict brow = b + kk * c;
            const T x = ai[kk];
            for (std::size_t j = 0; j < c; ++j) ci[j] += x * brow[j];
        }
    }
}

// out[r x c] += a[k x r]^T * b[k x c]
template <typename T>
void gemm_tn_accumulate(std::size_t r, std::size_t k, std::size_t c, const T* __restrict a, const T* __restrict b,
                        T* __restrict out) {
    for (std::size_t kk = 0; kk < k; ++kk) {
        const T* __restrict brow = b + kk * c;
        const T* arow = a + kk * r;
        for (std::size_t i = 0; i < r; ++i) {
            const T x = arow[i];
            T* __restrict ci = out + i * c;
            for (std::size_t j = 0; j < c; ++j) ci[j] += x * brow[j];
        }
    }
}

template <typename T>
void require_matrix(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

}  // namespace

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    require_matrix(a, "transpose");
    Tensor<T> out = Tensor<T>::matrix(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    Tensor<T> out = Tensor<T>::matrix(a.rows(), b.cols());
    gemm_nn_accumulate(a.rows(), a.cols(), b.cols(), a.data().data(), b.data().data(), out.data().data());
    add_flops(2ull * a.rows() * a.cols() * b.cols());
    out.require_finite("matmul");
    return out;
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
    const Tensor<T> bt = transpose(b);
    Tensor<T> out = Tensor<T>::matrix(a.rows(), b.rows());
    gemm_nn_accumulate(a.rows(), a.cols(), b.rows(), a.data().data(), bt.data().data(), out.data().data());
    add_flops(2ull * a.rows() * a.cols() * b.rows());
    out.require_finite("matmul_nt");
    return out;
}

template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn: " + shape_string(a.shape()) + "^T x " + shape_string(b.shape()));
    Tensor<T> out = Tensor<T>::matrix(a.cols(), b.cols());
    gemm_tn_accumulate(a.cols(), a.rows(), b.cols(), a.data().data(), b.data().data(), out.data().data());
    add_flops(2ull * a.rows() * a.cols() * b.cols());
    out.require_finite("matmul_tn");
    return out;
}

template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& upstream, Tensor<T>* grad_a,
                     Tensor<T>* grad_b) {
    require_matrix(upstream, "matmul_backward");
    if (upstream.rows() != a.rows() || upstream.cols() != b.cols() || a.cols() != b.rows())
        throw ShapeError("matmul_backward: upstream " + shape_string(upstream.shape()) + " for " +
                         shape_string(a.shape()) + " x " + shape_string(b.shape()));
    if (grad_a) {
        if (!grad_a->same_shape(a)) throw ShapeError("matmul_backward: grad_a shape");
        const Tensor<T> bt = transpose(b);
        gemm_nn_accumulate(a.rows(), b.cols(), a.cols(), upstream.data().data(), bt.data().data(),
                           grad_a->data().data());
        add_flops(2ull * a.rows() * a.cols() * b.cols());
        grad_a->require_finite("matmul_backward");
    }
    if (grad_b) {
        if (!grad_b->same_shape(b)) throw ShapeError("matmul_backward: grad_b shape");
        gemm_tn_accumulate(a.cols(), a.rows(), b.cols(), a.data().data(), upstream.data().data(),
                           grad_b->data().data());
        add_flops(2ull * a.rows() * a.cols() * b.cols());
        grad_b->require_finite("matmul_backward");
    }
}

template <typename T>
void softmax_row(std::span<const T> x, std::span<const std::uint8_t> keep, std::span<const T> weights,
                 std::span<T> out, T scale) {
    const std::size_t n = x.size();
    if (out.size() != n || (!keep.empty() && keep.size() != n) || (!weights.empty() && weights.size() != n))
        throw ShapeError("softmax_row: length mismatch");
    auto kept = [&](std::size_t j) { return keep.empty() || keep[j] != 0; };

    T best = -std::numeric_limits<T>::infinity();
    std::size_t n_kept = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (!kept(j)) continue;
        if (!std::isfinite(x[j])) throw NumericError("softmax_row: non-finite input");
        best = std::max(best, scale * x[j]);
        ++n_kept;
    }
    if (n_kept == 0) throw std::domain_error("softmax_row: all entries masked");

    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (!kept(j)) {
            out[j] = 0;
            continue;
        }
        const T w = weights.empty() ? T{1} : weights[j];
        if (!(w > 0)) throw std::domain_error("softmax_row: multiplicities must be positive");
        out[j] = w * std::exp(scale * x[j] - best);
        total += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= total;
    add_flops(5ull * n_kept);
}

template <typename T>
void softmax_row_backward(std::span<const T> probs, std::span<const T> upstream, std::span<T> grad_x, T scale) {
    const std::size_t n = probs.size();
    if (upstream.size() != n || grad_x.size() != n) throw ShapeError("softmax_row_backward: length mismatch");
    T dot = 0;
    for (std::size_t j = 0; j < n; ++j) dot += probs[j] * upstream[j];
    for (std::size_t j = 0; j < n; ++j) grad_x[j] = scale * probs[j] * (upstream[j] - dot);
    add_flops(5ull * n);
}

namespace {

template <typename T>
void check_conv_shapes(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride, const char* op) {
    if (x.rank() != 2 || kernels.rank() != 3)
        throw ShapeError(std::string(op) + ": expected x[n x d] and kernels[d x p x w]");
    if (kernels.extent(0) != x.cols())
        throw ShapeError(std::string(op) + ": kernel channels " + std::to_string(kernels.extent(0)) + " vs d=" +
                         std::to_string(x.cols()));
    if (stride == 0 || kernels.extent(2) != stride)
        throw ShapeError(std::string(op) + ": stride must equal kernel width");
    if (x.rows() % stride != 0)
        throw ShapeError(std::string(op) + ": stride " + std::to_string(stride) + " does not divide n=" +
                         std::to_string(x.rows()));
}

// kernels[d][p][w] -> [p][w][d] so the channel loop is contiguous.
template <typename T>
std::vector<T> channel_last(const Tensor<T>& kernels) {
    const std::size_t d = kernels.extent(0), p = kernels.extent(1), w = kernels.extent(2);
    std::vector<T> out(d * p * w);
    for (std::size_t k = 0; k < d; ++k)
        for (std::size_t s = 0; s < p; ++s)
            for (std::size_t t = 0; t < w; ++t) out[(s * w + t) * d + k] = kernels(k, s, t);
    return out;
}

}  // namespace

template <typename T>
Tensor<T> grouped_conv1d(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride) {
    check_conv_shapes(x, kernels, stride, "grouped_conv1d");
    const std::size_t n = x.rows(), d = x.cols(), p = kernels.extent(1), w = stride;
    const std::size_t groups = n / w;
    const std::vector<T> kt = channel_last(kernels);
    Tensor<T> out = Tensor<T>::matrix(groups * p, d);
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t s = 0; s < p; ++s) {
            T* __restrict o = out.row(g * p + s).data();
            for (std::size_t t = 0; t < w; ++t) {
                const T* __restrict xr = x.row(g * w + t).data();
                const T* __restrict kr = kt.data() + (s * w + t) * d;
                for (std::size_t k = 0; k < d; ++k) o[k] += kr[k] * xr[k];
            }
        }
    }
    add_flops(2ull * groups * p * w * d);
    out.require_finite("grouped_conv1d");
    return out;
}

template <typename T>
void grouped_conv1d_backward(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride,
                             const Tensor<T>& upstream, Tensor<T>* grad_x, Tensor<T>* grad_kernels) {
    check_conv_shapes(x, kernels, stride, "grouped_conv1d_backward");
    const std::size_t n = x.rows(), d = x.cols(), p = kernels.extent(1), w = stride;
    const std::size_t groups = n / w;
    if (upstream.rank() != 2 || upstream.rows() != groups * p || upstream.cols() != d)
        throw ShapeError("grouped_conv1d_backward: upstream " + shape_string(upstream.shape()));
    if (grad_x) {
        if (!grad_x->same_shape(x)) throw ShapeError("grouped_conv1d_backward: grad_x shape");
        const std::vector<T> kt = channel_last(kernels);
        for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t t = 0; t < w; ++t) {
                T* __restrict gx = grad_x->row(g * w + t).data();
                for (std::size_t s = 0; s < p; ++s) {
                    const T* __restrict u = upstream.row(g * p + s).data();
                    const T* __restrict kr = kt.data() + (s * w + t) * d;
                    for (std::size_t k = 0; k < d; ++k) gx[k] += kr[k] * u[k];
                }
            }
        add_flops(2ull * groups * p * w * d);
        grad_x->require_finite("grouped_conv1d_backward");
    }
    if (grad_kernels) {
        if (!grad_kernels->same_shape(kernels)) throw ShapeError("grouped_conv1d_backward: grad_kernels shape");
        std::vector<T> acc(p * w * d, T{0});
        for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t s = 0; s < p; ++s) {
                const T* __restrict u = upstream.row(g * p + s).data();
                for (std::size_t t = 0; t < w; ++t) {
                    const T* __restrict xr = x.row(g * w + t).data();
                    T* __restrict a = acc.data() + (s * w + t) * d;
                    for (std::size_t k = 0; k < d; ++k) a[k] += u[k] * xr[k];
                }
            }
        for (std::size_t k = 0; k < d; ++k)
            for (std::size_t s = 0; s < p; ++s)
                for (std::size_t t = 0; t < w; ++t) (*grad_kernels)(k, s, t) += acc[(s * w + t) * d + k];
        add_flops(2ull * groups * p * w * d);
        grad_kernels->require_finite("grouped_conv1d_backward");
    }
}

#define FMATTN_INSTANTIATE_OPS(T)                                                                              \
    template Tensor<T> transpose(const Tensor<T>&);                                                            \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                             \
    template Tensor<T> matmul_nt(const Tensor<T>&, const Tensor<T>&);                                          \
    template Tensor<T> matmul_tn(const Tensor<T>&, const Tensor<T>&);                                          \
    template void matmul_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*, Tensor<T>*); \
    template void softmax_row(std::span<const T>, std::span<const std::uint8_t>, std::span<const T>,            \
                              std::span<T>, T);                                                                 \
    template void softmax_row_backward(std::span<const T>, std::span<const T>, std::span<T>, T);              \
    template Tensor<T> grouped_conv1d(const Tensor<T>&, const Tensor<T>&, std::size_t);                        \
    template void grouped_conv1d_backward(const Tensor<T>&, const Tensor<T>&, std::size_t, const Tensor<T>&,   \
                                          Tensor<T>*, Tensor<T>*);

FMATTN_INSTANTIATE_OPS(float)
FMATTN_INSTANTIATE_OPS(double)

}  // namespace fmattn::core
