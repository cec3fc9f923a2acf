// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>

#include "fmattn/core/tensor.hpp"

namespace fmattn::core {

// ---------------------------------------------------------------------------
// Matrix products. Every element is accumulated in increasing order of the
// contraction index, so results are reproducible against a naive triple loop.
// Each call charges 2*r*k*c FLOPs to the active phase.
// ---------------------------------------------------------------------------

/// a[r x k] * b[k x c]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// a[r x k] * b[c x k]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b);

/// a[k x r]^T * b[k x c]
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b);

/// Accumulates the adjoints of c = a*b: grad_a += up*b^T, grad_b += a^T*up.
/// Either output may be null.
template <typename T>
void matmul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& upstream, Tensor<T>* grad_a,
                     Tensor<T>* grad_b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// ---------------------------------------------------------------------------
// Softmax with keep-mask and positive multiplicities:
//   o_j = w_j exp(s x_j - s x*) / sum_k w_k exp(s x_k - s x*)   over kept j,
// with x* the kept maximum and s the score scale. Masked outputs are 0.
// An empty `keep` keeps everything; empty `weights` means all ones.
// ---------------------------------------------------------------------------

template <typename T>
void softmax_row(std::span<const T> x, std::span<const std::uint8_t> keep, std::span<const T> weights,
                 std::span<T> out, T scale = T{1});

/// Given probabilities o (as produced above, multiplicities folded in) and an
/// upstream gradient g on o, writes dx_j = s * o_j * (g_j - sum_k o_k g_k).
template <typename T>
void softmax_row_backward(std::span<const T> probs, std::span<const T> upstream, std::span<T> grad_x,
                          T scale = T{1});

// ---------------------------------------------------------------------------
// Depthwise strided 1D convolution producing p summaries per window:
//   out[g*p + s][k] = sum_{t < w} kernels[k][s][t] * x[g*w + t][k]
// x: [n x d], kernels: [d x p x w], stride == w, output: [(n/w)*p x d].
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> grouped_conv1d(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride);

/// Accumulates the adjoint of grouped_conv1d into grad_x and grad_kernels
/// (either may be null).
template <typename T>
void grouped_conv1d_backward(const Tensor<T>& x, const Tensor<T>& kernels, std::size_t stride,
                             const Tensor<T>& upstream, Tensor<T>* grad_x, Tensor<T>* grad_kernels);

}  // namespace fmattn::core
