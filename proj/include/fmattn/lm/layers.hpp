// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fmattn/core/tensor.hpp"

// Row-wise building blocks of the transformer with their adjoints. Backward
// functions accumulate into parameter gradients and return input gradients.

namespace fmattn::lm {

template <typename T>
struct LayerNormCache {
    core::Tensor<T> normalized;  // (x - mean) * rstd
    std::vector<T> rstd;         // per row
};

/// y = gain * (x - mean) / sqrt(var + eps) + bias, per row.
template <typename T>
core::Tensor<T> layer_norm(const core::Tensor<T>& x, const core::Tensor<T>& gain, const core::Tensor<T>& bias,
                           LayerNormCache<T>* cache);

template <typename T>
core::Tensor<T> layer_norm_backward(const core::Tensor<T>& upstream, const core::Tensor<T>& gain,
                                    const LayerNormCache<T>& cache, core::Tensor<T>& grad_gain,
                                    core::Tensor<T>& grad_bias);

/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T>
core::Tensor<T> gelu(const core::Tensor<T>& x);

template <typename T>
core::Tensor<T> gelu_backward(const core::Tensor<T>& upstream, const core::Tensor<T>& x);

/// Adds `bias` to every row.
template <typename T>
void add_row_bias(core::Tensor<T>& x, const core::Tensor<T>& bias);

/// grad_bias += column sums of upstream.
template <typename T>
void row_bias_backward(const core::Tensor<T>& upstream, core::Tensor<T>& grad_bias);

/// Softmax cross-entropy per row against `targets` (negative = ignored).
/// Returns the summed loss in nats; when `grad` is non-null writes
/// scale * (softmax - onehot) on counted rows and zero elsewhere.
template <typename T>
double cross_entropy(const core::Tensor<T>& logits, std::span<const int> targets, T scale, core::Tensor<T>* grad);

}  // namespace fmattn::lm
