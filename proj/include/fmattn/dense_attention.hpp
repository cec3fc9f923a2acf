// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "fmattn/core/tensor.hpp"
#include "fmattn/fma.hpp"
#include "fmattn/hierarchy.hpp"

namespace fmattn {

/// Full softmax(Q K^T / sqrt(d)) V with its backward. Materialises the n x n
/// probability matrix; the causal mask is applied before the softmax.
template <typename T>
struct DenseTape {
    Mode mode = Mode::bidirectional;
    T scale = 1;
    core::Tensor<T> q, k, v;
    core::Tensor<T> probs;  // [n x n]

    bool recorded() const { return !probs.empty(); }
};

template <typename T>
struct DenseResult {
    core::Tensor<T> output;
    DenseTape<T> tape;
};

template <typename T>
DenseResult<T> dense_forward(const core::Tensor<T>& q, const core::Tensor<T>& k, const core::Tensor<T>& v, Mode mode);

template <typename T>
void dense_backward(const DenseTape<T>& tape, const core::Tensor<T>& upstream, AttentionGrads<T>& grads);

}  // namespace fmattn
