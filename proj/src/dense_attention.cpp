// SPDX-License-Identifier: Apache-2.0
#include "fmattn/dense_attention.hpp"

#include <cmath>

#include "fmattn/core/counters.hpp"
#include "fmattn/core/ops.hpp"

namespace fmattn {

using core::Tensor;

template <typename T>
DenseResult<T> dense_forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Mode mode) {
    if (q.rank() != 2 || !q.same_shape(k) || !q.same_shape(v) || q.cols() == 0)
        throw ShapeError("dense_forward: Q, K, V must share one [n x d] shape");
    q.require_finite("dense_forward");
    k.require_finite("dense_forward");
    v.require_finite("dense_forward");
    const std::size_t n = q.rows();

    DenseResult<T> result;
    auto& tape = result.tape;
    tape.mode = mode;
    tape.scale = T{1} / std::sqrt(static_cast<T>(q.cols()));
    tape.q = q;
    tape.k = k;
    tape.v = v;
    {
        core::PhaseScope phase(core::Phase::score);
        tape.probs = core::matmul_nt(q, k);
    }
    core::add_score_entries(tape.probs.size());
    {
        core::PhaseScope phase(core::Phase::softmax);
        for (std::size_t i = 0; i < n; ++i) {
            auto row = tape.probs.row(i);
            const std::size_t live = mode == Mode::causal ? i + 1 : n;
            const auto head = row.first(live);
            core::softmax_row<T>(head, {}, {}, head, tape.scale);
            std::fill(row.begin() + live, row.end(), T{0});
        }
    }
    core::PhaseScope phase(core::Phase::aggregate);
    result.output = core::matmul(tape.probs, v);
    return result;
}

template <typename T>
void dense_backward(const DenseTape<T>& tape, const Tensor<T>& upstream, AttentionGrads<T>& grads) {
    if (!tape.recorded()) throw MissingActivation("dense_backward: tape holds no forward pass");
    if (!upstream.same_shape(tape.q)) throw ShapeError("dense_backward: upstream " + core::shape_string(upstream.shape()));
    if (!grads.q.same_shape(tape.q) || !grads.k.same_shape(tape.k) || !grads.v.same_shape(tape.v))
        throw ShapeError("dense_backward: gradient buffers do not match the tape");
    const std::size_t n = tape.q.rows();

    Tensor<T> grad_probs;
    {
        core::PhaseScope phase(core::Phase::aggregate);
        grad_probs = core::matmul_nt(upstream, tape.v);
        grads.v += core::matmul_tn(tape.probs, upstream);
    }
    {
        core::PhaseScope phase(core::Phase::softmax);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t live = tape.mode == Mode::causal ? i + 1 : n;
            auto g = grad_probs.row(i);
            core::softmax_row_backward<T>(tape.probs.row(i).first(live), g.first(live), g.first(live), tape.scale);
            std::fill(g.begin() + live, g.end(), T{0});
        }
    }
    core::PhaseScope phase(core::Phase::score);
    grads.q += core::matmul(grad_probs, tape.k);
    grads.k += core::matmul_tn(grad_probs, tape.q);
}

template DenseResult<float> dense_forward(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, Mode);
template DenseResult<double> dense_forward(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&, Mode);
template void dense_backward(const DenseTape<float>&, const Tensor<float>&, AttentionGrads<float>&);
template void dense_backward(const DenseTape<double>&, const Tensor<double>&, AttentionGrads<double>&);

}  // namespace fmattn
