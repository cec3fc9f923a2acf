// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fmattn/core/tensor.hpp"
#include "fmattn/downsampler.hpp"
#include "fmattn/hierarchy.hpp"
#include "fmattn/kernels.hpp"

// Fast multipole attention over one (batch, head) slice.
//
// For query row i the scores are
//   fine pairs:     Q_i . K_j                         (band of key blocks)
//   level-l pairs:  Q_i . K^l_(floor(j p / m_l))       (FMA)
//                   Q^l_(floor(i p / m_l)) . K^l_(...) (FMA-linear)
// A level-l block holds p unique columns, each repeated m_l/p times. Only the
// unique columns are stored; the repeats enter the softmax normaliser as
// multiplicity weights m_l/p.
//
// FMA applies one softmax across all levels of a row; FMA-linear normalises
// each level separately and sums the per-level outputs.

namespace fmattn {

enum class Variant { dense, fma, fma_linear };

const char* to_string(Variant variant);
Variant parse_variant(const std::string& text);

/// Scores stored without repetition. After a forward pass the tensors hold
/// probabilities with multiplicities folded in: each stored coarse entry is
/// (m_l/p) times the probability of one of its repeated columns.
template <typename T>
struct CompactScores {
    kernels::BandLayout band_layout;
    std::vector<kernels::FarFieldLayout> far_layouts;  // index level - 1
    core::Tensor<T> band;                              // [n x band width]
    std::vector<core::Tensor<T>> far;                  // per level, [rows x far width]
    std::vector<T> multiplicity;                       // per level, m_l / p

    std::size_t stored_entries() const;
};

/// Activations recorded by forward for the hand-written backward.
template <typename T>
struct AttentionTape {
    Variant variant = Variant::fma;
    std::shared_ptr<const Hierarchy> hierarchy;
    T scale = 1;  // 1/sqrt(d)
    core::Tensor<T> q, k, v;
    std::vector<core::Tensor<T>> key_summaries, value_summaries, query_summaries;  // per level
    CompactScores<T> probs;

    bool recorded() const { return hierarchy != nullptr && !q.empty(); }
};

template <typename T>
struct AttentionGrads {
    core::Tensor<T> q, k, v;

    AttentionGrads() = default;
    AttentionGrads(std::size_t n, std::size_t d)
        : q(core::Shape{n, d}), k(core::Shape{n, d}), v(core::Shape{n, d}) {}
};

template <typename T>
struct AttentionResult {
    core::Tensor<T> output;
    AttentionTape<T> tape;
};

template <typename T>
AttentionResult<T> forward(const core::Tensor<T>& q, const core::Tensor<T>& k, const core::Tensor<T>& v,
                           const DownsampleWeights<T>& weights, std::shared_ptr<const Hierarchy> hierarchy);

template <typename T>
AttentionResult<T> forward_linear(const core::Tensor<T>& q, const core::Tensor<T>& k, const core::Tensor<T>& v,
                                  const DownsampleWeights<T>& weights, std::shared_ptr<const Hierarchy> hierarchy);

/// Exact adjoint of forward / forward_linear. Accumulates into `grads` and into
/// the gradients of `weights`.
template <typename T>
void backward(const AttentionTape<T>& tape, const core::Tensor<T>& upstream, DownsampleWeights<T>& weights,
              AttentionGrads<T>& grads);

// ---------------------------------------------------------------------------
// Approximation error of one score row (p >= 1, fmm_parity only).
//
// With dK_j = K_j - K^l_(floor(j p / m_l)) for every coarse pair (row, j):
//   actual = || C_row - C~_row ||_1
//   bound  = || Q_row ||_1 * max_j || dK_j^T ||_1
// where ||.||_1 is the matrix 1-norm (maximum absolute column sum). For the
// 1 x n row this is the largest absolute entry; for Q_row (1 x d) the largest
// absolute component; for dK_j^T (d x 1) the absolute sum.
// ---------------------------------------------------------------------------

struct ErrorBoundReport {
    std::size_t row = 0;
    double actual = 0;
    double bound = 0;
    std::vector<double> level_max_deviation;  // index level - 1
};

template <typename T>
ErrorBoundReport error_bound_diagnostic(const core::Tensor<T>& q, const core::Tensor<T>& k,
                                        const DownsampleWeights<T>& weights, const Hierarchy& hierarchy,
                                        std::size_t row);

}  // namespace fmattn
