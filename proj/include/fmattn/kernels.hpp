// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "fmattn/core/tensor.hpp"
#include "fmattn/hierarchy.hpp"

// Block-structured contractions of the fast path.
//
//   local_outgoing   Z[i, slot]  = Q_i . K_c             c = band column of (i, slot)
//   far_outgoing     Z[r, slot]  = Q_r . K^l_(g p + s)   g = listed group, s = summary
//   local_incoming   Y_i         = sum_slot A[i, slot] V_c
//   far_incoming     Y_r         = sum_slot A[r, slot] V^l_(g p + s)
//
// Scores are stored row-major with a fixed width per row; slots outside the
// sequence, beyond a block's list, or in the causal future are absent: they
// hold 0, are skipped by every kernel, and are reported by keep().
// Each backward is the exact adjoint of its forward under the same layout.

namespace fmattn::kernels {

struct BandLayout {
    std::size_t n = 0;
    std::size_t m = 0;
    std::vector<int> offsets;  // key block offsets relative to the query block
    bool causal = false;

    static BandLayout from(const Hierarchy& hierarchy);

    std::size_t width() const { return offsets.size() * m; }

    /// Key position for (row, slot), or -1 when outside [0, n).
    long column(std::size_t row, std::size_t slot) const {
        const long block = static_cast<long>(row / m) + offsets[slot / m];
        const long c = block * static_cast<long>(m) + static_cast<long>(slot % m);
        return (block < 0 || c >= static_cast<long>(n)) ? -1 : c;
    }

    bool keep(std::size_t row, std::size_t slot) const {
        const long c = column(row, slot);
        return c >= 0 && (!causal || c <= static_cast<long>(row));
    }
};

/// View over one coarse level's interaction lists. Holds a pointer to the
/// hierarchy, which must outlive it.
struct FarFieldLayout {
    const Hierarchy* hierarchy = nullptr;
    int level = 0;
    std::size_t rows = 0;            // query rows (tokens, or query summaries)
    std::size_t rows_per_block = 0;  // consecutive rows sharing one query block
    std::size_t p = 0;
    std::size_t width = 0;  // p times the longest list at this level

    /// One row per token: rows = n, rows_per_block = m_l.
    static FarFieldLayout per_token(const Hierarchy& hierarchy, int level);
    /// One row per query summary: rows = n p / m_l, rows_per_block = p.
    static FarFieldLayout per_summary(const Hierarchy& hierarchy, int level);

    std::size_t summary_rows() const { return hierarchy->config().group_count(level) * p; }

    const std::vector<std::size_t>& groups(std::size_t row) const {
        return hierarchy->coarse_groups(level, row / rows_per_block);
    }

    bool keep(std::size_t row, std::size_t slot) const { return slot / p < groups(row).size(); }

    /// Row of K^l / V^l addressed by (row, slot); requires keep(row, slot).
    std::size_t summary_row(std::size_t row, std::size_t slot) const { return groups(row)[slot / p] * p + slot % p; }
};

template <typename T>
core::Tensor<T> local_outgoing(const core::Tensor<T>& q, const core::Tensor<T>& k, const BandLayout& layout);

template <typename T>
void local_outgoing_backward(const core::Tensor<T>& grad_scores, const core::Tensor<T>& q, const core::Tensor<T>& k,
                             const BandLayout& layout, core::Tensor<T>* grad_q, core::Tensor<T>* grad_k);

template <typename T>
core::Tensor<T> far_outgoing(const core::Tensor<T>& q, const core::Tensor<T>& k_level, const FarFieldLayout& layout);

template <typename T>
void far_outgoing_backward(const core::Tensor<T>& grad_scores, const core::Tensor<T>& q,
                           const core::Tensor<T>& k_level, const FarFieldLayout& layout, core::Tensor<T>* grad_q,
                           core::Tensor<T>* grad_k_level);

template <typename T>
core::Tensor<T> local_incoming(const core::Tensor<T>& probs, const core::Tensor<T>& v, const BandLayout& layout);

template <typename T>
void local_incoming_backward(const core::Tensor<T>& grad_out, const core::Tensor<T>& probs, const core::Tensor<T>& v,
                             const BandLayout& layout, core::Tensor<T>* grad_probs, core::Tensor<T>* grad_v);

template <typename T>
core::Tensor<T> far_incoming(const core::Tensor<T>& probs, const core::Tensor<T>& v_level,
                             const FarFieldLayout& layout);

template <typename T>
void far_incoming_backward(const core::Tensor<T>& grad_out, const core::Tensor<T>& probs,
                           const core::Tensor<T>& v_level, const FarFieldLayout& layout,
                           core::Tensor<T>* grad_probs, core::Tensor<T>* grad_v_level);

}  // namespace fmattn::kernels
