// SPDX-License-Identifier: Apache-2.0
#include "fmattn/kernels.hpp"

#include <string>

#include "fmattn/core/counters.hpp"

namespace fmattn::kernels {

using core::Tensor;

BandLayout BandLayout::from(const Hierarchy& hierarchy) {
    const auto& c = hierarchy.config();
    return BandLayout{c.n, c.m, hierarchy.fine_offsets(), c.mode == Mode::causal};
}

FarFieldLayout FarFieldLayout::per_token(const Hierarchy& hierarchy, int level) {
    const auto& c = hierarchy.config();
    return FarFieldLayout{&hierarchy, level, c.n, c.group_size(level), c.p, hierarchy.max_groups(level) * c.p};
}

FarFieldLayout FarFieldLayout::per_summary(const Hierarchy& hierarchy, int level) {
    const auto& c = hierarchy.config();
    return FarFieldLayout{&hierarchy, level, c.group_count(level) * c.p, c.p, c.p, hierarchy.max_groups(level) * c.p};
}

namespace {

template <typename T>
T dot(const T* a, const T* b, std::size_t d) {
    T s = 0;
    for (std::size_t k = 0; k < d; ++k) s += a[k] * b[k];
    return s;
}

template <typename T>
void axpy(T* __restrict y, T a, const T* __restrict x, std::size_t d) {
    for (std::size_t k = 0; k < d; ++k) y[k] += a * x[k];
}

void fail(const std::string& op, const std::string& what) { throw ShapeError(op + ": " + what); }

template <typename T>
void check_rows(const Tensor<T>& t, std::size_t rows, std::size_t cols, const char* op, const char* name) {
    if (t.rank() != 2 || t.rows() != rows || t.cols() != cols)
        fail(op, std::string(name) + " is " + core::shape_string(t.shape()) + ", expected [" + std::to_string(rows) +
                     "x" + std::to_string(cols) + "]");
}

template <typename T>
void check_band(const Tensor<T>& q, const Tensor<T>& k, const BandLayout& layout, const char* op) {
    if (q.rank() != 2) fail(op, "queries must be a matrix");
    check_rows(q, layout.n, q.cols(), op, "Q");
    check_rows(k, layout.n, q.cols(), op, "K");
}

template <typename T>
void check_far(const Tensor<T>& q, const Tensor<T>& k_level, const FarFieldLayout& layout, const char* op) {
    if (!layout.hierarchy) fail(op, "layout has no hierarchy");
    if (q.rank() != 2) fail(op, "queries must be a matrix");
    check_rows(q, layout.rows, q.cols(), op, "queries");
    check_rows(k_level, layout.summary_rows(), q.cols(), op, "summaries");
}

}  // namespace

template <typename T>
Tensor<T> local_outgoing(const Tensor<T>& q, const Tensor<T>& k, const BandLayout& layout) {
    check_band(q, k, layout, "local_outgoing");
    core::PhaseScope phase(core::Phase::score);
    const std::size_t d = q.cols(), width = layout.width();
    Tensor<T> z = Tensor<T>::matrix(layout.n, width);
    std::uint64_t kept = 0;
    for (std::size_t i = 0; i < layout.n; ++i) {
        const T* qi = q.row(i).data();
        T* zi = z.row(i).data();
        for (std::size_t slot = 0; slot < width; ++slot) {
            if (!layout.keep(i, slot)) continue;
            zi[slot] = dot(qi, k.row(static_cast<std::size_t>(layout.column(i, slot))).data(), d);
            ++kept;
        }
    }
    core::add_flops(2 * kept * d);
    return z;
}

template <typename T>
void local_outgoing_backward(const Tensor<T>& grad_scores, const Tensor<T>& q, const Tensor<T>& k,
                             const BandLayout& layout, Tensor<T>* grad_q, Tensor<T>* grad_k) {
    check_band(q, k, layout, "local_outgoing_backward");
    check_rows(grad_scores, layout.n, layout.width(), "local_outgoing_backward", "dZ");
    if (grad_q) check_rows(*grad_q, layout.n, q.cols(), "local_outgoing_backward", "dQ");
    if (grad_k) check_rows(*grad_k, layout.n, q.cols(), "local_outgoing_backward", "dK");
    core::PhaseScope phase(core::Phase::score);
    const std::size_t d = q.cols(), width = layout.width();
    std::uint64_t kept = 0;
    for (std::size_t i = 0; i < layout.n; ++i) {
        const T* gz = grad_scores.row(i).data();
        for (std::size_t slot = 0; slot < width; ++slot) {
            if (!layout.keep(i, slot)) continue;
            const auto c = static_cast<std::size_t>(layout.column(i, slot));
            if (grad_q) axpy(grad_q->row(i).data(), gz[slot], k.row(c).data(), d);
            if (grad_k) axpy(grad_k->row(c).data(), gz[slot], q.row(i).data(), d);
            ++kept;
        }
    }
    core::add_flops(2 * kept * d * ((grad_q ? 1 : 0) + (grad_k ? 1 : 0)));
}

template <typename T>
Tensor<T> far_outgoing(const Tensor<T>& q, const Tensor<T>& k_level, const FarFieldLayout& layout) {
    check_far(q, k_level, layout, "far_outgoing");
    core::PhaseScope phase(core::Phase::score);
    const std::size_t d = q.cols();
    Tensor<T> z = Tensor<T>::matrix(layout.rows, layout.width);
    std::uint64_t kept = 0;
    for (std::size_t r = 0; r < layout.rows; ++r) {
        const T* qr = q.row(r).data();
        T* zr = z.row(r).data();
        const std::size_t used = layout.groups(r).size() * layout.p;
        for (std::size_t slot = 0; slot < used; ++slot)
            zr[slot] = dot(qr, k_level.row(layout.summary_row(r, slot)).data(), d);
        kept += used;
    }
    core::add_flops(2 * kept * d);
    return z;
}

template <typename T>
void far_outgoing_backward(const Tensor<T>& grad_scores, const Tensor<T>& q, const Tensor<T>& k_level,
                           const FarFieldLayout& layout, Tensor<T>* grad_q, Tensor<T>* grad_k_level) {
    check_far(q, k_level, layout, "far_outgoing_backward");
    check_rows(grad_scores, layout.rows, layout.width, "far_outgoing_backward", "dZ");
    if (grad_q) check_rows(*grad_q, layout.rows, q.cols(), "far_outgoing_backward", "dQ");
    if (grad_k_level) check_rows(*grad_k_level, layout.summary_rows(), q.cols(), "far_outgoing_backward", "dK");
    core::PhaseScope phase(core::Phase::score);
    const std::size_t d = q.cols();
    std::uint64_t kept = 0;
    for (std::size_t r = 0; r < layout.rows; ++r) {
        const T* gz = grad_scores.row(r).data();
        const std::size_t used = layout.groups(r).size() * layout.p;
        for (std::size_t slot = 0; slot < used; ++slot) {
            const std::size_t sr = layout.summary_row(r, slot);
            if (grad_q) axpy(grad_q->row(r).data(), gz[slot], k_level.row(sr).data(), d);
            if (grad_k_level) axpy(grad_k_level->row(sr).data(), gz[slot], q.row(r).data(), d);
        }
        kept += used;
    }
    core::add_flops(2 * kept * d * ((grad_q ? 1 : 0) + (grad_k_level ? 1 : 0)));
}

template <typename T>
Tensor<T> local_incoming(const Tensor<T>& probs, const Tensor<T>& v, const BandLayout& layout) {
    check_rows(probs, layout.n, layout.width(), "local_incoming", "A");
    if (v.rank() != 2) fail("local_incoming", "values must be a matrix");
    check_rows(v, layout.n, v.cols(), "local_incoming", "V");
    core::PhaseScope phase(core::Phase::aggregate);
    const std::size_t d = v.cols(), width = layout.width();
    Tensor<T> out = Tensor<T>::matrix(layout.n, d);
    std::uint64_t kept = 0;
    for (std::size_t i = 0; i < layout.n; ++i) {
        const T* a = probs.row(i).data();
        T* o = out.row(i).data();
        for (std::size_t slot = 0; slot < width; ++slot) {
            if (!layout.keep(i, slot)) continue;
            axpy(o, a[slot], v.row(static_cast<std::size_t>(layout.column(i, slot))).data(), d);
            ++kept;
        }
    }
    core::add_flops(2 * kept * d);
    return out;
}

template <typename T>
void local_incoming_backward(const Tensor<T>& grad_out, const Tensor<T>& probs, const Tensor<T>& v,
                             const BandLayout& layout, Tensor<T>* grad_probs, Tensor<T>* grad_v) {
    check_rows(probs, layout.n, layout.width(), "local_incoming_backward", "A");
    if (v.rank() != 2) fail("local_incoming_backward", "values must be a matrix");
    check_rows(v, layout.n, v.cols(), "local_incoming_backward", "V");
    check_rows(grad_out, layout.n, v.cols(), "local_incoming_backward", "dY");
    if (grad_probs) check_rows(*grad_probs, layout.n, layout.width(), "local_incoming_backward", "dA");
    if (grad_v) check_rows(*grad_v, layout.n, v.cols(), "local_incoming_backward", "dV");
    core::PhaseScope phase(core::Phase::aggregate);
    const std::size_t d = v.cols(), width = layout.width();
    std::uint64_t kept = 0;
    for (std::size_t i = 0; i < layout.n; ++i) {
        const T* g = grad_out.row(i).data();
        const T* a = probs.row(i).data();
        for (std::size_t slot = 0; slot < width; ++slot) {
            if (!layout.keep(i, slot)) continue;
            const auto c = static_cast<std::size_t>(layout.column(i, slot));
            if (grad_probs) (*grad_probs)(i, slot) += dot(g, v.row(c).data(), d);
            if (grad_v) axpy(grad_v->row(c).data(), a[slot], g, d);
            ++kept;
        }
    }
    core::add_flops(2 * kept * d * ((grad_probs ? 1 : 0) + (grad_v ? 1 : 0)));
}

template <typename T>
Tensor<T> far_incoming(const Tensor<T>& probs, const Tensor<T>& v_level, const FarFieldLayout& layout) {
    if (!layout.hierarchy) fail("far_incoming", "layout has no hierarchy");
    check_rows(probs, layout.rows, layout.width, "far_incoming", "A");
    if (v_level.rank() != 2) fail("far_incoming", "summaries must be a matrix");
    check_rows(v_level, layout.summary_rows(), v_level.cols(), "far_incoming", "V^l");
    core::PhaseScope phase(core::Phase::aggregate);
    const std::size_t d = v_level.cols();
    Tensor<T> out = Tensor<T>::matrix(layout.rows, d);
    std::uint64_t kept = 0;
    for (std::size_t r = 0; r < layout.rows; ++r) {
        const T* a = probs.row(r).data();
        T* o = out.row(r).data();
        const std::size_t used = layout.groups(r).size() * layout.p;
        for (std::size_t slot = 0; slot < used; ++slot) axpy(o, a[slot], v_level.row(layout.summary_row(r, slot)).data(), d);
        kept += used;
    }
    core::add_flops(2 * kept * d);
    return out;
}

template <typename T>
void far_incoming_backward(const Tensor<T>& grad_out, const Tensor<T>& probs, const Tensor<T>& v_level,
                           const FarFieldLayout& layout, Tensor<T>* grad_probs, Tensor<T>* grad_v_level) {
    if (!layout.hierarchy) fail("far_incoming_backward", "layout has no hierarchy");
    check_rows(probs, layout.rows, layout.width, "far_incoming_backward", "A");
    if (v_level.rank() != 2) fail("far_incoming_backward", "summaries must be a matrix");
    check_rows(v_level, layout.summary_rows(), v_level.cols(), "far_incoming_backward", "V^l");
    check_rows(grad_out, layout.rows, v_level.cols(), "far_incoming_backward", "dY");
    if (grad_probs) check_rows(*grad_probs, layout.rows, layout.width, "far_incoming_backward", "dA");
    if (grad_v_level) check_rows(*grad_v_level, layout.summary_rows(), v_level.cols(), "far_incoming_backward", "dV");
    core::PhaseScope phase(core::Phase::aggregate);
    const std::size_t d = v_level.cols();
    std::uint64_t kept = 0;
    for (std::size_t r = 0; r < layout.rows; ++r) {
        const T* g = grad_out.row(r).data();
        const T* a = probs.row(r).data();
        const std::size_t used = layout.groups(r).size() * layout.p;
        for (std::size_t slot = 0; slot < used; ++slot) {
            const std::size_t sr = layout.summary_row(r, slot);
            if (grad_probs) (*grad_probs)(r, slot) += dot(g, v_level.row(sr).data(), d);
            if (grad_v_level) axpy(grad_v_level->row(sr).data(), a[slot], g, d);
        }
        kept += used;
    }
    core::add_flops(2 * kept * d * ((grad_probs ? 1 : 0) + (grad_v_level ? 1 : 0)));
}

#define FMATTN_INSTANTIATE_KERNELS(T)                                                                           \
    template Tensor<T> local_outgoing(const Tensor<T>&, const Tensor<T>&, const BandLayout&);                   \
    template void local_outgoing_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                          const BandLayout&, Tensor<T>*, Tensor<T>*);                          \
    template Tensor<T> far_outgoing(const Tensor<T>&, const Tensor<T>&, const FarFieldLayout&);                 \
    template void far_outgoing_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                   \
                                        const FarFieldLayout&, Tensor<T>*, Tensor<T>*);                        \
    template Tensor<T> local_incoming(const Tensor<T>&, const Tensor<T>&, const BandLayout&);                   \
    template void local_incoming_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                          const BandLayout&, Tensor<T>*, Tensor<T>*);                          \
    template Tensor<T> far_incoming(const Tensor<T>&, const Tensor<T>&, const FarFieldLayout&);                 \
    template void far_incoming_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                   \
                                        const FarFieldLayout&, Tensor<T>*, Tensor<T>*);

FMATTN_INSTANTIATE_KERNELS(float)
FMATTN_INSTANTIATE_KERNELS(double)

}  // namespace fmattn::kernels
