// SPDX-License-Identifier: Apache-2.0
#include "fmattn/fma.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <type_traits>

#include "fmattn/core/counters.hpp"
#include "fmattn/core/ops.hpp"

namespace fmattn {

using core::Tensor;

const char* to_string(Variant variant) {
    switch (variant) {
        case Variant::dense: return "dense";
        case Variant::fma: return "fma";
        case Variant::fma_linear: return "fma-linear";
    }
    return "?";
}

Variant parse_variant(const std::string& text) {
    if (text == "dense") return Variant::dense;
    if (text == "fma") return Variant::fma;
    if (text == "fma-linear" || text == "fma_linear") return Variant::fma_linear;
    throw ConfigError("unknown attention variant '" + text + "'");
}

template <typename T>
std::size_t CompactScores<T>::stored_entries() const {
    std::size_t total = band.size();
    for (const auto& f : far) total += f.size();
    return total;
}

namespace {

template <typename T>
void validate_inputs(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const DownsampleWeights<T>& weights,
                     const std::shared_ptr<const Hierarchy>& hierarchy, bool need_query, const char* op) {
    if (!hierarchy) throw ConfigError(std::string(op) + ": no hierarchy");
    const auto& c = hierarchy->config();
    for (const auto* t : {&q, &k, &v})
        if (t->rank() != 2 || t->rows() != c.n || t->cols() != q.cols() || q.cols() == 0)
            throw ShapeError(std::string(op) + ": Q, K, V must all be [" + std::to_string(c.n) + " x d], got " +
                             core::shape_string(q.shape()) + ", " + core::shape_string(k.shape()) + ", " +
                             core::shape_string(v.shape()));
    const auto& wc = weights.config();
    if (wc.n != c.n || wc.m != c.m || wc.p != c.p || wc.levels != c.levels || wc.mode != c.mode)
        throw ConfigError(std::string(op) + ": downsample weights were built for a different hierarchy");
    if (weights.head_dim() != q.cols())
        throw ShapeError(std::string(op) + ": weights for d=" + std::to_string(weights.head_dim()) + ", inputs have d=" +
                         std::to_string(q.cols()));
    if (need_query && c.levels > 0 && !weights.has(Stream::query))
        throw ConfigError(std::string(op) + ": linear variant needs query downsample weights");
    q.require_finite(op);
    k.require_finite(op);
    v.require_finite(op);
}

/// A contiguous run of stored scores sharing one multiplicity weight.
/// V is T for writable runs and const T for read-only ones.
template <typename V>
struct Segment {
    V* values;
    std::size_t length;
    std::remove_const_t<V> weight;
    // keep(slot) for this segment
    const kernels::BandLayout* band = nullptr;
    const kernels::FarFieldLayout* far = nullptr;
    std::size_t row = 0;

    bool keep(std::size_t slot) const { return band ? band->keep(row, slot) : far->keep(row, slot); }
};

/// In-place multiplicity-weighted softmax over the union of `segments`.
/// Returns false when nothing is kept (the segments are then zeroed).
template <typename T>
bool softmax_segments(std::span<const Segment<T>> segments, T scale) {
    T best = -std::numeric_limits<T>::infinity();
    std::uint64_t kept = 0;
    for (const auto& s : segments)
        for (std::size_t j = 0; j < s.length; ++j)
            if (s.keep(j)) {
                best = std::max(best, scale * s.values[j]);
                ++kept;
            }
    if (kept == 0) {
        for (const auto& s : segments) std::fill(s.values, s.values + s.length, T{0});
        return false;
    }
    T total = 0;
    for (const auto& s : segments)
        for (std::size_t j = 0; j < s.length; ++j) {
            if (!s.keep(j)) {
                s.values[j] = 0;
                continue;
            }
            s.values[j] = s.weight * std::exp(scale * s.values[j] - best);
            total += s.values[j];
        }
    for (const auto& s : segments)
        for (std::size_t j = 0; j < s.length; ++j) s.values[j] /= total;
    core::add_flops(5 * kept);
    return true;
}

/// grad <- scale * o * (grad - <o, grad>) over the union of segments; `probs`
/// and `grads` are parallel segment lists.
template <typename T>
void softmax_segments_backward(std::span<const Segment<const T>> probs, std::span<const Segment<T>> grads, T scale) {
    T dot = 0;
    std::uint64_t count = 0;
    for (std::size_t s = 0; s < probs.size(); ++s)
        for (std::size_t j = 0; j < probs[s].length; ++j) dot += probs[s].values[j] * grads[s].values[j];
    for (std::size_t s = 0; s < probs.size(); ++s) {
        for (std::size_t j = 0; j < probs[s].length; ++j)
            grads[s].values[j] = scale * probs[s].values[j] * (grads[s].values[j] - dot);
        count += probs[s].length;
    }
    core::add_flops(5 * count);
}

template <typename TensorT>
auto band_segment(TensorT& t, const kernels::BandLayout& layout, std::size_t row) {
    using V = std::remove_pointer_t<decltype(t.row(row).data())>;
    return Segment<V>{t.row(row).data(), layout.width(), 1, &layout, nullptr, row};
}

template <typename TensorT, typename W>
auto far_segment(TensorT& t, const kernels::FarFieldLayout& layout, std::size_t row, W weight) {
    using V = std::remove_pointer_t<decltype(t.row(row).data())>;
    return Segment<V>{t.row(row).data(), layout.width, weight, nullptr, &layout, row};
}

// Row i of the per-token output reads summary row floor(i p / m_l).
inline std::size_t summary_row_of(std::size_t i, std::size_t p, std::size_t group_size) { return i * p / group_size; }

template <typename T>
AttentionResult<T> forward_impl(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                const DownsampleWeights<T>& weights, std::shared_ptr<const Hierarchy> hierarchy,
                                Variant variant) {
    const bool linear = variant == Variant::fma_linear;
    validate_inputs(q, k, v, weights, hierarchy, linear, linear ? "fma::forward_linear" : "fma::forward");
    const auto& c = hierarchy->config();
    const int levels = c.levels;
    const std::size_t d = q.cols();

    AttentionResult<T> result;
    auto& tape = result.tape;
    tape.variant = variant;
    tape.hierarchy = hierarchy;
    tape.scale = T{1} / std::sqrt(static_cast<T>(d));
    tape.q = q;
    tape.k = k;
    tape.v = v;

    for (int level = 1; level <= levels; ++level) {
        tape.key_summaries.push_back(downsample(k, level, weights, Stream::key));
        tape.value_summaries.push_back(downsample(v, level, weights, Stream::value));
        if (linear) tape.query_summaries.push_back(downsample(q, level, weights, Stream::query));
    }

    auto& scores = tape.probs;
    scores.band_layout = kernels::BandLayout::from(*hierarchy);
    scores.band = kernels::local_outgoing(q, k, scores.band_layout);
    for (int level = 1; level <= levels; ++level) {
        const auto layout = linear ? kernels::FarFieldLayout::per_summary(*hierarchy, level)
                                   : kernels::FarFieldLayout::per_token(*hierarchy, level);
        scores.far_layouts.push_back(layout);
        const auto& queries = linear ? tape.query_summaries[level - 1] : q;
        scores.far.push_back(kernels::far_outgoing(queries, tape.key_summaries[level - 1], layout));
        scores.multiplicity.push_back(static_cast<T>(c.multiplicity(level)));
    }
    core::add_score_entries(scores.stored_entries());

    {
        core::PhaseScope phase(core::Phase::softmax);
        if (!linear) {
            std::vector<Segment<T>> row_segments;
            for (std::size_t i = 0; i < c.n; ++i) {
                row_segments.clear();
                row_segments.push_back(band_segment(scores.band, scores.band_layout, i));
                for (int level = 1; level <= levels; ++level)
                    row_segments.push_back(far_segment(scores.far[level - 1], scores.far_layouts[level - 1], i,
                                                       scores.multiplicity[level - 1]));
                if (!softmax_segments<T>(row_segments, tape.scale))
                    throw std::domain_error("fma::forward: row " + std::to_string(i) + " has no admissible key");
            }
        } else {
            for (std::size_t i = 0; i < c.n; ++i) {
                const Segment<T> seg = band_segment(scores.band, scores.band_layout, i);
                if (!softmax_segments<T>(std::span(&seg, 1), tape.scale))
                    throw std::domain_error("fma::forward_linear: row " + std::to_string(i) + " has no fine key");
            }
            for (int level = 1; level <= levels; ++level) {
                const auto& layout = scores.far_layouts[level - 1];
                for (std::size_t r = 0; r < layout.rows; ++r) {
                    const Segment<T> seg =
                        far_segment(scores.far[level - 1], layout, r, scores.multiplicity[level - 1]);
                    softmax_segments<T>(std::span(&seg, 1), tape.scale);  // empty levels stay zero
                }
            }
        }
    }

    result.output = kernels::local_incoming(scores.band, v, scores.band_layout);
    for (int level = 1; level <= levels; ++level) {
        const auto& layout = scores.far_layouts[level - 1];
        const Tensor<T> part = kernels::far_incoming(scores.far[level - 1], tape.value_summaries[level - 1], layout);
        if (!linear) {
            result.output += part;
            continue;
        }
        const std::size_t ml = c.group_size(level);
        for (std::size_t i = 0; i < c.n; ++i) {
            const auto src = part.row(summary_row_of(i, c.p, ml));
            auto dst = result.output.row(i);
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    }
    core::add_flops(static_cast<std::uint64_t>(levels) * c.n * d);
    result.output.require_finite(linear ? "fma::forward_linear" : "fma::forward");
    return result;
}

}  // namespace

template <typename T>
AttentionResult<T> forward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const DownsampleWeights<T>& weights, std::shared_ptr<const Hierarchy> hierarchy) {
    return forward_impl(q, k, v, weights, std::move(hierarchy), Variant::fma);
}

template <typename T>
AttentionResult<T> forward_linear(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                  const DownsampleWeights<T>& weights, std::shared_ptr<const Hierarchy> hierarchy) {
    return forward_impl(q, k, v, weights, std::move(hierarchy), Variant::fma_linear);
}

template <typename T>
void backward(const AttentionTape<T>& tape, const Tensor<T>& upstream, DownsampleWeights<T>& weights,
              AttentionGrads<T>& grads) {
    if (!tape.recorded()) throw MissingActivation("fma::backward: tape holds no forward pass");
    if (tape.variant == Variant::dense) throw ConfigError("fma::backward: dense tapes use dense_backward");
    const auto& c = tape.hierarchy->config();
    const bool linear = tape.variant == Variant::fma_linear;
    const int levels = c.levels;
    const std::size_t n = c.n, d = tape.q.cols();
    if (upstream.rank() != 2 || upstream.rows() != n || upstream.cols() != d)
        throw ShapeError("fma::backward: upstream " + core::shape_string(upstream.shape()) + " for output [" +
                         std::to_string(n) + "x" + std::to_string(d) + "]");
    if (!grads.q.same_shape(tape.q) || !grads.k.same_shape(tape.k) || !grads.v.same_shape(tape.v))
        throw ShapeError("fma::backward: gradient buffers do not match the tape");
    if (tape.key_summaries.size() != static_cast<std::size_t>(levels) ||
        tape.value_summaries.size() != static_cast<std::size_t>(levels) ||
        (linear && tape.query_summaries.size() != static_cast<std::size_t>(levels)))
        throw MissingActivation("fma::backward: tape is missing level summaries");
    upstream.require_finite("fma::backward");

    const auto& scores = tape.probs;

    // Output -> probabilities and values.
    Tensor<T> grad_band(scores.band.shape());
    kernels::local_incoming_backward(upstream, scores.band, tape.v, scores.band_layout, &grad_band, &grads.v);

    std::vector<Tensor<T>> grad_far;
    std::vector<Tensor<T>> grad_value_summaries;
    for (int level = 1; level <= levels; ++level) {
        const auto& layout = scores.far_layouts[level - 1];
        const auto& vl = tape.value_summaries[level - 1];
        grad_far.emplace_back(scores.far[level - 1].shape());
        grad_value_summaries.emplace_back(vl.shape());
        if (!linear) {
            kernels::far_incoming_backward(upstream, scores.far[level - 1], vl, layout, &grad_far.back(),
                                           &grad_value_summaries.back());
            continue;
        }
        const std::size_t ml = c.group_size(level);
        Tensor<T> grad_part = Tensor<T>::matrix(layout.rows, d);
        for (std::size_t i = 0; i < n; ++i) {
            auto dst = grad_part.row(summary_row_of(i, c.p, ml));
            const auto src = upstream.row(i);
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
        kernels::far_incoming_backward(grad_part, scores.far[level - 1], vl, layout, &grad_far.back(),
                                       &grad_value_summaries.back());
    }

    // Probabilities -> scores.
    {
        core::PhaseScope phase(core::Phase::softmax);
        const auto& band_probs = scores.band;
        if (!linear) {
            std::vector<Segment<const T>> ps;
            std::vector<Segment<T>> gs;
            for (std::size_t i = 0; i < n; ++i) {
                ps.clear();
                gs.clear();
                ps.push_back(band_segment(band_probs, scores.band_layout, i));
                gs.push_back(band_segment(grad_band, scores.band_layout, i));
                for (int level = 1; level <= levels; ++level) {
                    const auto& fp = scores.far[level - 1];
                    ps.push_back(far_segment(fp, scores.far_layouts[level - 1], i, T{1}));
                    gs.push_back(far_segment(grad_far[level - 1], scores.far_layouts[level - 1], i, T{1}));
                }
                softmax_segments_backward<T>(ps, gs, tape.scale);
            }
        } else {
            for (std::size_t i = 0; i < n; ++i) {
                const Segment<const T> p = band_segment(band_probs, scores.band_layout, i);
                const Segment<T> g = band_segment(grad_band, scores.band_layout, i);
                softmax_segments_backward<T>(std::span(&p, 1), std::span(&g, 1), tape.scale);
            }
            for (int level = 1; level <= levels; ++level) {
                const auto& layout = scores.far_layouts[level - 1];
                const auto& fp = scores.far[level - 1];
                for (std::size_t r = 0; r < layout.rows; ++r) {
                    const Segment<const T> p = far_segment(fp, layout, r, T{1});
                    const Segment<T> g = far_segment(grad_far[level - 1], layout, r, T{1});
                    softmax_segments_backward<T>(std::span(&p, 1), std::span(&g, 1), tape.scale);
                }
            }
        }
    }

    // Scores -> queries, keys and summaries.
    kernels::local_outgoing_backward(grad_band, tape.q, tape.k, scores.band_layout, &grads.q, &grads.k);
    for (int level = 1; level <= levels; ++level) {
        const auto& layout = scores.far_layouts[level - 1];
        const auto& kl = tape.key_summaries[level - 1];
        Tensor<T> grad_key_summary(kl.shape());
        if (!linear) {
            kernels::far_outgoing_backward(grad_far[level - 1], tape.q, kl, layout, &grads.q, &grad_key_summary);
        } else {
            const auto& ql = tape.query_summaries[level - 1];
            Tensor<T> grad_query_summary(ql.shape());
            kernels::far_outgoing_backward(grad_far[level - 1], ql, kl, layout, &grad_query_summary, &grad_key_summary);
            downsample_backward(grad_query_summary, tape.q, level, weights, Stream::query, &grads.q);
        }
        downsample_backward(grad_key_summary, tape.k, level, weights, Stream::key, &grads.k);
        downsample_backward(grad_value_summaries[level - 1], tape.v, level, weights, Stream::value, &grads.v);
    }
}

template <typename T>
ErrorBoundReport error_bound_diagnostic(const Tensor<T>& q, const Tensor<T>& k, const DownsampleWeights<T>& weights,
                                        const Hierarchy& hierarchy, std::size_t row) {
    const auto& c = hierarchy.config();
    if (row >= c.n) throw std::out_of_range("error_bound_diagnostic: row " + std::to_string(row));
    if (c.rule != PartitionRule::fmm_parity)
        throw ConfigError("error_bound_diagnostic: needs a partition (fmm_parity) so each pair has one level");
    if (q.rank() != 2 || !q.same_shape(k) || q.rows() != c.n)
        throw ShapeError("error_bound_diagnostic: Q and K must be [n x d]");
    const std::size_t d = q.cols();

    std::vector<Tensor<T>> summaries;
    for (int level = 1; level <= c.levels; ++level) summaries.push_back(downsample(k, level, weights, Stream::key));

    ErrorBoundReport report;
    report.row = row;
    report.level_max_deviation.assign(c.levels, 0.0);
    double max_dev = 0;
    for (std::size_t j = 0; j < c.n; ++j) {
        const PairLevel owner = hierarchy.level_of(row, j);
        if (owner.masked || owner.levels.empty() || owner.levels.front() == 0) continue;
        const int level = owner.levels.front();
        const auto approx = summaries[level - 1].row(j * c.p / c.group_size(level));
        double dev = 0, exact = 0, coarse = 0;
        for (std::size_t t = 0; t < d; ++t) {
            dev += std::abs(static_cast<double>(k(j, t)) - static_cast<double>(approx[t]));
            exact += static_cast<double>(q(row, t)) * static_cast<double>(k(j, t));
            coarse += static_cast<double>(q(row, t)) * static_cast<double>(approx[t]);
        }
        report.actual = std::max(report.actual, std::abs(exact - coarse));
        report.level_max_deviation[level - 1] = std::max(report.level_max_deviation[level - 1], dev);
        max_dev = std::max(max_dev, dev);
    }
    double q_norm = 0;
    for (std::size_t t = 0; t < d; ++t) q_norm = std::max(q_norm, std::abs(static_cast<double>(q(row, t))));
    report.bound = q_norm * max_dev;
    return report;
}

template struct CompactScores<float>;
template struct CompactScores<double>;

#define FMATTN_INSTANTIATE_FMA(T)                                                                                \
    template AttentionResult<T> forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                                        const DownsampleWeights<T>&, std::shared_ptr<const Hierarchy>);         \
    template AttentionResult<T> forward_linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                               const DownsampleWeights<T>&, std::shared_ptr<const Hierarchy>);  \
    template void backward(const AttentionTape<T>&, const Tensor<T>&, DownsampleWeights<T>&, AttentionGrads<T>&); \
    template ErrorBoundReport error_bound_diagnostic(const Tensor<T>&, const Tensor<T>&, const DownsampleWeights<T>&, \
                                                     const Hierarchy&, std::size_t);

FMATTN_INSTANTIATE_FMA(float)
FMATTN_INSTANTIATE_FMA(double)

}  // namespace fmattn
