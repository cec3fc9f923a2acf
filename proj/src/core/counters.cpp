// SPDX-License-Identifier: Apache-2.0
#include "fmattn/core/counters.hpp"

#include <numeric>
#include <sstream>

#include "fmattn/core/tensor.hpp"

namespace fmattn::core {

namespace {
thread_local Counters tl_counters;
thread_local Phase tl_phase = Phase::other;
}  // namespace

const char* phase_name(Phase phase) {
    switch (phase) {
        case Phase::other: return "other";
        case Phase::score: return "score";
        case Phase::softmax: return "softmax";
        case Phase::aggregate: return "aggregate";
        case Phase::downsample: return "downsample";
        case Phase::projection: return "projection";
        case Phase::count_: break;
    }
    return "?";
}

std::uint64_t Counters::total_flops() const { return std::accumulate(flops.begin(), flops.end(), std::uint64_t{0}); }

Counters& counters() { return tl_counters; }

void reset_counters() {
    tl_counters.flops.fill(0);
    tl_counters.score_entries = 0;
    tl_counters.peak_bytes = tl_counters.live_bytes;
}

void add_flops(std::uint64_t n) { tl_counters.flops[static_cast<std::size_t>(tl_phase)] += n; }

void add_score_entries(std::uint64_t n) { tl_counters.score_entries += n; }

Phase current_phase() { return tl_phase; }

PhaseScope::PhaseScope(Phase phase) : previous_(tl_phase) { tl_phase = phase; }
PhaseScope::~PhaseScope() { tl_phase = previous_; }

namespace detail {
void note_alloc(std::size_t bytes) {
    tl_counters.live_bytes += bytes;
    if (tl_counters.live_bytes > tl_counters.peak_bytes) tl_counters.peak_bytes = tl_counters.live_bytes;
}
// Memory freed on another thread than it was allocated on is clamped at zero.
void note_free(std::size_t bytes) {
    tl_counters.live_bytes = bytes > tl_counters.live_bytes ? 0 : tl_counters.live_bytes - bytes;
}
}  // namespace detail

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

}  // namespace fmattn::core
