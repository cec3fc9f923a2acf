// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <new>

namespace fmattn::core {

/// Buckets for the FLOP counter. Every primitive charges the phase that is
/// active on the calling thread (see PhaseScope).
enum class Phase : std::size_t {
    other = 0,
    score,       // query-key contractions
    softmax,
    aggregate,   // probability-value contractions
    downsample,
    projection,  // dense layers outside attention
    count_
};

inline constexpr std::size_t phase_count = static_cast<std::size_t>(Phase::count_);

const char* phase_name(Phase phase);

struct Counters {
    std::array<std::uint64_t, phase_count> flops{};
    std::uint64_t live_bytes = 0;
    std::uint64_t peak_bytes = 0;
    std::uint64_t score_entries = 0;

    std::uint64_t total_flops() const;
    std::uint64_t flops_in(Phase phase) const { return flops[static_cast<std::size_t>(phase)]; }
};

/// Thread-local counter block. Counts are deterministic for a fixed sequence
/// of calls; they never depend on data values.
Counters& counters();

/// Zeroes FLOP and score-entry counts and restarts peak tracking from the
/// current live allocation.
void reset_counters();

void add_flops(std::uint64_t n);
void add_score_entries(std::uint64_t n);

Phase current_phase();

class PhaseScope {
  public:
    explicit PhaseScope(Phase phase);
    ~PhaseScope();
    PhaseScope(const PhaseScope&) = delete;
    PhaseScope& operator=(const PhaseScope&) = delete;

  private:
    Phase previous_;
};

namespace detail {
void note_alloc(std::size_t bytes);
void note_free(std::size_t bytes);
}  // namespace detail

/// Allocator that reports every allocation to the thread-local byte counter.
template <typename T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        if (n > std::numeric_limits<std::size_t>::max() / sizeof(T)) throw std::bad_array_new_length();
        auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
        detail::note_alloc(n * sizeof(T));
        return p;
    }

    void deallocate(T* p, std::size_t n) noexcept {
        detail::note_free(n * sizeof(T));
        ::operator delete(p);
    }

    template <typename U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

}  // namespace fmattn::core
