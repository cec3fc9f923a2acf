// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fmattn {

enum class Mode { causal, bidirectional };

/// How coarse-level interaction lists are formed.
///  - fmm_parity: children of the parent's neighbours minus the block's own
///    neighbours. The levels then form an exact partition of all pairs.
///  - literal: every in-range block offset in {+-2, +-3} on every level. Levels
///    overlap; kept for fidelity experiments.
enum class PartitionRule { fmm_parity, literal };

const char* to_string(Mode mode);
const char* to_string(PartitionRule rule);
Mode parse_mode(const std::string& text);
PartitionRule parse_partition_rule(const std::string& text);

struct HierarchyConfig {
    std::size_t n = 0;  // sequence length
    std::size_t m = 0;  // fine group size
    std::size_t p = 0;  // summaries per coarse group
    int levels = 0;     // coarse level count L
    Mode mode = Mode::bidirectional;
    PartitionRule rule = PartitionRule::fmm_parity;

    /// m_l = 2^(l-1) m for l >= 1; level 0 uses blocks of m.
    std::size_t group_size(int level) const;
    std::size_t group_count(int level) const { return n / group_size(level); }

    /// Repeat count m_l / p of each coarse column.
    std::size_t multiplicity(int level) const { return group_size(level) / p; }

    /// Key-value text block, one `key=value` per line.
    std::string to_text() const;
};

/// Validates the parameters and derives L = log2(n/m) - 1 (0 when n <= 2m).
/// Throws ConfigError when m does not divide n, n/m is not a power of two, or
/// p does not divide m.
HierarchyConfig make_config(std::size_t n, std::size_t m, std::size_t p, Mode mode,
                            PartitionRule rule = PartitionRule::fmm_parity);

/// Parses the output of HierarchyConfig::to_text (extra keys are ignored).
HierarchyConfig parse_config(const std::string& text);

/// Result of classifying one (query, key) pair.
struct PairLevel {
    bool masked = false;      // future pair in causal mode
    std::vector<int> levels;  // 0 = fine; empty = not covered
};

struct PartitionReport {
    std::uint64_t covered = 0;         // pairs owned by exactly one level
    std::uint64_t double_counted = 0;  // pairs owned by two or more levels
    std::uint64_t uncovered = 0;       // admissible pairs owned by no level
    std::uint64_t future_listed = 0;   // causal: future pairs reachable through a coarse list
    std::vector<std::uint64_t> pairs_per_level;  // index 0 = fine
};

/// The multilevel tree over token positions with per-level interaction lists.
/// Immutable after construction.
class Hierarchy {
  public:
    explicit Hierarchy(const HierarchyConfig& config);

    const HierarchyConfig& config() const { return config_; }
    int levels() const { return config_.levels; }

    /// Block offsets of the fine band: {-1, 0, +1} or {-1, 0} in causal mode.
    const std::vector<int>& fine_offsets() const { return fine_offsets_; }

    /// Key groups (indices at `level`) listed for query block `block`.
    const std::vector<std::size_t>& coarse_groups(int level, std::size_t block) const;

    /// Longest interaction list at `level`.
    std::size_t max_groups(int level) const;

    /// Which level(s) own the pair (i, j).
    PairLevel level_of(std::size_t i, std::size_t j) const;

    /// Brute-force expansion of every list to element pairs (O(n^2 L)).
    PartitionReport partition_report() const;

  private:
    HierarchyConfig config_;
    std::vector<int> fine_offsets_;
    // lists_[level - 1][block]
    std::vector<std::vector<std::vector<std::size_t>>> lists_;
};

}  // namespace fmattn
