// SPDX-License-Identifier: Apache-2.0
#pragma once

// Counter-based benchmarks of the attention variants. FLOPs, peak working
// bytes and stored score entries come from the thread-local counters and do
// not depend on the machine or the seed; wall time is reported alongside.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fmattn/hierarchy.hpp"

namespace fmattn::bench {

/// Variants accepted by run: "dense", "fma", "fma-linear" and "emulation"
/// (the slow dense reference of FMA, forward only).
const std::vector<std::string>& known_variants();

struct RunRecord {
    std::string variant;
    Mode mode = Mode::causal;
    std::size_t n = 0, m = 0, p = 0;
    int levels = 0;
    std::uint64_t flops = 0;
    std::uint64_t peak_bytes = 0;     // working memory above the inputs
    std::uint64_t score_entries = 0;  // stored attention scores
    double wall_s = 0;                // median over repetitions
    std::size_t reps = 0;
    std::uint64_t seed = 0;
};

struct RunSpec {
    std::vector<std::string> variants{"dense", "fma", "fma-linear"};
    std::vector<std::size_t> sizes{256, 512, 1024, 2048};
    std::size_t m = 32;
    std::size_t p = 4;
    Mode mode = Mode::causal;
    PartitionRule rule = PartitionRule::fmm_parity;
    std::size_t d = 64;
    std::size_t reps = 3;
    std::uint64_t seed = 0;
    bool backward = false;  // time forward + backward instead of forward only
};

struct RunOutcome {
    std::vector<RunRecord> records;
    std::vector<std::string> skipped;  // one message per rejected cell
};

/// Measures one cell. Throws ConfigError for an invalid configuration and
/// std::logic_error if the counters differ between repetitions.
RunRecord measure(const std::string& variant, const HierarchyConfig& config, std::size_t d, std::size_t reps,
                  std::uint64_t seed, bool backward);

/// Every variant at every size. Invalid cells are listed in `skipped`.
RunOutcome run(const RunSpec& spec);

/// `variant,mode,n,m,p,L,flops,peak_bytes,wall_s,reps,seed` plus one line per
/// record, LF line endings.
std::string to_csv(const std::vector<RunRecord>& records);

/// Inverse of to_csv (score_entries is not part of the schema and reads as 0).
std::vector<RunRecord> parse_csv(const std::string& text);

struct SweepCell {
    std::size_t n = 0, m = 0, p = 0;
    int levels = 0;
    std::uint64_t score_entries = 0;
    std::uint64_t budget = 0;  // 3 m n + 4 p n L
    std::uint64_t flops = 0;
    std::uint64_t peak_bytes = 0;
    double bpc = -1;  // filled in by callers that train a model per cell
};

struct SweepOutcome {
    std::vector<SweepCell> cells;
    std::vector<std::string> skipped;
};

/// FMA forward counters for every (m, p) pair at length n.
SweepOutcome sweep_mp(std::size_t n, const std::vector<std::size_t>& ms, const std::vector<std::size_t>& ps,
                      Mode mode, std::size_t d = 64, std::uint64_t seed = 0);

/// `n,m,p,L,score_entries,budget,flops,peak_bytes,bpc`; bpc is empty when not
/// measured.
std::string sweep_csv(const std::vector<SweepCell>& cells);

struct Fit {
    std::string variant;
    Mode mode = Mode::causal;
    std::size_t m = 0, p = 0;
    std::size_t points = 0;
    double slope = 0;  // least-squares slope of log(flops) against log(n)
};

/// One fit per (variant, mode, m, p) group. Throws ConfigError when a group
/// has fewer than four distinct sizes.
std::vector<Fit> complexity_fit(const std::vector<RunRecord>& records);

}  // namespace fmattn::bench
