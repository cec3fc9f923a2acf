// SPDX-License-Identifier: Apache-2.0
#include "fmattn/hierarchy.hpp"

#include <algorithm>
#include <bit>
#include <sstream>
#include <stdexcept>

#include "fmattn/core/error.hpp"
#include "fmattn/core/keyvalue.hpp"

namespace fmattn {

const char* to_string(Mode mode) { return mode == Mode::causal ? "causal" : "bidirectional"; }

const char* to_string(PartitionRule rule) { return rule == PartitionRule::fmm_parity ? "fmm_parity" : "literal"; }

Mode parse_mode(const std::string& text) {
    if (text == "causal") return Mode::causal;
    if (text == "bidirectional") return Mode::bidirectional;
    throw ConfigError("unknown mode '" + text + "'");
}

PartitionRule parse_partition_rule(const std::string& text) {
    if (text == "fmm_parity") return PartitionRule::fmm_parity;
    if (text == "literal") return PartitionRule::literal;
    throw ConfigError("unknown partition rule '" + text + "'");
}

std::size_t HierarchyConfig::group_size(int level) const {
    if (level <= 1) return m;
    return m << (level - 1);
}

std::string HierarchyConfig::to_text() const {
    std::ostringstream os;
    os << "n=" << n << "\nm=" << m << "\np=" << p << "\nlevels=" << levels << "\nmode=" << to_string(mode)
       << "\npartition_rule=" << to_string(rule) << "\n";
    return os.str();
}

HierarchyConfig make_config(std::size_t n, std::size_t m, std::size_t p, Mode mode, PartitionRule rule) {
    if (n == 0 || m == 0 || p == 0) throw ConfigError("hierarchy: n, m and p must be positive");
    if (n % m != 0) throw ConfigError("hierarchy: m=" + std::to_string(m) + " does not divide n=" + std::to_string(n));
    if (!std::has_single_bit(n / m))
        throw ConfigError("hierarchy: n/m=" + std::to_string(n / m) + " is not a power of two");
    if (m % p != 0) throw ConfigError("hierarchy: p=" + std::to_string(p) + " does not divide m=" + std::to_string(m));
    HierarchyConfig c;
    c.n = n;
    c.m = m;
    c.p = p;
    const int log_blocks = std::countr_zero(n / m);
    c.levels = log_blocks >= 2 ? log_blocks - 1 : 0;
    c.mode = mode;
    c.rule = rule;
    return c;
}

HierarchyConfig parse_config(const std::string& text) {
    const auto kv = core::KeyValues::parse(text, "hierarchy config");
    const auto rule = parse_partition_rule(kv.text("partition_rule", "fmm_parity"));
    auto c = make_config(kv.size("n"), kv.size("m"), kv.size("p"), parse_mode(kv.text("mode")), rule);
    if (kv.has("levels") && kv.size("levels") != static_cast<std::size_t>(c.levels))
        throw ConfigError("hierarchy config: levels=" + kv.text("levels") + " inconsistent with n and m");
    return c;
}

Hierarchy::Hierarchy(const HierarchyConfig& config) : config_(config) {
    // Re-validate: callers may have filled the struct by hand.
    const auto checked = make_config(config.n, config.m, config.p, config.mode, config.rule);
    if (checked.levels != config.levels) throw ConfigError("hierarchy: inconsistent level count");

    fine_offsets_ = config_.mode == Mode::causal ? std::vector<int>{-1, 0} : std::vector<int>{-1, 0, 1};

    lists_.resize(config_.levels);
    for (int level = 1; level <= config_.levels; ++level) {
        const auto blocks = static_cast<long>(config_.group_count(level));
        auto& per_block = lists_[level - 1];
        per_block.resize(blocks);
        for (long b = 0; b < blocks; ++b) {
            std::vector<int> offsets;
            if (config_.rule == PartitionRule::fmm_parity)
                offsets = (b % 2 == 0) ? std::vector<int>{-2, 2, 3} : std::vector<int>{-3, -2, 2};
            else
                offsets = {-3, -2, 2, 3};
            for (int off : offsets) {
                const long g = b + off;
                if (g < 0 || g >= blocks) continue;
                if (config_.mode == Mode::causal && g >= b) continue;
                per_block[b].push_back(static_cast<std::size_t>(g));
            }
            std::sort(per_block[b].begin(), per_block[b].end());
        }
    }
}

const std::vector<std::size_t>& Hierarchy::coarse_groups(int level, std::size_t block) const {
    if (level < 1 || level > config_.levels) throw std::out_of_range("coarse_groups: level " + std::to_string(level));
    return lists_[level - 1].at(block);
}

std::size_t Hierarchy::max_groups(int level) const {
    std::size_t best = 0;
    for (const auto& l : lists_.at(level - 1)) best = std::max(best, l.size());
    return best;
}

PairLevel Hierarchy::level_of(std::size_t i, std::size_t j) const {
    if (i >= config_.n || j >= config_.n)
        throw std::out_of_range("level_of: (" + std::to_string(i) + ", " + std::to_string(j) + ") outside n=" +
                                std::to_string(config_.n));
    PairLevel out;
    if (config_.mode == Mode::causal && j > i) {
        out.masked = true;
        return out;
    }
    const long fine_off = static_cast<long>(j / config_.m) - static_cast<long>(i / config_.m);
    if (std::find(fine_offsets_.begin(), fine_offsets_.end(), fine_off) != fine_offsets_.end()) out.levels.push_back(0);
    for (int level = 1; level <= config_.levels; ++level) {
        const std::size_t ml = config_.group_size(level);
        const auto& list = lists_[level - 1][i / ml];
        if (std::binary_search(list.begin(), list.end(), j / ml)) out.levels.push_back(level);
    }
    return out;
}

PartitionReport Hierarchy::partition_report() const {
    const std::size_t n = config_.n;
    const bool causal = config_.mode == Mode::causal;
    std::vector<std::uint8_t> hits(n * n, 0);
    PartitionReport report;
    report.pairs_per_level.assign(config_.levels + 1, 0);

    auto admissible = [&](std::size_t i, std::size_t j) { return !causal || j <= i; };

    for (std::size_t i = 0; i < n; ++i) {
        const long qb = static_cast<long>(i / config_.m);
        for (int off : fine_offsets_) {
            const long kb = qb + off;
            if (kb < 0 || kb >= static_cast<long>(n / config_.m)) continue;
            for (std::size_t j = kb * config_.m; j < (kb + 1) * config_.m; ++j) {
                if (!admissible(i, j)) continue;  // triangular mask inside the diagonal block
                ++hits[i * n + j];
                ++report.pairs_per_level[0];
            }
        }
    }
    for (int level = 1; level <= config_.levels; ++level) {
        const std::size_t ml = config_.group_size(level);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t g : lists_[level - 1][i / ml]) {
                for (std::size_t j = g * ml; j < (g + 1) * ml; ++j) {
                    if (!admissible(i, j)) {
                        ++report.future_listed;
                        continue;
                    }
                    ++hits[i * n + j];
                    ++report.pairs_per_level[level];
                }
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (!admissible(i, j)) continue;
            const auto h = hits[i * n + j];
            if (h == 0)
                ++report.uncovered;
            else if (h == 1)
                ++report.covered;
            else
                ++report.double_counted;
        }
    return report;
}

}  // namespace fmattn
