// SPDX-License-Identifier: Apache-2.0
#include "fmattn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "fmattn/core/counters.hpp"
#include "fmattn/core/error.hpp"
#include "fmattn/core/random.hpp"
#include "fmattn/dense_attention.hpp"
#include "fmattn/downsampler.hpp"
#include "fmattn/fma.hpp"
#include "fmattn/oracle.hpp"

namespace fmattn::bench {

using core::Shape;
using core::Tensor;

const std::vector<std::string>& known_variants() {
    static const std::vector<std::string> names{"dense", "fma", "fma-linear", "emulation"};
    return names;
}

namespace {

struct Sample {
    std::uint64_t flops = 0, peak_bytes = 0, score_entries = 0;
    double seconds = 0;

    bool same_counts(const Sample& o) const {
        return flops == o.flops && peak_bytes == o.peak_bytes && score_entries == o.score_entries;
    }
};

template <typename Body>
Sample timed(Body&& body) {
    core::reset_counters();
    const std::uint64_t baseline = core::counters().live_bytes;
    const auto start = std::chrono::steady_clock::now();
    body();
    const auto stop = std::chrono::steady_clock::now();
    const auto& c = core::counters();
    return {c.total_flops(), c.peak_bytes - baseline, c.score_entries,
            std::chrono::duration<double>(stop - start).count()};
}

template <typename T>
Sample sample_fast(const std::string& variant, const HierarchyConfig& config, std::size_t d, std::uint64_t seed,
                   bool backward) {
    core::Rng rng(seed);
    const std::size_t n = config.n;
    const auto q = core::uniform_tensor<T>(Shape{n, d}, rng);
    const auto k = core::uniform_tensor<T>(Shape{n, d}, rng);
    const auto v = core::uniform_tensor<T>(Shape{n, d}, rng);
    const auto upstream = core::uniform_tensor<T>(Shape{n, d}, rng);

    if (variant == "dense") {
        return timed([&] {
            auto result = dense_forward(q, k, v, config.mode);
            if (!backward) return;
            AttentionGrads<T> grads(n, d);
            dense_backward(result.tape, upstream, grads);
        });
    }
    const bool linear = variant == "fma-linear";
    auto weights = init_downsample<T>(config, d, linear, InitStrategy::average_plus_noise, rng.next());
    const auto hierarchy = std::make_shared<const Hierarchy>(config);
    return timed([&] {
        auto result = linear ? forward_linear(q, k, v, weights, hierarchy) : forward(q, k, v, weights, hierarchy);
        if (!backward) return;
        AttentionGrads<T> grads(n, d);
        fmattn::backward(result.tape, upstream, weights, grads);
    });
}

Sample sample_emulation(const HierarchyConfig& config, std::size_t d, std::uint64_t seed) {
    core::Rng rng(seed);
    const std::size_t n = config.n;
    const auto q = core::uniform_tensor<double>(Shape{n, d}, rng);
    const auto k = core::uniform_tensor<double>(Shape{n, d}, rng);
    const auto v = core::uniform_tensor<double>(Shape{n, d}, rng);
    const auto weights = init_downsample<double>(config, d, false, InitStrategy::average_plus_noise, rng.next());
    const auto policy = config.rule == PartitionRule::fmm_parity ? oracle::DuplicatePolicy::refuse
                                                                   : oracle::DuplicatePolicy::count_all;
    return timed([&] { (void)oracle::dense_fma_emulation(q, k, v, weights, config, policy); });
}

void require_known(const std::string& variant) {
    const auto& names = known_variants();
    if (std::find(names.begin(), names.end(), variant) == names.end())
        throw ConfigError("unknown benchmark variant '" + variant + "'");
}

}  // namespace

RunRecord measure(const std::string& variant, const HierarchyConfig& config, std::size_t d, std::size_t reps,
                  std::uint64_t seed, bool backward) {
    require_known(variant);
    if (reps == 0) throw ConfigError("bench: repetitions must be positive");
    if (d == 0) throw ConfigError("bench: head dimension must be positive");
    if (variant == "emulation" && backward) throw ConfigError("bench: the emulation has no backward pass");

    std::vector<Sample> samples;
    for (std::size_t r = 0; r < reps; ++r) {
        samples.push_back(variant == "emulation" ? sample_emulation(config, d, seed)
                                                 : sample_fast<float>(variant, config, d, seed, backward));
        if (!samples.back().same_counts(samples.front()))
            throw std::logic_error("bench: counters changed between repetitions of " + variant);
    }
    std::vector<double> times;
    for (const auto& s : samples) times.push_back(s.seconds);
    std::sort(times.begin(), times.end());
    const double median =
        times.size() % 2 ? times[times.size() / 2] : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);

    RunRecord record;
    record.variant = variant;
    record.mode = config.mode;
    record.n = config.n;
    record.m = config.m;
    record.p = config.p;
    record.levels = config.levels;
    record.flops = samples.front().flops;
    record.peak_bytes = samples.front().peak_bytes;
    record.score_entries = samples.front().score_entries;
    record.wall_s = median;
    record.reps = reps;
    record.seed = seed;
    return record;
}

RunOutcome run(const RunSpec& spec) {
    RunOutcome outcome;
    for (const auto& variant : spec.variants)
        for (std::size_t n : spec.sizes) {
            try {
                const auto config = make_config(n, spec.m, spec.p, spec.mode, spec.rule);
                outcome.records.push_back(measure(variant, config, spec.d, spec.reps, spec.seed, spec.backward));
            } catch (const ConfigError& e) {
                outcome.skipped.push_back(variant + " n=" + std::to_string(n) + " m=" + std::to_string(spec.m) +
                                          " p=" + std::to_string(spec.p) + ": " + e.what());
            }
        }
    return outcome;
}

std::string to_csv(const std::vector<RunRecord>& records) {
    std::ostringstream out;
    out << "variant,mode,n,m,p,L,flops,peak_bytes,wall_s,reps,seed\n";
    out.precision(9);
    for (const auto& r : records)
        out << r.variant << ',' << to_string(r.mode) << ',' << r.n << ',' << r.m << ',' << r.p << ',' << r.levels << ','
            << r.flops << ',' << r.peak_bytes << ',' << r.wall_s << ',' << r.reps << ',' << r.seed << '\n';
    return out.str();
}

std::vector<RunRecord> parse_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != "variant,mode,n,m,p,L,flops,peak_bytes,wall_s,reps,seed")
        throw ConfigError("bench csv: missing or unexpected header");
    std::vector<RunRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::istringstream row(line);
        for (std::string f; std::getline(row, f, ',');) fields.push_back(f);
        if (fields.size() != 11) throw ConfigError("bench csv: line " + std::to_string(line_no) + " has " +
                                                   std::to_string(fields.size()) + " fields, expected 11");
        try {
            RunRecord r;
            r.variant = fields[0];
            r.mode = parse_mode(fields[1]);
            r.n = std::stoull(fields[2]);
            r.m = std::stoull(fields[3]);
            r.p = std::stoull(fields[4]);
            r.levels = std::stoi(fields[5]);
            r.flops = std::stoull(fields[6]);
            r.peak_bytes = std::stoull(fields[7]);
            r.wall_s = std::stod(fields[8]);
            r.reps = std::stoull(fields[9]);
            r.seed = std::stoull(fields[10]);
            records.push_back(r);
        } catch (const std::logic_error&) {
            throw ConfigError("bench csv: line " + std::to_string(line_no) + " has a malformed number");
        }
    }
    return records;
}

SweepOutcome sweep_mp(std::size_t n, const std::vector<std::size_t>& ms, const std::vector<std::size_t>& ps,
                      Mode mode, std::size_t d, std::uint64_t seed) {
    SweepOutcome outcome;
    for (std::size_t m : ms)
        for (std::size_t p : ps) {
            try {
                const auto config = make_config(n, m, p, mode);
                const auto r = measure("fma", config, d, 1, seed, false);
                SweepCell cell;
                cell.n = n;
                cell.m = m;
                cell.p = p;
                cell.levels = config.levels;
                cell.score_entries = r.score_entries;
                cell.budget = 3 * m * n + 4 * p * n * static_cast<std::uint64_t>(config.levels);
                cell.flops = r.flops;
                cell.peak_bytes = r.peak_bytes;
                outcome.cells.push_back(cell);
            } catch (const ConfigError& e) {
                outcome.skipped.push_back("m=" + std::to_string(m) + " p=" + std::to_string(p) + ": " + e.what());
            }
        }
    return outcome;
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
    std::ostringstream out;
    out << "n,m,p,L,score_entries,budget,flops,peak_bytes,bpc\n";
    out.precision(9);
    for (const auto& c : cells) {
        out << c.n << ',' << c.m << ',' << c.p << ',' << c.levels << ',' << c.score_entries << ',' << c.budget << ','
            << c.flops << ',' << c.peak_bytes << ',';
        if (c.bpc >= 0) out << c.bpc;
        out << '\n';
    }
    return out.str();
}

std::vector<Fit> complexity_fit(const std::vector<RunRecord>& records) {
    using Key = std::tuple<std::string, int, std::size_t, std::size_t>;
    std::map<Key, std::map<std::size_t, std::uint64_t>> groups;
    for (const auto& r : records) {
        if (r.flops == 0) throw ConfigError("complexity_fit: record with zero FLOPs");
        groups[{r.variant, static_cast<int>(r.mode), r.m, r.p}][r.n] = r.flops;
    }
    std::vector<Fit> fits;
    for (const auto& [key, points] : groups) {
        const auto& [variant, mode, m, p] = key;
        if (points.size() < 4)
            throw ConfigError("complexity_fit: " + variant + " has " + std::to_string(points.size()) +
                              " sizes; at least 4 are needed");
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (const auto& [n, flops] : points) {
            const double x = std::log(static_cast<double>(n)), y = std::log(static_cast<double>(flops));
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        const double count = static_cast<double>(points.size());
        Fit fit;
        fit.variant = variant;
        fit.mode = static_cast<Mode>(mode);
        fit.m = m;
        fit.p = p;
        fit.points = points.size();
        fit.slope = (count * sxy - sx * sy) / (count * sxx - sx * sx);
        fits.push_back(fit);
    }
    return fits;
}

}  // namespace fmattn::bench
