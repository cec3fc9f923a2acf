// SPDX-License-Identifier: Apache-2.0
// Benchmark front end.
//   bench run --variants dense,fma,fma-linear --n 256,512,1024,2048 --m 32 --p 4 --mode causal --csv out.csv
//   bench sweep-mp --n 256 --m 16,32,64 --p 1,2,4,8 [--train corpus --config file --steps N] --csv sweep.csv
//   bench fit out.csv

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "fmattn/bench.hpp"
#include "fmattn/core/error.hpp"
#include "fmattn/lm/train.hpp"

namespace {

using namespace fmattn;

void write_or_print(const std::string& text, const std::string& path) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
    std::printf("wrote %s\n", path.c_str());
}

void report_skipped(const std::vector<std::string>& skipped) {
    for (const auto& s : skipped) std::fprintf(stderr, "skipped: %s\n", s.c_str());
}

double train_cell_bpc(const bench::SweepCell& cell, const std::string& config_path, const std::string& corpus,
                      std::size_t steps, std::uint64_t seed) {
    auto config = config_path.empty() ? lm::ModelConfig{} : lm::load_model_config(config_path);
    config.variant = Variant::fma;
    config.context = cell.n;
    config.m = cell.m;
    config.p = cell.p;
    config.steps = steps;
    config.validate();
    const auto splits = lm::ingest(corpus);
    lm::Model<float> model(config, seed);
    lm::TrainOptions options;
    options.steps = steps;
    options.seed = seed;
    lm::train(model, splits.train, options);
    return lm::evaluate(model, splits.valid).bpc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Counter-based benchmarks for dense, FMA and FMA-linear attention"};
    app.require_subcommand(1);

    bench::RunSpec spec;
    std::string mode = "causal", rule = "fmm_parity", csv;
    auto* run = app.add_subcommand("run", "Measure every variant at every size");
    run->add_option("--variants", spec.variants, "dense, fma, fma-linear, emulation")->delimiter(',');
    run->add_option("--n", spec.sizes, "Sequence lengths")->delimiter(',');
    run->add_option("--m", spec.m, "Fine group size");
    run->add_option("--p", spec.p, "Summaries per coarse group");
    run->add_option("--d", spec.d, "Head dimension");
    run->add_option("--mode", mode, "causal or bidirectional");
    run->add_option("--rule", rule, "fmm_parity or literal");
    run->add_option("--reps", spec.reps, "Repetitions (median wall time)");
    run->add_option("--seed", spec.seed, "Input seed");
    run->add_flag("--backward", spec.backward, "Time forward + backward");
    run->add_option("--csv", csv, "Output file (default: stdout)");

    std::size_t sweep_n = 256, steps = 300;
    std::vector<std::size_t> ms{16, 32, 64}, ps{1, 2, 4, 8};
    std::string corpus, config_path;
    auto* sweep = app.add_subcommand("sweep-mp", "Stored entries (and optionally bpc) across m and p");
    sweep->add_option("--n", sweep_n, "Sequence length");
    sweep->add_option("--m", ms, "Fine group sizes")->delimiter(',');
    sweep->add_option("--p", ps, "Summary counts")->delimiter(',');
    sweep->add_option("--d", spec.d, "Head dimension");
    sweep->add_option("--mode", mode, "causal or bidirectional");
    sweep->add_option("--seed", spec.seed, "Seed");
    sweep->add_option("--train", corpus, "Corpus: train an FMA model per cell and report validation bpc")
        ->check(CLI::ExistingFile);
    sweep->add_option("--config", config_path, "Base model config for --train")->check(CLI::ExistingFile);
    sweep->add_option("--steps", steps, "Training steps per cell for --train");
    sweep->add_option("--csv", csv, "Output file (default: stdout)");

    std::string fit_path;
    auto* fit = app.add_subcommand("fit", "Log-log FLOP slope per variant from a run CSV");
    fit->add_option("csv", fit_path, "CSV written by `bench run`")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);
    std::setvbuf(stdout, nullptr, _IOLBF, 0);
    try {
        if (*run) {
            spec.mode = parse_mode(mode);
            spec.rule = parse_partition_rule(rule);
            const auto outcome = bench::run(spec);
            report_skipped(outcome.skipped);
            write_or_print(bench::to_csv(outcome.records), csv);
        } else if (*sweep) {
            auto outcome = bench::sweep_mp(sweep_n, ms, ps, parse_mode(mode), spec.d, spec.seed);
            report_skipped(outcome.skipped);
            if (!corpus.empty())
                for (auto& cell : outcome.cells) {
                    cell.bpc = train_cell_bpc(cell, config_path, corpus, steps, spec.seed);
                    std::fprintf(stderr, "m=%zu p=%zu bpc %.4f\n", cell.m, cell.p, cell.bpc);
                }
            write_or_print(bench::sweep_csv(outcome.cells), csv);
        } else if (*fit) {
            std::ifstream in(fit_path, std::ios::binary);
            std::stringstream text;
            text << in.rdbuf();
            for (const auto& f : bench::complexity_fit(bench::parse_csv(text.str())))
                std::printf("%-11s %-13s m=%-3zu p=%-2zu sizes=%zu slope=%.4f\n", f.variant.c_str(),
                            to_string(f.mode), f.m, f.p, f.points, f.slope);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "bench: %s\n", e.what());
        return 2;
    }
    return 0;
}
