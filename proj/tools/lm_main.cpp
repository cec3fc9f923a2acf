// SPDX-License-Identifier: Apache-2.0
// Command-line front end for the language-model harness.
//   lm train --config <file> --data <file> --steps N --seed S --out <ckpt>
//   lm eval  --ckpt <file> --data <file> [--split valid]
//   lm audit --ckpt <file> --data <file>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "fmattn/lm/checkpoint.hpp"
#include "fmattn/lm/train.hpp"

namespace {

using namespace fmattn;

const lm::TokenStream& pick_split(const lm::Splits& splits, const std::string& name) {
    if (name == "train") return splits.train;
    if (name == "valid") return splits.valid;
    if (name == "test") return splits.test;
    throw ConfigError("unknown split '" + name + "' (train, valid, test)");
}

int run_train(const std::string& config_path, const std::string& data_path, std::size_t steps, std::uint64_t seed,
              const std::string& out, std::size_t log_every) {
    auto config = lm::load_model_config(config_path);
    if (steps > 0) config.steps = steps;
    const auto splits = lm::ingest(data_path);
    lm::Model<float> model(config, seed);
    std::printf("model: %s, %zu shared + %zu downsampling parameters\n", to_string(config.variant),
                model.shared_parameter_count(), model.downsample_parameter_count());

    std::ofstream curve(out + ".loss.csv");
    curve << "step,loss_nats,loss_bits,lr\n";
    lm::TrainOptions options;
    options.steps = config.steps;
    options.seed = seed;
    options.on_step = [&](std::size_t step, double loss, double lr) {
        char line[128];
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g\n", step, loss, loss / std::numbers::ln2, lr);
        curve << line;
        if (log_every > 0 && (step % log_every == 0 || step + 1 == config.steps))
            std::printf("step %5zu  loss %.4f bits/byte  lr %.2e\n", step, loss / std::numbers::ln2, lr);
    };
    const auto report = lm::train(model, splits.train, options);
    lm::save_checkpoint(model, out);
    const auto valid = lm::evaluate(model, splits.valid);
    if (config.objective == lm::Objective::autoregressive)
        std::printf("trained %zu steps in %.1f s; valid bpc %.4f (%zu windows)\n", config.steps, report.seconds,
                    valid.bpc, valid.windows);
    else
        std::printf("trained %zu steps in %.1f s; valid perplexity %.4f (%zu windows)\n", config.steps,
                    report.seconds, valid.perplexity, valid.windows);
    std::printf("checkpoint: %s\nloss curve: %s.loss.csv\n", out.c_str(), out.c_str());
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& data_path, const std::string& split) {
    const auto model = lm::load_checkpoint(ckpt);
    const auto splits = lm::ingest(data_path);
    const auto report = lm::evaluate(model, pick_split(splits, split));
    if (model.config().objective == lm::Objective::autoregressive)
        std::printf("%s bpc %.6f over %zu targets (%zu windows)\n", split.c_str(), report.bpc, report.targets,
                    report.windows);
    else
        std::printf("%s perplexity %.6f over %zu masked targets (%zu windows)\n", split.c_str(), report.perplexity,
                    report.targets, report.windows);
    return 0;
}

int run_audit(const std::string& ckpt, const std::string& data_path) {
    const auto model = lm::load_checkpoint(ckpt);
    const auto splits = lm::ingest(data_path);
    const std::size_t n = model.config().context;
    if (splits.valid.size() < n) throw ConfigError("audit: validation split shorter than the context");
    const std::vector<int> sample(splits.valid.begin(), splits.valid.begin() + static_cast<std::ptrdiff_t>(n));
    const auto report = lm::causality_audit(model, sample);
    std::printf("causality audit: %zu positions, %zu violations -> %s\n", report.positions, report.violations.size(),
                report.passed() ? "pass" : "FAIL");
    return report.passed() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Byte-level language model with dense, FMA or FMA-linear attention"};
    app.require_subcommand(1);

    std::string config_path, data_path, out, ckpt, split = "valid";
    std::size_t steps = 0, log_every = 100;
    std::uint64_t seed = 0;

    auto* train = app.add_subcommand("train", "Train a model and write a checkpoint");
    train->add_option("--config", config_path, "Model config (key=value file)")->required()->check(CLI::ExistingFile);
    train->add_option("--data", data_path, "Corpus file (bytes)")->required()->check(CLI::ExistingFile);
    train->add_option("--steps", steps, "Optimizer steps (default: config value)");
    train->add_option("--seed", seed, "Seed for initialisation and batch sampling");
    train->add_option("--out", out, "Checkpoint path")->required();
    train->add_option("--log-every", log_every, "Print every N steps (0 = quiet)");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split of a corpus");
    eval->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    eval->add_option("--data", data_path, "Corpus file")->required()->check(CLI::ExistingFile);
    eval->add_option("--split", split, "train, valid or test");

    auto* audit = app.add_subcommand("audit", "Check that no token influences earlier logits");
    audit->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
    audit->add_option("--data", data_path, "Corpus file")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);
    std::setvbuf(stdout, nullptr, _IOLBF, 0);
    try {
        if (*train) return run_train(config_path, data_path, steps, seed, out, log_every);
        if (*eval) return run_eval(ckpt, data_path, split);
        if (*audit) return run_audit(ckpt, data_path);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "lm: %s\n", e.what());
        return 2;
    }
    return 0;
}
