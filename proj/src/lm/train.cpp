// SPDX-License-Identifier: Apache-2.0
#include "fmattn/lm/train.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <numbers>

#include "fmattn/lm/optimizer.hpp"

namespace fmattn::lm {

std::size_t window_length(const ModelConfig& config) {
    return config.objective == Objective::autoregressive ? config.context + 1 : config.context;
}

Example make_example(const ModelConfig& config, const TokenStream& stream, std::size_t start, core::Rng& rng) {
    const std::size_t n = config.context;
    if (start + window_length(config) > stream.size()) throw ShapeError("make_example: window runs past the stream");
    Example ex;
    ex.inputs.assign(stream.begin() + static_cast<std::ptrdiff_t>(start),
                     stream.begin() + static_cast<std::ptrdiff_t>(start + n));
    if (config.objective == Objective::autoregressive) {
        ex.targets.assign(stream.begin() + static_cast<std::ptrdiff_t>(start + 1),
                          stream.begin() + static_cast<std::ptrdiff_t>(start + n + 1));
        return ex;
    }
    ex.targets.assign(n, -1);
    const auto count = static_cast<std::size_t>(std::lround(config.mask_fraction * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
        std::swap(order[i], order[i + rng.below(n - i)]);
        const std::size_t pos = order[i];
        ex.targets[pos] = ex.inputs[pos];
        ex.inputs[pos] = mask_token;
    }
    return ex;
}

namespace {

std::size_t scored(const Example& ex) {
    std::size_t count = 0;
    for (int t : ex.targets) count += t >= 0;
    return count;
}

}  // namespace

template <typename T>
TrainReport train(Model<T>& model, const TokenStream& stream, const TrainOptions& options) {
    const auto& config = model.config();
    const std::size_t window = window_length(config);
    if (stream.size() < window)
        throw ConfigError("train: stream of " + std::to_string(stream.size()) + " tokens is shorter than one window of " +
                          std::to_string(window));
    core::Rng rng(options.seed);
    AdamW<T> optimizer(config.optimizer, model.parameters());
    TrainReport report;
    const auto began = std::chrono::steady_clock::now();

    std::vector<Example> batch;
    for (std::size_t step = 0; step < options.steps; ++step) {
        if (batch.empty() || !options.fixed_batch) {
            batch.clear();
            for (std::size_t b = 0; b < config.batch; ++b)
                batch.push_back(make_example(config, stream, rng.below(stream.size() - window + 1), rng));
        }
        std::size_t targets = 0;
        for (const auto& ex : batch) targets += scored(ex);
        model.zero_grad();
        double total = 0;
        try {
            for (const auto& ex : batch) total += model.accumulate(ex.inputs, ex.targets, T{1} / static_cast<T>(targets));
        } catch (const NumericError& e) {
            throw NumericError("train: diverged at step " + std::to_string(step) + " (" + e.what() + ")");
        }
        const double loss = total / static_cast<double>(targets);
        const auto stats = optimizer.step(step, options.steps);
        report.losses.push_back(loss);
        report.grad_norms.push_back(stats.grad_norm);
        if (options.on_step) options.on_step(step, loss, stats.learning_rate);
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - began).count();
    return report;
}

template <typename T>
EvalReport evaluate(const Model<T>& model, const TokenStream& stream, std::uint64_t mask_seed) {
    const auto& config = model.config();
    const std::size_t window = window_length(config);
    if (stream.size() < window)
        throw ConfigError("evaluate: stream of " + std::to_string(stream.size()) +
                          " tokens is shorter than the model context window of " + std::to_string(window));
    core::Rng rng(mask_seed);
    EvalReport report;
    double total = 0;
    for (std::size_t start = 0; start + window <= stream.size(); start += config.context) {
        const Example ex = make_example(config, stream, start, rng);
        const std::size_t count = scored(ex);
        if (count == 0) continue;
        total += model.loss(ex.inputs, ex.targets);
        report.targets += count;
        ++report.windows;
    }
    report.mean_nats = total / static_cast<double>(report.targets);
    report.bpc = report.mean_nats / std::numbers::ln2;
    report.perplexity = std::exp(report.mean_nats);
    return report;
}

template <typename T>
AuditReport causality_audit(const Model<T>& model, std::span<const int> sample, std::span<const std::size_t> positions) {
    const auto& config = model.config();
    if (config.objective != Objective::autoregressive)
        throw ConfigError("causality_audit: needs an autoregressive model");
    const auto base = model.logits(sample);
    std::vector<std::size_t> all;
    if (positions.empty()) {
        for (std::size_t t = 0; t < sample.size(); ++t) all.push_back(t);
        positions = all;
    }
    AuditReport report;
    std::vector<int> perturbed(sample.begin(), sample.end());
    for (std::size_t t : positions) {
        perturbed[t] = (sample[t] + 1) % byte_vocab;
        const auto moved = model.logits(perturbed);
        perturbed[t] = sample[t];
        ++report.positions;
        const std::size_t prefix = t * base.cols() * sizeof(T);
        if (prefix > 0 && std::memcmp(base.data().data(), moved.data().data(), prefix) != 0)
            report.violations.push_back(t);
    }
    return report;
}

#define FMATTN_INSTANTIATE_TRAIN(T)                                                                 \
    template TrainReport train(Model<T>&, const TokenStream&, const TrainOptions&);                \
    template EvalReport evaluate(const Model<T>&, const TokenStream&, std::uint64_t);              \
    template AuditReport causality_audit(const Model<T>&, std::span<const int>, std::span<const std::size_t>);

FMATTN_INSTANTIATE_TRAIN(float)
FMATTN_INSTANTIATE_TRAIN(double)

}  // namespace fmattn::lm
