// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fmattn/core/random.hpp"
#include "fmattn/lm/data.hpp"
#include "fmattn/lm/model.hpp"

namespace fmattn::lm {

/// One training or evaluation example: `context` inputs and one target per
/// position (negative targets are not scored).
struct Example {
    std::vector<int> inputs;
    std::vector<int> targets;
};

/// Builds the example for the window starting at `start`.
///  - autoregressive: inputs stream[start, start + n), targets shifted by one.
///  - masked: round(mask_fraction * n) positions drawn with `rng` are replaced
///    by the mask token and scored against the original bytes.
Example make_example(const ModelConfig& config, const TokenStream& stream, std::size_t start, core::Rng& rng);

/// Tokens a window consumes: n + 1 (autoregressive) or n (masked).
std::size_t window_length(const ModelConfig& config);

struct TrainOptions {
    std::size_t steps = 0;
    std::uint64_t seed = 0;
    /// Reuse the first sampled batch on every step.
    bool fixed_batch = false;
    /// Called after every step with (step, mean loss in nats, learning rate).
    std::function<void(std::size_t, double, double)> on_step;
};

struct TrainReport {
    std::vector<double> losses;  // mean nats per scored target, one per step
    std::vector<double> grad_norms;
    double seconds = 0;
};

/// Trains in place. Single-threaded and deterministic in (model init, stream,
/// options). Throws NumericError naming the step when the loss diverges.
template <typename T>
TrainReport train(Model<T>& model, const TokenStream& stream, const TrainOptions& options);

struct EvalReport {
    double mean_nats = 0;   // per scored target
    double bpc = 0;         // mean_nats / ln 2
    double perplexity = 0;  // exp(mean_nats)
    std::size_t targets = 0;
    std::size_t windows = 0;
};

/// Non-overlapping windows over the whole stream (masks drawn from
/// `mask_seed`). Throws ConfigError when the stream is shorter than one window.
template <typename T>
EvalReport evaluate(const Model<T>& model, const TokenStream& stream, std::uint64_t mask_seed = 0);

struct AuditReport {
    std::size_t positions = 0;
    std::vector<std::size_t> violations;  // perturbed positions that changed an earlier logit
    bool passed() const { return violations.empty(); }
};

/// For every position t in `positions` (all when empty), replaces token t and
/// requires the logits of every earlier position to stay bit-identical.
template <typename T>
AuditReport causality_audit(const Model<T>& model, std::span<const int> sample,
                            std::span<const std::size_t> positions = {});

}  // namespace fmattn::lm
