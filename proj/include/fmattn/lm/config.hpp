// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "fmattn/downsampler.hpp"
#include "fmattn/fma.hpp"
#include "fmattn/hierarchy.hpp"

namespace fmattn::lm {

enum class Objective { autoregressive, masked };

const char* to_string(Objective objective);
Objective parse_objective(const std::string& text);

/// Byte values occupy ids 0..255; the masked objective adds one mask id.
inline constexpr int byte_vocab = 256;
inline constexpr int mask_token = 256;

struct OptimizerConfig {
    double lr = 3e-3;
    std::size_t warmup = 100;    // linear warmup steps
    double min_lr_ratio = 0.1;   // cosine decay floor, relative to lr
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.01;  // decoupled, matrices only
    double clip = 1.0;           // global gradient norm
};

struct ModelConfig {
    std::size_t layers = 2;
    std::size_t width = 128;
    std::size_t heads = 4;
    std::size_t context = 256;  // n
    Variant variant = Variant::fma;
    std::size_t m = 32;
    std::size_t p = 4;
    PartitionRule rule = PartitionRule::fmm_parity;
    Objective objective = Objective::autoregressive;
    InitStrategy downsample_init = InitStrategy::average_plus_noise;
    double init_std = 0.02;

    // Training.
    std::size_t batch = 4;
    std::size_t steps = 2000;
    double mask_fraction = 0.15;
    OptimizerConfig optimizer;

    std::size_t head_dim() const { return width / heads; }
    std::size_t vocab() const { return objective == Objective::masked ? byte_vocab + 1 : byte_vocab; }
    /// Causal for next-token prediction, bidirectional for masked tokens.
    Mode mode() const { return objective == Objective::autoregressive ? Mode::causal : Mode::bidirectional; }
    HierarchyConfig hierarchy() const { return make_config(context, m, p, mode(), rule); }

    /// Throws ConfigError when the fields are inconsistent.
    void validate() const;

    std::string to_text() const;
};

/// Reads `to_text` output or a hand-written file; absent keys keep defaults.
ModelConfig parse_model_config(const std::string& text);
ModelConfig load_model_config(const std::string& path);

}  // namespace fmattn::lm
