// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "fmattn/core/tensor.hpp"
#include "fmattn/dense_attention.hpp"
#include "fmattn/downsampler.hpp"
#include "fmattn/fma.hpp"
#include "fmattn/lm/config.hpp"
#include "fmattn/lm/layers.hpp"

// Pre-norm transformer over byte tokens:
//   x = token_embedding + position_embedding
//   per layer: x += W_o attention(norm1(x)); x += mlp(norm2(x))
//   logits = norm_final(x) W_out
// Attention runs per head through dense, FMA or FMA-linear; only the
// downsampling kernels differ between variants.

namespace fmattn::lm {

template <typename T>
class Model {
  public:
    Model(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    /// Every trainable tensor in a fixed order (the checkpoint order).
    std::vector<core::Parameter<T>*> parameters();
    std::vector<const core::Parameter<T>*> parameters() const;

    /// Scalar count of every parameter except the downsampling kernels.
    std::size_t shared_parameter_count() const;
    /// Scalar count of the downsampling kernels (zero for dense attention).
    std::size_t downsample_parameter_count() const;

    void zero_grad();

    /// Logits [context x vocab] for exactly `context` input tokens.
    core::Tensor<T> logits(std::span<const int> tokens) const;

    /// Forward and backward on one sequence. Targets < 0 are ignored. Adds
    /// `scale` times the gradient of the summed cross-entropy to every
    /// parameter and returns that sum in nats.
    double accumulate(std::span<const int> inputs, std::span<const int> targets, T scale);

    /// Summed cross-entropy (nats) without touching gradients.
    double loss(std::span<const int> inputs, std::span<const int> targets) const;

  private:
    using Param = core::Parameter<T>;

    struct Layer {
        Param norm1_gain, norm1_bias;
        Param query, key, value, output;
        Param norm2_gain, norm2_bias;
        Param mlp_in, mlp_in_bias, mlp_out, mlp_out_bias;
        std::vector<DownsampleWeights<T>> downsample;  // per head; empty for dense
    };

    struct HeadTape {
        DenseTape<T> dense;
        AttentionTape<T> fast;
    };

    struct LayerTape {
        LayerNormCache<T> norm1, norm2;
        core::Tensor<T> h1, q, k, v, attended, h2, pre_activation, activation;
        std::vector<HeadTape> heads;
    };

    struct Tape {
        std::vector<LayerTape> layers;
        LayerNormCache<T> final_norm;
        core::Tensor<T> final_hidden;
    };

    core::Tensor<T> run(std::span<const int> tokens, Tape* tape) const;
    void check_tokens(std::span<const int> tokens) const;

    ModelConfig config_;
    std::shared_ptr<const Hierarchy> hierarchy_;
    Param token_embedding_, position_embedding_;
    std::vector<Layer> layers_;
    Param final_gain_, final_bias_, unembed_;
};

}  // namespace fmattn::lm
