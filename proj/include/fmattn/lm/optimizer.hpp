// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "fmattn/core/tensor.hpp"
#include "fmattn/lm/config.hpp"

namespace fmattn::lm {

/// Linear warmup to `lr`, then cosine decay to lr * min_lr_ratio at `total`.
double learning_rate(const OptimizerConfig& config, std::size_t step, std::size_t total);

struct StepStats {
    double learning_rate = 0;
    double grad_norm = 0;  // before clipping
};

/// Adam with decoupled weight decay and global-norm gradient clipping.
/// Decay applies to rank-2 weights other than embeddings.
template <typename T>
class AdamW {
  public:
    AdamW(const OptimizerConfig& config, std::vector<core::Parameter<T>*> params);

    /// Applies one update from the current gradients. Throws NumericError when
    /// the gradient norm is not finite.
    StepStats step(std::size_t step_index, std::size_t total_steps);

  private:
    OptimizerConfig config_;
    std::vector<core::Parameter<T>*> params_;
    std::vector<core::Tensor<T>> first_, second_;
    std::vector<bool> decays_;
    std::size_t updates_ = 0;
};

}  // namespace fmattn::lm
