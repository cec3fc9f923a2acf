// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fmattn/core/tensor.hpp"
#include "fmattn/hierarchy.hpp"

namespace fmattn {

enum class Stream { key = 0, value = 1, query = 2 };
inline constexpr std::size_t stream_count = 3;

const char* to_string(Stream stream);

enum class InitStrategy { average, average_plus_noise, random };

InitStrategy parse_init_strategy(const std::string& text);
const char* to_string(InitStrategy strategy);

/// Learned summarisation kernels for one attention head: per stream and per
/// coarse level a [d x p x m_l] tensor. The query stream exists only for the
/// linear variant.
///
/// In causal mode query summaries must not see tokens later than any row that
/// uses them, so summary s of a query group only reads the first
/// s * (m_l / p) + 1 positions of the group (see query_taps). Masked taps are
/// held at zero and receive no gradient.
template <typename T>
class DownsampleWeights {
  public:
    DownsampleWeights() = default;
    DownsampleWeights(const HierarchyConfig& config, std::size_t d, bool with_query);

    const HierarchyConfig& config() const { return config_; }
    std::size_t head_dim() const { return d_; }
    bool has(Stream stream) const;
    int levels() const { return config_.levels; }

    core::Parameter<T>& kernel(Stream stream, int level);
    const core::Parameter<T>& kernel(Stream stream, int level) const;

    /// All parameters in a fixed order: streams key, value, query; levels 1..L.
    std::vector<core::Parameter<T>*> parameters();
    std::vector<const core::Parameter<T>*> parameters() const;

    void zero_grad();

  private:
    HierarchyConfig config_{};
    std::size_t d_ = 0;
    bool with_query_ = false;
    std::array<std::vector<core::Parameter<T>>, stream_count> kernels_;
};

/// Number of leading positions of a group that query summary `summary` may
/// read: all m_l positions unless `causal`, else summary * (m_l / p) + 1.
std::size_t query_taps(std::size_t summary, std::size_t group_size, std::size_t p, bool causal);

/// Initial weights.
///  - average: every entry 1/m_l
///  - average_plus_noise: 1/m_l + U(-eps, eps), eps = 0.1/m_l
///  - random: U(-1/sqrt(m_l), 1/sqrt(m_l))
/// Deterministic in `seed`.
template <typename T>
DownsampleWeights<T> init_downsample(const HierarchyConfig& config, std::size_t d, bool with_query,
                                     InitStrategy strategy, std::uint64_t seed);

/// Bounds of the `random` strategy at group size m_l.
double random_init_bound(std::size_t group_size);

/// Produces the [n p / m_l x d] summaries of X on `level` for `stream`.
template <typename T>
core::Tensor<T> downsample(const core::Tensor<T>& x, int level, const DownsampleWeights<T>& weights, Stream stream);

/// Adjoint of downsample: accumulates into grad_x (may be null) and into the
/// kernel's gradient.
template <typename T>
void downsample_backward(const core::Tensor<T>& upstream, const core::Tensor<T>& x, int level,
                         DownsampleWeights<T>& weights, Stream stream, core::Tensor<T>* grad_x);

}  // namespace fmattn
