// SPDX-License-Identifier: Apache-2.0
#include "fmattn/downsampler.hpp"

#include <cmath>

#include "fmattn/core/ops.hpp"
#include "fmattn/core/random.hpp"

namespace fmattn {

const char* to_string(Stream stream) {
    switch (stream) {
        case Stream::key: return "key";
        case Stream::value: return "value";
        case Stream::query: return "query";
    }
    return "?";
}

InitStrategy parse_init_strategy(const std::string& text) {
    if (text == "average") return InitStrategy::average;
    if (text == "average_plus_noise") return InitStrategy::average_plus_noise;
    if (text == "random") return InitStrategy::random;
    throw ConfigError("unknown downsample init strategy '" + text + "'");
}

const char* to_string(InitStrategy strategy) {
    switch (strategy) {
        case InitStrategy::average: return "average";
        case InitStrategy::average_plus_noise: return "average_plus_noise";
        case InitStrategy::random: return "random";
    }
    return "?";
}

std::size_t query_taps(std::size_t summary, std::size_t group_size, std::size_t p, bool causal) {
    if (!causal) return group_size;
    return summary * (group_size / p) + 1;
}

double random_init_bound(std::size_t group_size) { return 1.0 / std::sqrt(static_cast<double>(group_size)); }

namespace {

bool masks_queries(const HierarchyConfig& c, Stream s) { return s == Stream::query && c.mode == Mode::causal; }

template <typename T>
void apply_tap_mask(core::Tensor<T>& kernel, const HierarchyConfig& c, std::size_t group_size) {
    const std::size_t d = kernel.extent(0), p = kernel.extent(1);
    for (std::size_t k = 0; k < d; ++k)
        for (std::size_t s = 0; s < p; ++s)
            for (std::size_t t = query_taps(s, group_size, c.p, true); t < group_size; ++t) kernel(k, s, t) = 0;
}

}  // namespace

template <typename T>
DownsampleWeights<T>::DownsampleWeights(const HierarchyConfig& config, std::size_t d, bool with_query)
    : config_(config), d_(d), with_query_(with_query) {
    for (std::size_t s = 0; s < stream_count; ++s) {
        const auto stream = static_cast<Stream>(s);
        if (!has(stream)) continue;
        for (int level = 1; level <= config.levels; ++level) {
            const std::size_t ml = config.group_size(level);
            kernels_[s].emplace_back(std::string(to_string(stream)) + ".l" + std::to_string(level),
                                     core::Tensor<T>(core::Shape{d, config.p, ml}));
        }
    }
}

template <typename T>
bool DownsampleWeights<T>::has(Stream stream) const {
    return stream != Stream::query || with_query_;
}

template <typename T>
core::Parameter<T>& DownsampleWeights<T>::kernel(Stream stream, int level) {
    if (!has(stream)) throw ConfigError("downsample weights: no query stream");
    if (level < 1 || level > config_.levels) throw std::out_of_range("downsample weights: level");
    return kernels_[static_cast<std::size_t>(stream)][level - 1];
}

template <typename T>
const core::Parameter<T>& DownsampleWeights<T>::kernel(Stream stream, int level) const {
    if (!has(stream)) throw ConfigError("downsample weights: no query stream");
    if (level < 1 || level > config_.levels) throw std::out_of_range("downsample weights: level");
    return kernels_[static_cast<std::size_t>(stream)][level - 1];
}

template <typename T>
std::vector<core::Parameter<T>*> DownsampleWeights<T>::parameters() {
    std::vector<core::Parameter<T>*> out;
    for (auto& per_stream : kernels_)
        for (auto& p : per_stream) out.push_back(&p);
    return out;
}

template <typename T>
std::vector<const core::Parameter<T>*> DownsampleWeights<T>::parameters() const {
    std::vector<const core::Parameter<T>*> out;
    for (const auto& per_stream : kernels_)
        for (const auto& p : per_stream) out.push_back(&p);
    return out;
}

template <typename T>
void DownsampleWeights<T>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
DownsampleWeights<T> init_downsample(const HierarchyConfig& config, std::size_t d, bool with_query,
                                     InitStrategy strategy, std::uint64_t seed) {
    DownsampleWeights<T> w(config, d, with_query);
    core::Rng rng(seed);
    for (std::size_t s = 0; s < stream_count; ++s) {
        const auto stream = static_cast<Stream>(s);
        if (!w.has(stream)) continue;
        for (int level = 1; level <= config.levels; ++level) {
            const std::size_t ml = config.group_size(level);
            const bool causal_query = masks_queries(config, stream);
            auto& kernel = w.kernel(stream, level).value;
            for (std::size_t k = 0; k < d; ++k)
                for (std::size_t s_ = 0; s_ < config.p; ++s_) {
                    // Causal query summaries average over the taps they can read.
                    const std::size_t taps = query_taps(s_, ml, config.p, causal_query);
                    const double avg = 1.0 / static_cast<double>(taps);
                    for (std::size_t t = 0; t < ml; ++t) {
                        T& x = kernel(k, s_, t);
                        switch (strategy) {
                            case InitStrategy::average: x = static_cast<T>(avg); break;
                            case InitStrategy::average_plus_noise:
                                x = static_cast<T>(avg + rng.uniform(-0.1 * avg, 0.1 * avg));
                                break;
                            case InitStrategy::random: {
                                const double b = random_init_bound(ml);
                                x = static_cast<T>(rng.uniform(-b, b));
                                break;
                            }
                        }
                    }
                }
            if (causal_query) apply_tap_mask(kernel, config, ml);
        }
    }
    return w;
}

template <typename T>
core::Tensor<T> downsample(const core::Tensor<T>& x, int level, const DownsampleWeights<T>& weights, Stream stream) {
    const auto& c = weights.config();
    if (x.rank() != 2 || x.rows() != c.n || x.cols() != weights.head_dim())
        throw ShapeError("downsample: input " + core::shape_string(x.shape()) + " for n=" + std::to_string(c.n) +
                         ", d=" + std::to_string(weights.head_dim()));
    core::PhaseScope phase(core::Phase::downsample);
    const std::size_t ml = c.group_size(level);
    const auto& kernel = weights.kernel(stream, level).value;
    if (!masks_queries(c, stream)) return core::grouped_conv1d(x, kernel, ml);
    core::Tensor<T> masked = kernel;
    apply_tap_mask(masked, c, ml);
    return core::grouped_conv1d(x, masked, ml);
}

template <typename T>
void downsample_backward(const core::Tensor<T>& upstream, const core::Tensor<T>& x, int level,
                         DownsampleWeights<T>& weights, Stream stream, core::Tensor<T>* grad_x) {
    const auto& c = weights.config();
    core::PhaseScope phase(core::Phase::downsample);
    const std::size_t ml = c.group_size(level);
    auto& param = weights.kernel(stream, level);
    if (!masks_queries(c, stream)) {
        core::grouped_conv1d_backward(x, param.value, ml, upstream, grad_x, &param.grad);
        return;
    }
    core::Tensor<T> masked = param.value;
    apply_tap_mask(masked, c, ml);
    core::Tensor<T> grad_kernel(masked.shape());
    core::grouped_conv1d_backward(x, masked, ml, upstream, grad_x, &grad_kernel);
    apply_tap_mask(grad_kernel, c, ml);
    param.grad += grad_kernel;
}

template class DownsampleWeights<float>;
template class DownsampleWeights<double>;
template DownsampleWeights<float> init_downsample(const HierarchyConfig&, std::size_t, bool, InitStrategy, std::uint64_t);
template DownsampleWeights<double> init_downsample(const HierarchyConfig&, std::size_t, bool, InitStrategy, std::uint64_t);
template core::Tensor<float> downsample(const core::Tensor<float>&, int, const DownsampleWeights<float>&, Stream);
template core::Tensor<double> downsample(const core::Tensor<double>&, int, const DownsampleWeights<double>&, Stream);
template void downsample_backward(const core::Tensor<float>&, const core::Tensor<float>&, int,
                                  DownsampleWeights<float>&, Stream, core::Tensor<float>*);
template void downsample_backward(const core::Tensor<double>&, const core::Tensor<double>&, int,
                                  DownsampleWeights<double>&, Stream, core::Tensor<double>*);

}  // namespace fmattn
