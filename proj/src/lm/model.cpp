// SPDX-License-Identifier: Apache-2.0
#include "fmattn/lm/model.hpp"

#include <cmath>
#include <string>

#include "fmattn/core/counters.hpp"
#include "fmattn/core/ops.hpp"
#include "fmattn/core/random.hpp"

namespace fmattn::lm {

using core::Shape;
using core::Tensor;

namespace {

template <typename T>
core::Parameter<T> normal_param(std::string name, Shape shape, core::Rng& rng, double stddev) {
    return core::Parameter<T>(std::move(name), core::normal_tensor<T>(std::move(shape), rng, stddev));
}

template <typename T>
core::Parameter<T> constant_param(std::string name, std::size_t width, T value) {
    return core::Parameter<T>(std::move(name), Tensor<T>(Shape{width}, value));
}

/// Columns [first, first + count) of x as a contiguous matrix.
template <typename T>
Tensor<T> columns(const Tensor<T>& x, std::size_t first, std::size_t count) {
    Tensor<T> out(Shape{x.rows(), count});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const auto src = x.row(i).subspan(first, count);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

template <typename T>
void store_columns(Tensor<T>& dst, const Tensor<T>& src, std::size_t first) {
    for (std::size_t i = 0; i < src.rows(); ++i) {
        const auto row = src.row(i);
        std::copy(row.begin(), row.end(), dst.row(i).begin() + static_cast<std::ptrdiff_t>(first));
    }
}

template <typename T>
Tensor<T> project(const Tensor<T>& x, const core::Parameter<T>& w) {
    core::PhaseScope phase(core::Phase::projection);
    return core::matmul(x, w.value);
}

/// Adjoint of project: accumulates the weight gradient and returns dX.
template <typename T>
Tensor<T> project_backward(const Tensor<T>& upstream, const Tensor<T>& x, core::Parameter<T>& w) {
    core::PhaseScope phase(core::Phase::projection);
    w.grad += core::matmul_tn(x, upstream);
    return core::matmul_nt(upstream, w.value);
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    const std::size_t w = config_.width, hidden = 4 * w, vocab = config_.vocab();
    const double std = config_.init_std;
    const double residual_std = std / std::sqrt(2.0 * static_cast<double>(config_.layers));
    core::Rng rng(seed);

    token_embedding_ = normal_param<T>("embed.token", Shape{vocab, w}, rng, std);
    position_embedding_ = normal_param<T>("embed.position", Shape{config_.context, w}, rng, std);
    if (config_.variant != Variant::dense) hierarchy_ = std::make_shared<const Hierarchy>(config_.hierarchy());

    for (std::size_t l = 0; l < config_.layers; ++l) {
        const std::string prefix = "layer" + std::to_string(l) + ".";
        Layer layer{constant_param<T>(prefix + "norm1.gain", w, T{1}),
                    constant_param<T>(prefix + "norm1.bias", w, T{0}),
                    normal_param<T>(prefix + "attn.query", Shape{w, w}, rng, std),
                    normal_param<T>(prefix + "attn.key", Shape{w, w}, rng, std),
                    normal_param<T>(prefix + "attn.value", Shape{w, w}, rng, std),
                    normal_param<T>(prefix + "attn.output", Shape{w, w}, rng, residual_std),
                    constant_param<T>(prefix + "norm2.gain", w, T{1}),
                    constant_param<T>(prefix + "norm2.bias", w, T{0}),
                    normal_param<T>(prefix + "mlp.in", Shape{w, hidden}, rng, std),
                    constant_param<T>(prefix + "mlp.in_bias", hidden, T{0}),
                    normal_param<T>(prefix + "mlp.out", Shape{hidden, w}, rng, residual_std),
                    constant_param<T>(prefix + "mlp.out_bias", w, T{0}),
                    {}};
        if (hierarchy_) {
            const bool with_query = config_.variant == Variant::fma_linear;
            for (std::size_t h = 0; h < config_.heads; ++h) {
                auto weights = init_downsample<T>(hierarchy_->config(), config_.head_dim(), with_query,
                                                  config_.downsample_init, rng.next());
                for (auto* p : weights.parameters())
                    p->name = prefix + "head" + std::to_string(h) + ".downsample." + p->name;
                layer.downsample.push_back(std::move(weights));
            }
        }
        layers_.push_back(std::move(layer));
    }
    final_gain_ = constant_param<T>("final_norm.gain", w, T{1});
    final_bias_ = constant_param<T>("final_norm.bias", w, T{0});
    unembed_ = normal_param<T>("output", Shape{w, vocab}, rng, std);
}

template <typename T>
std::vector<core::Parameter<T>*> Model<T>::parameters() {
    std::vector<Param*> out{&token_embedding_, &position_embedding_};
    for (auto& layer : layers_) {
        for (Param* p : {&layer.norm1_gain, &layer.norm1_bias, &layer.query, &layer.key, &layer.value, &layer.output,
                         &layer.norm2_gain, &layer.norm2_bias, &layer.mlp_in, &layer.mlp_in_bias, &layer.mlp_out,
                         &layer.mlp_out_bias})
            out.push_back(p);
        for (auto& weights : layer.downsample)
            for (auto* p : weights.parameters()) out.push_back(p);
    }
    for (Param* p : {&final_gain_, &final_bias_, &unembed_}) out.push_back(p);
    return out;
}

template <typename T>
std::vector<const core::Parameter<T>*> Model<T>::parameters() const {
    std::vector<const Param*> out{&token_embedding_, &position_embedding_};
    for (const auto& layer : layers_) {
        for (const Param* p : {&layer.norm1_gain, &layer.norm1_bias, &layer.query, &layer.key, &layer.value,
                               &layer.output, &layer.norm2_gain, &layer.norm2_bias, &layer.mlp_in, &layer.mlp_in_bias,
                               &layer.mlp_out, &layer.mlp_out_bias})
            out.push_back(p);
        for (const auto& weights : layer.downsample)
            for (const auto* p : weights.parameters()) out.push_back(p);
    }
    for (const Param* p : {&final_gain_, &final_bias_, &unembed_}) out.push_back(p);
    return out;
}

template <typename T>
std::size_t Model<T>::downsample_parameter_count() const {
    std::size_t total = 0;
    for (const auto& layer : layers_)
        for (const auto& weights : layer.downsample)
            for (const auto* p : weights.parameters()) total += p->value.size();
    return total;
}

template <typename T>
std::size_t Model<T>::shared_parameter_count() const {
    std::size_t total = 0;
    for (const auto* p : parameters()) total += p->value.size();
    return total - downsample_parameter_count();
}

template <typename T>
void Model<T>::zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
void Model<T>::check_tokens(std::span<const int> tokens) const {
    if (tokens.size() != config_.context)
        throw ShapeError("model: expected " + std::to_string(config_.context) + " tokens, got " +
                         std::to_string(tokens.size()));
    const int vocab = static_cast<int>(config_.vocab());
    for (int t : tokens)
        if (t < 0 || t >= vocab) throw ShapeError("model: token id " + std::to_string(t) + " outside vocabulary");
}

template <typename T>
Tensor<T> Model<T>::run(std::span<const int> tokens, Tape* tape) const {
    check_tokens(tokens);
    const std::size_t n = config_.context, w = config_.width, d = config_.head_dim();
    Tensor<T> x(Shape{n, w});
    for (std::size_t i = 0; i < n; ++i) {
        const auto tok = token_embedding_.value.row(static_cast<std::size_t>(tokens[i]));
        const auto pos = position_embedding_.value.row(i);
        auto xi = x.row(i);
        for (std::size_t c = 0; c < w; ++c) xi[c] = tok[c] + pos[c];
    }
    if (tape) tape->layers.resize(layers_.size());

    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const Layer& layer = layers_[l];
        LayerTape local;
        LayerTape& lt = tape ? tape->layers[l] : local;

        lt.h1 = layer_norm(x, layer.norm1_gain.value, layer.norm1_bias.value, &lt.norm1);
        lt.q = project(lt.h1, layer.query);
        lt.k = project(lt.h1, layer.key);
        lt.v = project(lt.h1, layer.value);
        lt.attended = Tensor<T>(Shape{n, w});
        lt.heads.resize(config_.heads);
        for (std::size_t h = 0; h < config_.heads; ++h) {
            const auto qh = columns(lt.q, h * d, d), kh = columns(lt.k, h * d, d), vh = columns(lt.v, h * d, d);
            Tensor<T> out;
            switch (config_.variant) {
                case Variant::dense: {
                    auto r = dense_forward(qh, kh, vh, config_.mode());
                    out = std::move(r.output);
                    if (tape) lt.heads[h].dense = std::move(r.tape);
                    break;
                }
                case Variant::fma:
                case Variant::fma_linear: {
                    auto r = config_.variant == Variant::fma ? forward(qh, kh, vh, layer.downsample[h], hierarchy_)
                                                             : forward_linear(qh, kh, vh, layer.downsample[h], hierarchy_);
                    out = std::move(r.output);
                    if (tape) lt.heads[h].fast = std::move(r.tape);
                    break;
                }
            }
            store_columns(lt.attended, out, h * d);
        }
        x += project(lt.attended, layer.output);

        lt.h2 = layer_norm(x, layer.norm2_gain.value, layer.norm2_bias.value, &lt.norm2);
        lt.pre_activation = project(lt.h2, layer.mlp_in);
        add_row_bias(lt.pre_activation, layer.mlp_in_bias.value);
        lt.activation = gelu(lt.pre_activation);
        auto mlp = project(lt.activation, layer.mlp_out);
        add_row_bias(mlp, layer.mlp_out_bias.value);
        x += mlp;
    }

    LayerNormCache<T> final_cache;
    auto hidden = layer_norm(x, final_gain_.value, final_bias_.value, tape ? &tape->final_norm : &final_cache);
    auto logits = project(hidden, unembed_);
    if (tape) tape->final_hidden = std::move(hidden);
    return logits;
}

template <typename T>
Tensor<T> Model<T>::logits(std::span<const int> tokens) const {
    return run(tokens, nullptr);
}

template <typename T>
double Model<T>::loss(std::span<const int> inputs, std::span<const int> targets) const {
    return cross_entropy<T>(run(inputs, nullptr), targets, T{1}, nullptr);
}

template <typename T>
double Model<T>::accumulate(std::span<const int> inputs, std::span<const int> targets, T scale) {
    Tape tape;
    const auto logits = run(inputs, &tape);
    Tensor<T> grad_logits;
    const double total = cross_entropy<T>(logits, targets, scale, &grad_logits);

    const std::size_t n = config_.context, d = config_.head_dim();
    auto dx = layer_norm_backward(project_backward(grad_logits, tape.final_hidden, unembed_), final_gain_.value,
                                  tape.final_norm, final_gain_.grad, final_bias_.grad);

    for (std::size_t l = layers_.size(); l-- > 0;) {
        Layer& layer = layers_[l];
        LayerTape& lt = tape.layers[l];

        row_bias_backward(dx, layer.mlp_out_bias.grad);
        auto d_act = project_backward(dx, lt.activation, layer.mlp_out);
        auto d_pre = gelu_backward(d_act, lt.pre_activation);
        row_bias_backward(d_pre, layer.mlp_in_bias.grad);
        auto d_h2 = project_backward(d_pre, lt.h2, layer.mlp_in);
        dx += layer_norm_backward(d_h2, layer.norm2_gain.value, lt.norm2, layer.norm2_gain.grad, layer.norm2_bias.grad);

        const auto d_attended = project_backward(dx, lt.attended, layer.output);
        Tensor<T> dq(Shape{n, config_.width}), dk(dq.shape()), dv(dq.shape());
        for (std::size_t h = 0; h < config_.heads; ++h) {
            const auto up = columns(d_attended, h * d, d);
            AttentionGrads<T> grads(n, d);
            if (config_.variant == Variant::dense)
                dense_backward(lt.heads[h].dense, up, grads);
            else
                backward(lt.heads[h].fast, up, layer.downsample[h], grads);
            store_columns(dq, grads.q, h * d);
            store_columns(dk, grads.k, h * d);
            store_columns(dv, grads.v, h * d);
        }
        auto d_h1 = project_backward(dq, lt.h1, layer.query);
        d_h1 += project_backward(dk, lt.h1, layer.key);
        d_h1 += project_backward(dv, lt.h1, layer.value);
        dx += layer_norm_backward(d_h1, layer.norm1_gain.value, lt.norm1, layer.norm1_gain.grad, layer.norm1_bias.grad);
    }

    for (std::size_t i = 0; i < n; ++i) {
        const auto g = dx.row(i);
        auto tok = token_embedding_.grad.row(static_cast<std::size_t>(inputs[i]));
        auto pos = position_embedding_.grad.row(i);
        for (std::size_t c = 0; c < g.size(); ++c) {
            tok[c] += g[c];
            pos[c] += g[c];
        }
    }
    return total;
}

template class Model<float>;
template class Model<double>;

}  // namespace fmattn::lm
