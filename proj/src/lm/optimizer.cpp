// SPDX-License-Identifier: Apache-2.0
#include "fmattn/lm/optimizer.hpp"

#include <cmath>
#include <numbers>

namespace fmattn::lm {

double learning_rate(const OptimizerConfig& config, std::size_t step, std::size_t total) {
    if (step < config.warmup) return config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup);
    const double span = total > config.warmup ? static_cast<double>(total - config.warmup) : 1.0;
    const double progress = std::min(1.0, static_cast<double>(step - config.warmup) / span);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return config.lr * (config.min_lr_ratio + (1.0 - config.min_lr_ratio) * cosine);
}

template <typename T>
AdamW<T>::AdamW(const OptimizerConfig& config, std::vector<core::Parameter<T>*> params)
    : config_(config), params_(std::move(params)) {
    for (auto* p : params_) {
        first_.emplace_back(p->value.shape());
        second_.emplace_back(p->value.shape());
        decays_.push_back(p->value.rank() == 2 && p->name.rfind("embed.", 0) != 0);
    }
}

template <typename T>
StepStats AdamW<T>::step(std::size_t step_index, std::size_t total_steps) {
    double sq = 0;
    for (const auto* p : params_)
        for (T g : p->grad.data()) sq += static_cast<double>(g) * static_cast<double>(g);
    StepStats stats;
    stats.grad_norm = std::sqrt(sq);
    if (!std::isfinite(stats.grad_norm))
        throw NumericError("optimizer: non-finite gradient norm at step " + std::to_string(step_index));
    stats.learning_rate = learning_rate(config_, step_index, total_steps);

    const double clip = stats.grad_norm > config_.clip ? config_.clip / stats.grad_norm : 1.0;
    ++updates_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(updates_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(updates_));
    const T lr = static_cast<T>(stats.learning_rate);
    const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
    const T inv_c1 = static_cast<T>(1.0 / c1), inv_c2 = static_cast<T>(1.0 / c2);
    const T eps = static_cast<T>(config_.eps), scale = static_cast<T>(clip);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto value = params_[i]->value.data();
        const auto grad = params_[i]->grad.data();
        auto m = first_[i].data();
        auto v = second_[i].data();
        const T decay = decays_[i] ? T{1} - lr * static_cast<T>(config_.weight_decay) : T{1};
        for (std::size_t j = 0; j < value.size(); ++j) {
            const T g = grad[j] * scale;
            m[j] = b1 * m[j] + (T{1} - b1) * g;
            v[j] = b2 * v[j] + (T{1} - b2) * g * g;
            value[j] = value[j] * decay - lr * (m[j] * inv_c1) / (std::sqrt(v[j] * inv_c2) + eps);
        }
    }
    return stats;
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace fmattn::lm
