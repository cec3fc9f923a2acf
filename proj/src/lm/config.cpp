// SPDX-License-Identifier: Apache-2.0
#include "fmattn/lm/config.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include "fmattn/core/error.hpp"
#include "fmattn/core/keyvalue.hpp"

namespace fmattn::lm {

const char* to_string(Objective objective) {
    return objective == Objective::autoregressive ? "autoregressive" : "masked";
}

Objective parse_objective(const std::string& text) {
    if (text == "autoregressive") return Objective::autoregressive;
    if (text == "masked") return Objective::masked;
    throw ConfigError("unknown objective '" + text + "'");
}

void ModelConfig::validate() const {
    if (layers == 0 || width == 0 || heads == 0 || context == 0) throw ConfigError("model: sizes must be positive");
    if (width % heads != 0)
        throw ConfigError("model: width=" + std::to_string(width) + " is not a multiple of heads=" + std::to_string(heads));
    if (batch == 0) throw ConfigError("model: batch must be positive");
    if (!(mask_fraction > 0 && mask_fraction < 1)) throw ConfigError("model: mask_fraction must lie in (0, 1)");
    if (!(optimizer.lr > 0) || !(optimizer.clip > 0)) throw ConfigError("model: lr and clip must be positive");
    if (variant != Variant::dense) (void)hierarchy();  // throws on invalid n, m, p
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "layers=" << layers << "\nwidth=" << width << "\nheads=" << heads << "\ncontext=" << context
       << "\nvariant=" << to_string(variant) << "\nm=" << m << "\np=" << p << "\npartition_rule=" << to_string(rule)
       << "\nobjective=" << to_string(objective) << "\ndownsample_init=" << to_string(downsample_init)
       << "\ninit_std=" << init_std << "\nbatch=" << batch << "\nsteps=" << steps << "\nmask_fraction=" << mask_fraction
       << "\nlr=" << optimizer.lr << "\nwarmup=" << optimizer.warmup << "\nmin_lr_ratio=" << optimizer.min_lr_ratio
       << "\nbeta1=" << optimizer.beta1 << "\nbeta2=" << optimizer.beta2 << "\neps=" << optimizer.eps
       << "\nweight_decay=" << optimizer.weight_decay << "\nclip=" << optimizer.clip << "\n";
    return os.str();
}

ModelConfig parse_model_config(const std::string& text) {
    const auto kv = core::KeyValues::parse(text, "model config");
    static const char* known[] = {"layers", "width", "heads", "context", "variant", "m", "p", "partition_rule",
                                  "objective", "downsample_init", "init_std", "batch", "steps", "mask_fraction", "lr",
                                  "warmup", "min_lr_ratio", "beta1", "beta2", "eps", "weight_decay", "clip"};
    for (const auto& [key, value] : kv.entries()) {
        bool found = false;
        for (const char* k : known) found = found || key == k;
        if (!found) throw ConfigError("model config: unknown key '" + key + "'");
    }
    ModelConfig c;
    c.layers = kv.size("layers", c.layers);
    c.width = kv.size("width", c.width);
    c.heads = kv.size("heads", c.heads);
    c.context = kv.size("context", c.context);
    c.variant = parse_variant(kv.text("variant", to_string(c.variant)));
    c.m = kv.size("m", c.m);
    c.p = kv.size("p", c.p);
    c.rule = parse_partition_rule(kv.text("partition_rule", to_string(c.rule)));
    c.objective = parse_objective(kv.text("objective", to_string(c.objective)));
    c.downsample_init = parse_init_strategy(kv.text("downsample_init", to_string(c.downsample_init)));
    c.init_std = kv.number("init_std", c.init_std);
    c.batch = kv.size("batch", c.batch);
    c.steps = kv.size("steps", c.steps);
    c.mask_fraction = kv.number("mask_fraction", c.mask_fraction);
    auto& o = c.optimizer;
    o.lr = kv.number("lr", o.lr);
    o.warmup = kv.size("warmup", o.warmup);
    o.min_lr_ratio = kv.number("min_lr_ratio", o.min_lr_ratio);
    o.beta1 = kv.number("beta1", o.beta1);
    o.beta2 = kv.number("beta2", o.beta2);
    o.eps = kv.number("eps", o.eps);
    o.weight_decay = kv.number("weight_decay", o.weight_decay);
    o.clip = kv.number("clip", o.clip);
    c.validate();
    return c;
}

ModelConfig load_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read model config '" + path + "'");
    std::ostringstream text;
    text << in.rdbuf();
    return parse_model_config(text.str());
}

}  // namespace fmattn::lm
