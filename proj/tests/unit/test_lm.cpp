// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <limits>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "fmattn/core/error.hpp"
#include "fmattn/core/random.hpp"
#include "fmattn/lm/checkpoint.hpp"
#include "fmattn/lm/data.hpp"
#include "fmattn/lm/layers.hpp"
#include "fmattn/lm/model.hpp"
#include "fmattn/lm/optimizer.hpp"
#include "fmattn/lm/train.hpp"
#include "support.hpp"

namespace fmattn {
namespace {

using lm::ModelConfig;

ModelConfig tiny(Variant variant, lm::Objective objective = lm::Objective::autoregressive) {
    ModelConfig c;
    c.layers = 2;
    c.width = 8;
    c.heads = 2;
    c.context = 16;
    c.variant = variant;
    c.m = 2;
    c.p = 1;
    c.objective = objective;
    c.batch = 2;
    c.init_std = 0.3;
    return c;
}

std::vector<int> random_tokens(std::size_t count, core::Rng& rng, int vocab = 256) {
    std::vector<int> out(count);
    for (auto& t : out) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    return out;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("fmattn_test_" + name);
}

class ModelGradient : public ::testing::TestWithParam<std::tuple<Variant, lm::Objective>> {};

TEST_P(ModelGradient, MatchesFiniteDifferences) {
    const auto [variant, objective] = GetParam();
    auto config = tiny(variant, objective);
    config.downsample_init = InitStrategy::random;
    lm::Model<double> model(config, 3);
    core::Rng rng(4);
    auto inputs = random_tokens(config.context, rng);
    auto targets = random_tokens(config.context, rng);
    if (objective == lm::Objective::masked)
        for (std::size_t i = 0; i < targets.size(); i += 3) targets[i] = -1, inputs[i] = lm::mask_token;

    model.zero_grad();
    model.accumulate(inputs, targets, 1.0);
    for (auto* param : model.parameters()) {
        // A handful of coordinates per tensor; embedding rows of unused tokens
        // have zero gradient and are skipped by sampling used ones.
        for (int probe = 0; probe < 4; ++probe) {
            std::size_t index = rng.below(param->value.size());
            if (param->name == "embed.token")
                index = static_cast<std::size_t>(inputs[rng.below(inputs.size())]) * config.width +
                        rng.below(config.width);
            auto& x = param->value.data()[index];
            const double saved = x, h = 1e-5;
            x = saved + h;
            const double up = model.loss(inputs, targets);
            x = saved - h;
            const double down = model.loss(inputs, targets);
            x = saved;
            const double fd = (up - down) / (2 * h);
            const double got = param->grad.data()[index];
            EXPECT_NEAR(got, fd, 1e-6 * std::max(1.0, std::abs(fd))) << param->name << '[' << index << ']';
        }
    }
}

INSTANTIATE_TEST_SUITE_P(Variants, ModelGradient,
                         ::testing::Combine(::testing::Values(Variant::dense, Variant::fma, Variant::fma_linear),
                                            ::testing::Values(lm::Objective::autoregressive, lm::Objective::masked)));


// --- data --------------------------------------------------------------------

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary);
    out << bytes;
}

TEST(Data, BytesBecomeTokens) {
    EXPECT_EQ(lm::tokenize("ab"), (lm::TokenStream{97, 98}));
    EXPECT_EQ(lm::tokenize(std::string("\x00\xff", 2)), (lm::TokenStream{0, 255}));
}

TEST(Data, SplitSizes) {
    const lm::TokenStream tokens(1000, 7);
    const auto s = lm::split(tokens, {0.9, 0.05, 0.05});
    EXPECT_EQ(s.train.size(), 900u);
    EXPECT_EQ(s.valid.size(), 50u);
    EXPECT_EQ(s.test.size(), 50u);
    const auto odd = lm::split(lm::TokenStream(7, 1), {0.9, 0.05, 0.05});
    EXPECT_EQ(odd.train.size(), 6u);
    EXPECT_EQ(odd.valid.size(), 0u);
    EXPECT_EQ(odd.test.size(), 1u);
    EXPECT_THROW(lm::split(tokens, {0.9, 0.2, 0.05}), ConfigError);
}

TEST(Data, SplitsAreContiguous) {
    lm::TokenStream tokens(100);
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<int>(i);
    const auto s = lm::split(tokens, {0.8, 0.1, 0.1});
    EXPECT_EQ(s.train.back(), 79);
    EXPECT_EQ(s.valid.front(), 80);
    EXPECT_EQ(s.test.front(), 90);
    EXPECT_EQ(s.test.back(), 99);
}

TEST(Data, IngestIsDeterministicAndValidates) {
    const auto path = temp_path("ingest.txt");
    std::string text;
    for (int i = 0; i < 1000; ++i) text.push_back(static_cast<char>('a' + i % 26));
    write_file(path, text);
    const auto a = lm::ingest(path.string()), b = lm::ingest(path.string());
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.valid, b.valid);
    EXPECT_EQ(a.test, b.test);
    EXPECT_EQ(a.train.size(), 900u);
    EXPECT_EQ(a.train[1], 'b');

    write_file(path, "");
    EXPECT_THROW(lm::ingest(path.string()), ConfigError);
    std::filesystem::remove(path);
    EXPECT_THROW(lm::ingest(path.string()), std::runtime_error);
}

// --- config ------------------------------------------------------------------

TEST(Config, TextRoundTrip) {
    auto c = tiny(Variant::fma_linear, lm::Objective::masked);
    c.optimizer.lr = 1.25e-3;
    c.rule = PartitionRule::literal;
    const auto back = lm::parse_model_config(c.to_text());
    EXPECT_EQ(back.to_text(), c.to_text());
    EXPECT_EQ(back.variant, Variant::fma_linear);
    EXPECT_EQ(back.optimizer.lr, 1.25e-3);
}

TEST(Config, Validation) {
    EXPECT_THROW(lm::parse_model_config("widht=3\n"), ConfigError);
    EXPECT_THROW(lm::parse_model_config("width=130\nheads=4\n"), ConfigError);
    EXPECT_THROW(lm::parse_model_config("context=96\nm=32\n"), ConfigError);  // 96/32 not a power of two
    EXPECT_THROW(lm::parse_model_config("variant=sparse\n"), ConfigError);
    EXPECT_EQ(lm::parse_model_config("objective=masked\n").vocab(), 257u);
    EXPECT_EQ(lm::parse_model_config("").vocab(), 256u);
    EXPECT_EQ(lm::parse_model_config("").mode(), Mode::causal);
}

// --- layers ------------------------------------------------------------------

TEST(Layers, CrossEntropyOfUniformLogits) {
    core::Tensor<double> logits(core::Shape{3, 256});
    const std::vector<int> targets{5, -1, 200};
    core::Tensor<double> grad;
    const double nats = lm::cross_entropy<double>(logits, targets, 1.0, &grad);
    EXPECT_NEAR(nats, 2 * std::log(256.0), 1e-12);
    for (std::size_t c = 0; c < 256; ++c) EXPECT_EQ(grad(1, c), 0.0);
    EXPECT_NEAR(grad(0, 5), 1.0 / 256 - 1, 1e-15);
    EXPECT_NEAR(grad(2, 7), 1.0 / 256, 1e-15);
    logits(0, 0) = std::nan("");
    EXPECT_THROW(lm::cross_entropy<double>(logits, targets, 1.0, nullptr), NumericError);
}

TEST(Layers, LayerNormAndGeluMatchFiniteDifferences) {
    core::Rng rng(8);
    auto x = testing::random_matrix(4, 6, rng);
    auto gain = core::uniform_tensor<double>(core::Shape{6}, rng), bias = core::uniform_tensor<double>(core::Shape{6}, rng);
    const auto up = testing::random_matrix(4, 6, rng);
    auto loss = [&] { return testing::dot(lm::gelu(lm::layer_norm<double>(x, gain, bias, nullptr)), up); };
    lm::LayerNormCache<double> cache;
    const auto y = lm::layer_norm<double>(x, gain, bias, &cache);
    core::Tensor<double> dgain(gain.shape()), dbias(bias.shape());
    const auto dx = lm::layer_norm_backward(lm::gelu_backward(up, y), gain, cache, dgain, dbias);
    EXPECT_LT(testing::relative_error(dx, testing::finite_difference(x, loss)), 1e-7);
    EXPECT_LT(testing::relative_error(dgain, testing::finite_difference(gain, loss)), 1e-7);
    EXPECT_LT(testing::relative_error(dbias, testing::finite_difference(bias, loss)), 1e-7);
}

// --- optimizer ---------------------------------------------------------------

TEST(Optimizer, WarmupThenCosine) {
    lm::OptimizerConfig c;
    c.lr = 1.0;
    c.warmup = 10;
    c.min_lr_ratio = 0.1;
    EXPECT_DOUBLE_EQ(lm::learning_rate(c, 0, 110), 0.1);
    EXPECT_DOUBLE_EQ(lm::learning_rate(c, 9, 110), 1.0);
    EXPECT_DOUBLE_EQ(lm::learning_rate(c, 10, 110), 1.0);
    EXPECT_NEAR(lm::learning_rate(c, 60, 110), 0.55, 1e-12);
    EXPECT_NEAR(lm::learning_rate(c, 110, 110), 0.1, 1e-12);
}

TEST(Optimizer, FirstStepMovesBySignedLearningRate) {
    lm::OptimizerConfig c;
    c.lr = 0.5;
    c.warmup = 0;
    c.weight_decay = 0;
    c.clip = 1e9;
    core::Parameter<double> w("w", core::Tensor<double>(core::Shape{3}));
    w.grad[0] = 2;
    w.grad[1] = -0.001;
    lm::AdamW<double> opt(c, {&w});
    const auto stats = opt.step(0, 1);
    EXPECT_NEAR(w.value[0], -0.5, 1e-6);
    EXPECT_NEAR(w.value[1], 0.5, 1e-4);
    EXPECT_EQ(w.value[2], 0.0);
    EXPECT_NEAR(stats.grad_norm, std::sqrt(4 + 1e-6), 1e-12);
    w.grad[0] = std::nan("");
    EXPECT_THROW(opt.step(1, 2), NumericError);
}

TEST(Optimizer, DecaysMatricesButNotEmbeddingsOrVectors) {
    lm::OptimizerConfig c;
    c.lr = 0.1;
    c.warmup = 0;
    c.weight_decay = 0.5;
    core::Parameter<double> matrix("layer0.attn.query", core::Tensor<double>(core::Shape{1, 1}, {1.0}));
    core::Parameter<double> embed("embed.token", core::Tensor<double>(core::Shape{1, 1}, {1.0}));
    core::Parameter<double> gain("layer0.norm1.gain", core::Tensor<double>(core::Shape{1}, {1.0}));
    lm::AdamW<double> opt(c, {&matrix, &embed, &gain});
    opt.step(0, 1);
    EXPECT_DOUBLE_EQ(matrix.value[0], 0.95);
    EXPECT_EQ(embed.value[0], 1.0);
    EXPECT_EQ(gain.value[0], 1.0);
}

// --- model -------------------------------------------------------------------

TEST(Model, SharedParameterCountsMatchAcrossVariants) {
    lm::ModelConfig c;
    c.variant = Variant::dense;
    const lm::Model<float> dense(c, 1);
    c.variant = Variant::fma;
    const lm::Model<float> fma(c, 1);
    c.variant = Variant::fma_linear;
    const lm::Model<float> linear(c, 1);
    EXPECT_EQ(dense.shared_parameter_count(), fma.shared_parameter_count());
    EXPECT_EQ(dense.shared_parameter_count(), linear.shared_parameter_count());
    // Embeddings, two layers of (4 w^2 + 8 w^2 + 4 w + 4 w + 4w for norms and biases), final norm, output.
    const std::size_t w = 128, v = 256, n = 256;
    EXPECT_EQ(dense.shared_parameter_count(), v * w + n * w + 2 * (12 * w * w + 9 * w) + 2 * w + w * v);
    EXPECT_EQ(dense.downsample_parameter_count(), 0u);
    // d p m_l weights per stream, level and head: levels of 32 and 64.
    const std::size_t per_stream = 32 * 4 * (32 + 64);
    EXPECT_EQ(fma.downsample_parameter_count(), 2 * 4 * 2 * per_stream);
    EXPECT_EQ(linear.downsample_parameter_count(), 2 * 4 * 3 * per_stream);
}

TEST(Model, InitialBitsPerByteIsNearEight) {
    const auto splits = lm::ingest(FMATTN_SOURCE_DIR "/data/corpus.txt");
    const lm::TokenStream sample(splits.valid.begin(), splits.valid.begin() + 8 * 257);
    for (Variant variant : {Variant::dense, Variant::fma, Variant::fma_linear}) {
        lm::ModelConfig c;
        c.variant = variant;
        const lm::Model<float> model(c, 11);
        EXPECT_NEAR(lm::evaluate(model, sample).bpc, 8.0, 0.5) << to_string(variant);
    }
}

TEST(Model, UniformPredictorScoresEightBits) {
    auto c = tiny(Variant::fma);
    lm::Model<double> model(c, 1);
    for (auto* p : model.parameters())
        if (p->name == "output") p->value.fill(0.0);
    core::Rng rng(3);
    const auto stream = random_tokens(200, rng);
    EXPECT_NEAR(lm::evaluate(model, stream).bpc, 8.0, 1e-12);
}

TEST(Model, RejectsBadTokens) {
    const lm::Model<float> model(tiny(Variant::dense), 1);
    std::vector<int> tokens(16, 3);
    tokens[4] = 256;  // the mask token is outside the autoregressive vocabulary
    EXPECT_THROW(model.logits(tokens), ShapeError);
    tokens.resize(15);
    EXPECT_THROW(model.logits(tokens), ShapeError);
}

class Training : public ::testing::TestWithParam<Variant> {};

TEST_P(Training, RepeatedByteIsLearnedToZeroBits) {
    auto c = tiny(GetParam());
    c.optimizer.lr = 1e-2;
    c.optimizer.warmup = 10;
    lm::Model<float> model(c, 5);
    const lm::TokenStream stream(400, 'a');
    lm::TrainOptions options;
    options.steps = 150;
    lm::train(model, stream, options);
    EXPECT_LT(lm::evaluate(model, stream).bpc, 0.01);
}

TEST_P(Training, FixedBatchLossStrictlyDecreasesAtFirst) {
    auto c = tiny(GetParam());
    c.width = 32;
    c.context = 64;
    c.m = 8;
    c.p = 4;
    c.init_std = 0.02;
    const auto splits = lm::ingest(FMATTN_SOURCE_DIR "/data/corpus.txt");
    lm::Model<float> model(c, 6);
    lm::TrainOptions options;
    options.steps = 50;
    options.fixed_batch = true;
    const auto report = lm::train(model, splits.train, options);
    for (std::size_t s = 1; s < report.losses.size(); ++s) EXPECT_LT(report.losses[s], report.losses[s - 1]) << s;
}

TEST_P(Training, SameSeedGivesBitIdenticalCurves) {
    auto c = tiny(GetParam());
    core::Rng rng(9);
    const auto stream = random_tokens(300, rng, 40);
    auto curve = [&] {
        lm::Model<float> model(c, 21);
        lm::TrainOptions options;
        options.steps = 15;
        options.seed = 4;
        return lm::train(model, stream, options).losses;
    };
    const auto a = curve(), b = curve();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(a[i]), std::bit_cast<std::uint64_t>(b[i]));
}

TEST_P(Training, MaskedObjectiveTrains) {
    auto c = tiny(GetParam(), lm::Objective::masked);
    core::Rng rng(10);
    const auto stream = random_tokens(300, rng, 8);
    lm::Model<float> model(c, 2);
    lm::TrainOptions options;
    options.steps = 40;
    const auto report = lm::train(model, stream, options);
    EXPECT_LT(report.losses.back(), report.losses.front());
    const auto eval = lm::evaluate(model, stream);
    EXPECT_NEAR(eval.perplexity, std::exp(eval.mean_nats), 1e-12);
    EXPECT_EQ(eval.targets, eval.windows * 2);  // round(0.15 * 16) masked positions per window
}

TEST_P(Training, DivergenceNamesTheStep) {
    lm::Model<float> model(tiny(GetParam()), 1);
    for (auto* p : model.parameters())
        if (p->name == "output") p->value[0] = std::numeric_limits<float>::infinity();
    core::Rng rng(12);
    const auto stream = random_tokens(100, rng);
    lm::TrainOptions options;
    options.steps = 3;
    try {
        lm::train(model, stream, options);
        ADD_FAILURE() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos) << e.what();
    }
}

TEST_P(Training, CheckpointRoundTripIsBitIdentical) {
    auto c = tiny(GetParam());
    core::Rng rng(13);
    const auto stream = random_tokens(400, rng, 30);
    lm::Model<float> model(c, 3);
    lm::TrainOptions options;
    options.steps = 5;
    lm::train(model, stream, options);
    const auto path = temp_path(std::string("ckpt_") + to_string(GetParam()));
    lm::save_checkpoint(model, path.string());
    const auto loaded = lm::load_checkpoint(path.string());
    EXPECT_EQ(loaded.config().to_text(), c.to_text());
    const auto a = model.parameters();
    const auto b = loaded.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i]->name, b[i]->name);
        ASSERT_TRUE(a[i]->value.same_shape(b[i]->value));
        EXPECT_EQ(std::memcmp(a[i]->value.data().data(), b[i]->value.data().data(), a[i]->value.size() * sizeof(float)),
                  0)
            << a[i]->name;
    }
    const auto ea = lm::evaluate(model, stream), eb = lm::evaluate(loaded, stream);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(ea.bpc), std::bit_cast<std::uint64_t>(eb.bpc));

    const auto info = lm::read_checkpoint_info(path.string());
    std::uint64_t offset = 0;
    for (const auto& e : info.manifest) {
        EXPECT_EQ(e.offset, offset) << e.name;
        offset += 4 * e.count;
    }
    std::filesystem::remove(path);
}

TEST_P(Training, CausalityAuditPasses) {
    auto c = tiny(GetParam());
    c.context = 64;
    c.m = 4;
    c.p = 2;
    lm::Model<float> model(c, 14);
    core::Rng rng(15);
    const auto sample = random_tokens(64, rng);
    const auto report = lm::causality_audit(model, sample);
    EXPECT_EQ(report.positions, 64u);
    EXPECT_TRUE(report.passed());
    EXPECT_THROW(lm::causality_audit(lm::Model<float>(tiny(GetParam(), lm::Objective::masked), 1), sample),
                 ConfigError);
}

INSTANTIATE_TEST_SUITE_P(Variants, Training, ::testing::Values(Variant::dense, Variant::fma, Variant::fma_linear),
                         [](const auto& info) {
                             std::string name = to_string(info.param);
                             std::replace(name.begin(), name.end(), '-', '_');
                             return name;
                         });

TEST(Checkpoint, MalformedFilesAreRejected) {
    const auto path = temp_path("bad.ckpt");
    write_file(path, "not a checkpoint\n");
    EXPECT_THROW(lm::load_checkpoint(path.string()), std::runtime_error);
    lm::save_checkpoint(lm::Model<float>(tiny(Variant::dense), 1), path.string());
    std::string bytes;
    {
        std::ifstream in(path, std::ios::binary);
        bytes.assign(std::istreambuf_iterator<char>(in), {});
    }
    write_file(path, bytes.substr(0, bytes.size() - 4));
    EXPECT_THROW(lm::load_checkpoint(path.string()), std::runtime_error);
    write_file(path, bytes + "x");
    EXPECT_THROW(lm::load_checkpoint(path.string()), std::runtime_error);
    std::filesystem::remove(path);
    EXPECT_THROW(lm::load_checkpoint(path.string()), std::runtime_error);
}

// Memorisation at the desk-scale default shape.
TEST(Training, OverfitsOneFixedBatch) {
    const auto splits = lm::ingest(FMATTN_SOURCE_DIR "/data/corpus.txt");
    for (Variant variant : {Variant::dense, Variant::fma, Variant::fma_linear}) {
        lm::ModelConfig c;  // 2 layers, width 128, n = 256, m = 32, p = 4
        c.variant = variant;
        c.batch = 1;
        lm::Model<float> model(c, 17);
        lm::TrainOptions options;
        options.steps = 500;
        options.fixed_batch = true;
        const auto report = lm::train(model, splits.train, options);
        EXPECT_LT(report.losses.back(), 0.1) << to_string(variant);
    }
}

// Paired runs differing only in the fine group size: the finer hierarchy
// should not beat the coarser one by more than noise.
TEST(Training, LargerFineGroupsAreNotWorse) {
    const auto splits = lm::ingest(FMATTN_SOURCE_DIR "/data/corpus.txt");
    auto bpc = [&](std::size_t m) {
        lm::ModelConfig c;
        c.variant = Variant::fma;
        c.m = m;
        c.p = 4;
        lm::Model<float> model(c, 23);
        lm::TrainOptions options;
        options.steps = 300;
        options.seed = 24;
        lm::train(model, splits.train, options);
        return lm::evaluate(model, splits.valid).bpc;
    };
    const double fine = bpc(32), coarse = bpc(64);
    EXPECT_GE(fine, coarse - 0.05) << "m=32 " << fine << ", m=64 " << coarse;
}

}  // namespace
}  // namespace fmattn
