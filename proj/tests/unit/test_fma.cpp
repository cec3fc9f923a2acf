// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <memory>

#include "fmattn/dense_attention.hpp"
#include "fmattn/fma.hpp"
#include "fmattn/oracle.hpp"
#include "support.hpp"

namespace fmattn {
namespace {

using core::Shape;
using core::Tensor;
using testing::random_matrix;

struct Instance {
    std::shared_ptr<const Hierarchy> hierarchy;
    DownsampleWeights<double> weights;
    Tensor<double> q, k, v;
};

Instance make_instance(std::size_t n, std::size_t m, std::size_t p, std::size_t d, Mode mode, std::uint64_t seed,
                       InitStrategy init = InitStrategy::random) {
    const auto config = make_config(n, m, p, mode);
    core::Rng rng(seed);
    Instance in{std::make_shared<const Hierarchy>(config), init_downsample<double>(config, d, true, init, seed), {}, {}, {}};
    in.q = random_matrix(n, d, rng);
    in.k = random_matrix(n, d, rng);
    in.v = random_matrix(n, d, rng);
    return in;
}

AttentionResult<double> run(Variant variant, const Instance& in) {
    return variant == Variant::fma ? forward(in.q, in.k, in.v, in.weights, in.hierarchy)
                                   : forward_linear(in.q, in.k, in.v, in.weights, in.hierarchy);
}

Tensor<double> emulate(Variant variant, const Instance& in) {
    return variant == Variant::fma
               ? oracle::dense_fma_emulation(in.q, in.k, in.v, in.weights, in.hierarchy->config())
               : oracle::dense_fma_linear_emulation(in.q, in.k, in.v, in.weights, in.hierarchy->config());
}

class FastVariant : public ::testing::TestWithParam<std::tuple<Variant, Mode>> {};

TEST_P(FastVariant, TwoBlocksReproduceDenseAttention) {
    const auto [variant, mode] = GetParam();
    const auto in = make_instance(16, 8, 2, 4, mode, 1);
    ASSERT_EQ(in.hierarchy->levels(), 0);
    EXPECT_LT(testing::max_abs_diff(run(variant, in).output, oracle::dense_attention(in.q, in.k, in.v, mode)), 1e-12);
}

TEST_P(FastVariant, IdenticalValuesAreReproduced) {
    const auto [variant, mode] = GetParam();
    auto in = make_instance(64, 4, 2, 3, mode, 2, InitStrategy::average);
    for (std::size_t i = 0; i < 64; ++i) {
        in.v(i, 0) = 0.5;
        in.v(i, 1) = -2.0;
        in.v(i, 2) = 3.25;
    }
    const auto out = run(variant, in).output;
    const auto& c = in.hierarchy->config();
    for (std::size_t i = 0; i < 64; ++i) {
        // The linear variant sums one convex combination per non-empty level.
        double copies = 1;
        if (variant == Variant::fma_linear)
            for (int level = 1; level <= c.levels; ++level)
                copies += in.hierarchy->coarse_groups(level, i / c.group_size(level)).empty() ? 0 : 1;
        EXPECT_NEAR(out(i, 0), copies * 0.5, 1e-14);
        EXPECT_NEAR(out(i, 1), copies * -2.0, 1e-14);
        EXPECT_NEAR(out(i, 2), copies * 3.25, 1e-14);
    }
}

TEST_P(FastVariant, MatchesEmulationOracle) {
    const auto [variant, mode] = GetParam();
    for (std::size_t p : {1u, 2u}) {
        const auto in = make_instance(16, 2, p, 4, mode, 3 + p);
        EXPECT_LT(testing::max_abs_diff(run(variant, in).output, emulate(variant, in)), 1e-10) << "p=" << p;
    }
    const auto big = make_instance(128, 4, 4, 6, mode, 9);
    EXPECT_LT(testing::max_abs_diff(run(variant, big).output, emulate(variant, big)), 1e-10);
}

TEST(Causal, FutureTokensDoNotInfluenceThePast) {
    for (Variant variant : {Variant::fma, Variant::fma_linear}) {
        auto in = make_instance(64, 4, 2, 3, Mode::causal, 10);
        const auto base = run(variant, in).output;
        for (std::size_t j = 0; j < 64; ++j) {
            auto moved = in;
            for (std::size_t c = 0; c < 3; ++c) {
                moved.q(j, c) += 1.0;
                moved.k(j, c) -= 2.0;
                moved.v(j, c) += 3.0;
            }
            const auto out = run(variant, moved).output;
            for (std::size_t i = 0; i < j; ++i)
                for (std::size_t c = 0; c < 3; ++c) ASSERT_EQ(out(i, c), base(i, c)) << "j=" << j << " i=" << i;
        }
    }
}

TEST_P(FastVariant, StoredEntriesWithinBudget) {
    const auto [variant, mode] = GetParam();
    for (std::size_t n : {64u, 256u, 1024u}) {
        const auto in = make_instance(n, 8, 4, 2, mode, 11);
        const auto& c = in.hierarchy->config();
        const auto stored = run(variant, in).tape.probs.stored_entries();
        EXPECT_LE(stored, 3 * c.m * n + 4 * c.p * n * static_cast<std::size_t>(c.levels));
    }
}

TEST_P(FastVariant, ZeroUpstreamGivesZeroGradients) {
    const auto [variant, mode] = GetParam();
    auto in = make_instance(16, 2, 2, 4, mode, 12);
    const auto result = run(variant, in);
    AttentionGrads<double> grads(16, 4);
    in.weights.zero_grad();
    backward(result.tape, Tensor<double>(Shape{16, 4}), in.weights, grads);
    EXPECT_EQ(testing::max_abs(grads.q) + testing::max_abs(grads.k) + testing::max_abs(grads.v), 0.0);
    for (auto* param : in.weights.parameters()) EXPECT_EQ(testing::max_abs(param->grad), 0.0);
}

TEST_P(FastVariant, GradientsMatchFiniteDifferences) {
    const auto [variant, mode] = GetParam();
    auto in = make_instance(16, 2, 2, 4, mode, 13);
    auto loss = [&] { return testing::sum_of_squares(run(variant, in).output); };
    const auto result = run(variant, in);
    Tensor<double> upstream = result.output;
    upstream *= 2.0;
    AttentionGrads<double> grads(16, 4);
    in.weights.zero_grad();
    backward(result.tape, upstream, in.weights, grads);

    EXPECT_LT(testing::relative_error(grads.q, testing::finite_difference(in.q, loss)), 1e-5);
    EXPECT_LT(testing::relative_error(grads.k, testing::finite_difference(in.k, loss)), 1e-5);
    EXPECT_LT(testing::relative_error(grads.v, testing::finite_difference(in.v, loss)), 1e-5);
    for (auto* param : in.weights.parameters()) {
        const auto fd = testing::finite_difference(param->value, loss);
        if (variant == Variant::fma && param->name.rfind("query", 0) == 0) {
            EXPECT_EQ(testing::max_abs(fd), 0.0);
            EXPECT_EQ(testing::max_abs(param->grad), 0.0);
            continue;
        }
        EXPECT_LT(testing::relative_error(param->grad, fd), 1e-5) << param->name;
    }
}

TEST_P(FastVariant, BackwardAccumulates) {
    const auto [variant, mode] = GetParam();
    auto in = make_instance(16, 2, 2, 4, mode, 14);
    const auto result = run(variant, in);
    core::Rng rng(14);
    const auto up = random_matrix(16, 4, rng);
    AttentionGrads<double> once(16, 4), twice(16, 4);
    backward(result.tape, up, in.weights, once);
    backward(result.tape, up, in.weights, twice);
    backward(result.tape, up, in.weights, twice);
    for (std::size_t i = 0; i < once.q.size(); ++i) EXPECT_NEAR(twice.q[i], 2 * once.q[i], 1e-14);
}

// Differentiates the emulation oracle exactly with dual numbers, one input
// coordinate at a time, and compares with the hand-written backward.
TEST_P(FastVariant, GradientsMatchEmulationDerivatives) {
    const auto [variant, mode] = GetParam();
    auto in = make_instance(16, 2, 2, 4, mode, 15);
    const auto result = run(variant, in);
    Tensor<double> upstream = result.output;
    upstream *= 2.0;
    AttentionGrads<double> grads(16, 4);
    in.weights.zero_grad();
    backward(result.tape, upstream, in.weights, grads);

    using oracle::Dual;
    const auto lift = [](const Tensor<double>& t) {
        oracle::Matrix<Dual> m(t.rows(), t.cols());
        for (std::size_t i = 0; i < t.size(); ++i) m.data[i] = Dual(t[i]);
        return m;
    };
    auto q = lift(in.q), k = lift(in.k), v = lift(in.v);
    const auto base = oracle::emulation_weights(in.weights);
    oracle::EmulationWeights<Dual> w;
    w.config = base.config;
    w.d = base.d;
    w.has_query = base.has_query;
    for (std::size_t s = 0; s < stream_count; ++s)
        for (const auto& kernel : base.kernels[s]) w.kernels[s].emplace_back(kernel.begin(), kernel.end());

    auto derivative = [&] {
        const auto out = variant == Variant::fma ? oracle::emulate_fma(q, k, v, w) : oracle::emulate_fma_linear(q, k, v, w);
        double acc = 0;
        for (const auto& x : out.data) acc += 2 * x.v * x.d;
        return acc;
    };
    auto check = [&](std::vector<Dual>& values, std::span<const double> grad, const std::string& what) {
        double worst = 0, scale = 0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i].d = 1;
            const double exact = derivative();
            values[i].d = 0;
            worst = std::max(worst, std::abs(exact - grad[i]));
            scale = std::max(scale, std::abs(exact));
        }
        EXPECT_LT(worst, 1e-9 * std::max(1.0, scale)) << what;
    };
    check(q.data, grads.q.data(), "Q");
    check(k.data, grads.k.data(), "K");
    check(v.data, grads.v.data(), "V");
    for (Stream stream : {Stream::key, Stream::value, Stream::query})
        for (int level = 1; level <= in.hierarchy->levels(); ++level)
            check(w.kernels[static_cast<std::size_t>(stream)][level - 1], in.weights.kernel(stream, level).grad.data(),
                  in.weights.kernel(stream, level).name);
}

INSTANTIATE_TEST_SUITE_P(VariantsAndModes, FastVariant,
                         ::testing::Combine(::testing::Values(Variant::fma, Variant::fma_linear),
                                            ::testing::Values(Mode::bidirectional, Mode::causal)),
                         [](const auto& info) {
                             return std::string(std::get<0>(info.param) == Variant::fma ? "fma" : "linear") + "_" +
                                    to_string(std::get<1>(info.param));
                         });

TEST(Forward, RowsAreStochasticWithMultiplicity) {
    for (Mode mode : {Mode::bidirectional, Mode::causal}) {
        const auto in = make_instance(128, 4, 2, 3, mode, 20);
        const auto& probs = forward(in.q, in.k, in.v, in.weights, in.hierarchy).tape.probs;
        for (std::size_t i = 0; i < 128; ++i) {
            double total = 0;
            for (double x : probs.band.row(i)) total += x;
            for (const auto& level : probs.far) total += std::accumulate(level.row(i).begin(), level.row(i).end(), 0.0);
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
}

TEST(ForwardLinear, EachNonEmptyLevelIsStochastic) {
    for (Mode mode : {Mode::bidirectional, Mode::causal}) {
        const auto in = make_instance(128, 4, 2, 3, mode, 21);
        const auto& probs = forward_linear(in.q, in.k, in.v, in.weights, in.hierarchy).tape.probs;
        for (std::size_t i = 0; i < 128; ++i)
            EXPECT_NEAR(std::accumulate(probs.band.row(i).begin(), probs.band.row(i).end(), 0.0), 1.0, 1e-12);
        for (std::size_t l = 0; l < probs.far.size(); ++l)
            for (std::size_t r = 0; r < probs.far[l].rows(); ++r) {
                const auto row = probs.far[l].row(r);
                const double total = std::accumulate(row.begin(), row.end(), 0.0);
                const bool empty = !probs.far_layouts[l].keep(r, 0);
                EXPECT_NEAR(total, empty ? 0.0 : 1.0, 1e-12);
            }
    }
}

TEST(ForwardLinear, EarlyCausalRowsSeeOnlyTheFineBand) {
    const auto in = make_instance(64, 8, 2, 3, Mode::causal, 22);
    const auto out = forward_linear(in.q, in.k, in.v, in.weights, in.hierarchy).output;
    const auto dense = oracle::dense_attention(in.q, in.k, in.v, Mode::causal);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(out(i, c), dense(i, c), 1e-14);
}

TEST(Forward, NonFiniteInputThrows) {
    auto in = make_instance(16, 2, 1, 4, Mode::bidirectional, 23);
    in.k(3, 1) = std::numeric_limits<double>::infinity();
    EXPECT_THROW(forward(in.q, in.k, in.v, in.weights, in.hierarchy), NumericError);
    EXPECT_THROW(forward(in.q, in.k, Tensor<double>(Shape{16, 3}), in.weights, in.hierarchy), ShapeError);
}

TEST(Backward, RejectsMissingTapeAndBadShapes) {
    auto in = make_instance(16, 2, 1, 4, Mode::bidirectional, 24);
    AttentionGrads<double> grads(16, 4);
    EXPECT_THROW(backward(AttentionTape<double>{}, Tensor<double>(Shape{16, 4}), in.weights, grads), MissingActivation);
    const auto result = forward(in.q, in.k, in.v, in.weights, in.hierarchy);
    EXPECT_THROW(backward(result.tape, Tensor<double>(Shape{8, 4}), in.weights, grads), ShapeError);
}

TEST(Dense, BackwardMatchesFiniteDifferences) {
    for (Mode mode : {Mode::bidirectional, Mode::causal}) {
        core::Rng rng(25);
        auto q = random_matrix(8, 3, rng), k = random_matrix(8, 3, rng), v = random_matrix(8, 3, rng);
        auto loss = [&] { return testing::sum_of_squares(dense_forward(q, k, v, mode).output); };
        const auto result = dense_forward(q, k, v, mode);
        EXPECT_LT(testing::max_abs_diff(result.output, oracle::dense_attention(q, k, v, mode)), 1e-14);
        Tensor<double> up = result.output;
        up *= 2.0;
        AttentionGrads<double> grads(8, 3);
        dense_backward(result.tape, up, grads);
        EXPECT_LT(testing::relative_error(grads.q, testing::finite_difference(q, loss)), 1e-6);
        EXPECT_LT(testing::relative_error(grads.k, testing::finite_difference(k, loss)), 1e-6);
        EXPECT_LT(testing::relative_error(grads.v, testing::finite_difference(v, loss)), 1e-6);
    }
}

TEST(ErrorBound, ConstantKeysGiveZero) {
    auto in = make_instance(32, 4, 1, 4, Mode::bidirectional, 26, InitStrategy::average);
    for (std::size_t i = 0; i < 32; ++i)
        for (std::size_t c = 0; c < 4; ++c) in.k(i, c) = 0.375 * static_cast<double>(c) - 0.5;  // dyadic, so averaging is exact
    for (std::size_t row = 0; row < 32; ++row) {
        const auto report = error_bound_diagnostic(in.q, in.k, in.weights, *in.hierarchy, row);
        EXPECT_EQ(report.actual, 0.0);
        EXPECT_EQ(report.bound, 0.0);
    }
}

TEST(ErrorBound, HomogeneousInQueries) {
    auto in = make_instance(32, 4, 1, 4, Mode::bidirectional, 27);
    const auto before = error_bound_diagnostic(in.q, in.k, in.weights, *in.hierarchy, 5);
    for (std::size_t c = 0; c < 4; ++c) in.q(5, c) *= 2;
    const auto after = error_bound_diagnostic(in.q, in.k, in.weights, *in.hierarchy, 5);
    EXPECT_EQ(after.bound, 2 * before.bound);
}

TEST(ErrorBound, HoldsOnRandomInstances) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto in = make_instance(32, 4, 1, 4, Mode::bidirectional, 100 + seed, InitStrategy::average_plus_noise);
        for (std::size_t row = 0; row < 32; ++row) {
            const auto report = error_bound_diagnostic(in.q, in.k, in.weights, *in.hierarchy, row);
            EXPECT_LE(report.actual, report.bound + 1e-12);
        }
    }
    const auto in = make_instance(32, 4, 1, 4, Mode::bidirectional, 1);
    EXPECT_THROW(error_bound_diagnostic(in.q, in.k, in.weights, *in.hierarchy, 32), std::out_of_range);
}

TEST(Variant, Names) {
    EXPECT_EQ(parse_variant("fma-linear"), Variant::fma_linear);
    EXPECT_STREQ(to_string(Variant::dense), "dense");
    EXPECT_THROW(parse_variant("sparse"), ConfigError);
}

}  // namespace
}  // namespace fmattn
