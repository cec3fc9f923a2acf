// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "fmattn/core/counters.hpp"
#include "fmattn/core/ops.hpp"
#include "support.hpp"

namespace fmattn {
namespace {

using core::Shape;
using core::Tensor;
using testing::finite_difference;
using testing::random_matrix;
using testing::relative_error;

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
    Tensor<double> out(Shape{a.rows(), b.cols()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0;
            for (std::size_t t = 0; t < a.cols(); ++t) acc += a(i, t) * b(t, j);
            out(i, j) = acc;
        }
    return out;
}

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& kernels, std::size_t w) {
    const std::size_t d = x.cols(), p = kernels.extent(1), groups = x.rows() / w;
    Tensor<double> out(Shape{groups * p, d});
    for (std::size_t g = 0; g < groups; ++g)
        for (std::size_t s = 0; s < p; ++s)
            for (std::size_t k = 0; k < d; ++k) {
                double acc = 0;
                for (std::size_t t = 0; t < w; ++t) acc += kernels(k, s, t) * x(g * w + t, k);
                out(g * p + s, k) = acc;
            }
    return out;
}

TEST(Tensor, ShapeAndAccess) {
    Tensor<double> t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t(1, 2), 6);
    EXPECT_EQ(t.row(1)[0], 4);
    EXPECT_THROW(Tensor<double>(Shape{2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, NonFiniteIsReported) {
    Tensor<double> t(Shape{2, 2});
    t(0, 1) = std::numeric_limits<double>::quiet_NaN();
    EXPECT_FALSE(t.all_finite());
    EXPECT_THROW(t.require_finite("probe"), NumericError);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    core::Rng rng(1);
    const auto m = random_matrix(3, 3, rng);
    Tensor<double> eye(Shape{3, 3});
    for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1;
    EXPECT_EQ(core::matmul(eye, m), m);
}

TEST(Matmul, HandArithmetic) {
    Tensor<double> a(Shape{2, 2}, {1, 2, 3, 4});
    Tensor<double> b(Shape{2, 1}, {1, 1});
    EXPECT_EQ(core::matmul(a, b), (Tensor<double>(Shape{2, 1}, {3, 7})));
}

TEST(Matmul, MatchesTripleLoopWithinFourUlps) {
    core::Rng rng(2);
    for (auto [r, k, c] : std::vector<std::array<std::size_t, 3>>{{5, 4, 3}, {7, 9, 5}, {32, 17, 29}, {1, 1, 1}}) {
        const auto a = random_matrix(r, k, rng), b = random_matrix(k, c, rng);
        const auto got = core::matmul(a, b), want = naive_matmul(a, b);
        for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LE(testing::ulp_distance(got[i], want[i]), 4u);
        const auto nt = core::matmul_nt(a, core::transpose(b));
        const auto tn = core::matmul_tn(core::transpose(a), b);
        for (std::size_t i = 0; i < got.size(); ++i) {
            EXPECT_LE(testing::ulp_distance(nt[i], want[i]), 4u);
            EXPECT_LE(testing::ulp_distance(tn[i], want[i]), 4u);
        }
    }
}

TEST(Matmul, ChargesTwoRkcFlops) {
    core::Rng rng(3);
    const auto a = random_matrix(5, 4, rng), b = random_matrix(4, 3, rng);
    core::reset_counters();
    (void)core::matmul(a, b);
    EXPECT_EQ(core::counters().total_flops(), 2u * 5 * 4 * 3);
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(core::matmul(Tensor<double>(Shape{2, 3}), Tensor<double>(Shape{2, 3})), ShapeError);
}

TEST(Matmul, BackwardMatchesFiniteDifferences) {
    core::Rng rng(4);
    auto a = random_matrix(4, 4, rng), b = random_matrix(4, 4, rng);
    const auto up = random_matrix(4, 4, rng);
    auto loss = [&] { return testing::dot(core::matmul(a, b), up); };
    Tensor<double> ga(a.shape()), gb(b.shape());
    core::matmul_backward(a, b, up, &ga, &gb);
    EXPECT_LT(relative_error(ga, finite_difference(a, loss)), 1e-6);
    EXPECT_LT(relative_error(gb, finite_difference(b, loss)), 1e-6);
}

TEST(Matmul, BackwardAccumulatesAndZeroUpstreamGivesZero) {
    core::Rng rng(5);
    const auto a = random_matrix(3, 4, rng), b = random_matrix(4, 2, rng);
    Tensor<double> ga(a.shape()), gb(b.shape());
    core::matmul_backward(a, b, Tensor<double>(Shape{3, 2}), &ga, &gb);
    EXPECT_EQ(testing::max_abs(ga) + testing::max_abs(gb), 0.0);

    const auto up = random_matrix(3, 2, rng);
    core::matmul_backward<double>(a, b, up, &ga, nullptr);
    const Tensor<double> once = ga;
    core::matmul_backward<double>(a, b, up, &ga, nullptr);
    for (std::size_t i = 0; i < ga.size(); ++i) EXPECT_DOUBLE_EQ(ga[i], 2 * once[i]);
}

TEST(Softmax, Symmetry) {
    std::vector<double> x{0, 0}, out(2);
    core::softmax_row<double>(x, {}, {}, out);
    EXPECT_DOUBLE_EQ(out[0], 0.5);
    EXPECT_DOUBLE_EQ(out[1], 0.5);
}

TEST(Softmax, MultiplicityWeighting) {
    std::vector<double> x{0, 0}, w{3, 1}, out(2);
    core::softmax_row<double>(x, {}, w, out);
    EXPECT_DOUBLE_EQ(out[0], 0.75);
    EXPECT_DOUBLE_EQ(out[1], 0.25);
}

TEST(Softmax, MaskedEntryMatchesDirectEvaluation) {
    std::vector<double> x{1, 2, 3}, out(3);
    std::vector<std::uint8_t> keep{1, 1, 0};
    core::softmax_row<double>(x, keep, {}, out);
    const double z = std::exp(1.0) + std::exp(2.0);
    EXPECT_NEAR(out[0], std::exp(1.0) / z, 1e-15);
    EXPECT_NEAR(out[1], std::exp(2.0) / z, 1e-15);
    EXPECT_EQ(out[2], 0.0);
}

TEST(Softmax, AllMaskedThrows) {
    std::vector<double> x{1, 2}, out(2);
    std::vector<std::uint8_t> keep{0, 0};
    EXPECT_THROW(core::softmax_row<double>(x, keep, {}, out), std::domain_error);
}

TEST(Softmax, LargeScoresStayFinite) {
    std::vector<double> x{1000, 999, -1000}, out(3);
    core::softmax_row<double>(x, {}, {}, out);
    EXPECT_TRUE(std::isfinite(out[0]) && std::isfinite(out[1]));
    EXPECT_NEAR(out[0] + out[1] + out[2], 1.0, 1e-15);
}

TEST(Softmax, BackwardMatchesFiniteDifferences) {
    core::Rng rng(6);
    auto x = random_matrix(1, 9, rng, -2, 2);
    const auto w = random_matrix(1, 9, rng, 0.5, 4);
    const auto up = random_matrix(1, 9, rng);
    std::vector<std::uint8_t> keep{1, 1, 0, 1, 1, 1, 0, 1, 1};
    const double scale = 0.7;
    auto probs = [&] {
        Tensor<double> out(x.shape());
        core::softmax_row<double>(x.data(), keep, w.data(), out.data(), scale);
        return out;
    };
    auto loss = [&] { return testing::dot(probs(), up); };
    const auto p = probs();
    Tensor<double> grad(x.shape());
    core::softmax_row_backward<double>(p.data(), up.data(), grad.data(), scale);
    EXPECT_LT(relative_error(grad, finite_difference(x, loss)), 1e-6);
}

TEST(Conv, AveragingPreservesConstants) {
    const std::size_t w = 4, p = 2, d = 3;
    Tensor<double> x(Shape{8, d}, 2.5), kernels(Shape{d, p, w}, 1.0 / w);
    const auto out = core::grouped_conv1d(x, kernels, w);
    ASSERT_EQ(out.shape(), (Shape{4, d}));
    for (double y : out.data()) EXPECT_DOUBLE_EQ(y, 2.5);
}

TEST(Conv, OneHotKernelsAreIdentity) {
    core::Rng rng(7);
    const std::size_t w = 4, d = 3;
    const auto x = random_matrix(8, d, rng);
    Tensor<double> kernels(Shape{d, w, w});
    for (std::size_t k = 0; k < d; ++k)
        for (std::size_t s = 0; s < w; ++s) kernels(k, s, s) = 1;
    EXPECT_EQ(core::grouped_conv1d(x, kernels, w), x);
}

TEST(Conv, MatchesDirectLoop) {
    core::Rng rng(8);
    const auto x = random_matrix(16, 5, rng);
    const auto kernels = core::uniform_tensor<double>(Shape{5, 2, 4}, rng);
    const auto got = core::grouped_conv1d(x, kernels, 4), want = naive_conv(x, kernels, 4);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LE(testing::ulp_distance(got[i], want[i]), 4u);
}

TEST(Conv, StrideMismatchThrows) {
    EXPECT_THROW(core::grouped_conv1d(Tensor<double>(Shape{6, 2}), Tensor<double>(Shape{2, 1, 4}), 4), ShapeError);
    EXPECT_THROW(core::grouped_conv1d(Tensor<double>(Shape{8, 2}), Tensor<double>(Shape{2, 1, 3}), 4), ShapeError);
}

TEST(Conv, BackwardMatchesFiniteDifferences) {
    core::Rng rng(9);
    auto x = random_matrix(8, 3, rng);
    auto kernels = core::uniform_tensor<double>(Shape{3, 2, 4}, rng);
    const auto up = random_matrix(4, 3, rng);
    auto loss = [&] { return testing::dot(core::grouped_conv1d(x, kernels, 4), up); };
    Tensor<double> gx(x.shape()), gk(kernels.shape());
    core::grouped_conv1d_backward(x, kernels, 4, up, &gx, &gk);
    EXPECT_LT(relative_error(gx, finite_difference(x, loss)), 1e-6);
    EXPECT_LT(relative_error(gk, finite_difference(kernels, loss)), 1e-6);
}

TEST(Backward, FiniteDifferencesOnLargerRandomShapes) {
    core::Rng rng(10);
    auto a = random_matrix(32, 17, rng), b = random_matrix(17, 9, rng);
    const auto up = random_matrix(32, 9, rng);
    auto loss = [&] { return testing::dot(core::matmul(a, b), up); };
    Tensor<double> ga(a.shape()), gb(b.shape());
    core::matmul_backward(a, b, up, &ga, &gb);
    EXPECT_LT(relative_error(ga, finite_difference(a, loss)), 1e-5);
    EXPECT_LT(relative_error(gb, finite_difference(b, loss)), 1e-5);
}

TEST(Counters, DeterministicAcrossRuns) {
    auto run = [] {
        core::Rng rng(11);
        core::reset_counters();
        const auto a = random_matrix(16, 8, rng), b = random_matrix(8, 16, rng);
        const auto c = core::matmul(a, b);
        Tensor<double> kernels(Shape{16, 2, 4}, 0.25);
        (void)core::grouped_conv1d(c, kernels, 4);
        return core::counters();
    };
    const auto first = run(), second = run();
    EXPECT_EQ(first.flops, second.flops);
    EXPECT_EQ(first.peak_bytes, second.peak_bytes);
    EXPECT_GT(first.peak_bytes, 0u);
}

TEST(Counters, PhaseScopeBucketsFlops) {
    core::Rng rng(12);
    const auto a = random_matrix(2, 2, rng);
    core::reset_counters();
    {
        core::PhaseScope phase(core::Phase::score);
        (void)core::matmul(a, a);
    }
    (void)core::matmul(a, a);
    EXPECT_EQ(core::counters().flops_in(core::Phase::score), 16u);
    EXPECT_EQ(core::counters().flops_in(core::Phase::other), 16u);
}

TEST(Parameter, ZeroGradResets) {
    core::Parameter<double> param("w", Tensor<double>(Shape{2, 2}, 1.0));
    EXPECT_EQ(param.grad.shape(), param.value.shape());
    param.grad.fill(3);
    param.zero_grad();
    EXPECT_EQ(testing::max_abs(param.grad), 0.0);
}

}  // namespace
}  // namespace fmattn
