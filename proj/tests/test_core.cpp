#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mama/core.hpp"
#include "mama/nn.hpp"
#include "test_util.hpp"

using namespace mama;
using mama::testing::max_rel_error;
using mama::testing::numeric_gradient;
using mama::testing::random_tensor;

namespace {

double loss_of(const LossKind& k, std::vector<double> z, std::size_t y) { return loss(k, z, y); }

double batch_loss_value(const LossKind& k, const std::vector<double>& z, std::size_t y) {
    const std::size_t labels[1] = {y};
    return batch_loss(k, ad::constant(Tensor(1, z.size(), z)), labels).value()[0];
}

}  // namespace

TEST(Loss, HandComputedValues) {
    // CE on equal logits is log K
    EXPECT_NEAR(loss_of(LossKind::ce(), {0, 0, 0}, 1), std::log(3.0), 1e-12);
    // CW: max other minus true
    EXPECT_DOUBLE_EQ(loss_of(LossKind::cw(), {3, 1, 0}, 0), -2.0);
    EXPECT_DOUBLE_EQ(loss_of(LossKind::cw(), {3, 1, 0}, 2), 3.0);
    // DLR: -(z_y - max_other) / (z_pi1 - z_pi3)
    EXPECT_NEAR(loss_of(LossKind::dlr(), {3, 1, 0}, 0), -2.0 / 3.0, 1e-9);
    EXPECT_NEAR(loss_of(LossKind::dlr(), {3, 1, 0, -1}, 1), (3.0 - 1.0) / (3.0 - 0.0), 1e-9);
    // targeted margin toward class 2
    EXPECT_DOUBLE_EQ(loss_of(LossKind::targeted(2), {3, 1, 0}, 0), -3.0);
}

TEST(Loss, CwPositiveIffMisclassified) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        const auto z = random_tensor(1, 5, rng, -3, 3);
        const std::size_t y = rng() % 5;
        const double l = loss(LossKind::cw(), z.row_span(0), y);
        EXPECT_EQ(l > 0.0, misclassified(z.row_span(0), y));
    }
}

TEST(Loss, DlrIsShiftAndScaleInvariant) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        auto z = random_tensor(1, 6, rng, -2, 2);
        const std::size_t y = rng() % 6;
        const double base = loss(LossKind::dlr(), z.row_span(0), y);
        auto moved = tensor_ops::map(z, [](double v) { return 4.0 * v + 1.5; });
        EXPECT_NEAR(loss(LossKind::dlr(), moved.row_span(0), y), base, 1e-9);
    }
}

TEST(Loss, BatchFormMatchesScalarForm) {
    std::mt19937_64 rng(5);
    for (const auto& k : {LossKind::ce(), LossKind::cw(), LossKind::dlr()}) {
        for (int trial = 0; trial < 50; ++trial) {
            const auto z = random_tensor(1, 4, rng, -2, 2);
            const std::size_t y = rng() % 4;
            EXPECT_NEAR(batch_loss_value(k, z.to_vector(), y), loss(k, z.row_span(0), y), 1e-12);
        }
    }
}

TEST(Loss, BatchGradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(6);
    for (const auto& k : {LossKind::ce(), LossKind::cw(), LossKind::dlr()}) {
        const auto z = random_tensor(3, 5, rng, -2, 2);
        const std::vector<std::size_t> labels{0, 3, 4};
        auto v = ad::parameter(z);
        auto g = ad::grad(ad::sum(batch_loss(k, v, labels)), {v})[0].value();
        auto fd = numeric_gradient(
            [&](const Tensor& t) { return ad::sum(batch_loss(k, ad::constant(t), labels)).item(); }, z);
        EXPECT_LT(max_rel_error(g, fd, 1e-6), 1e-6) << to_string(k);
    }
}

TEST(Loss, RejectsBadLabels) {
    EXPECT_THROW(loss(LossKind::cw(), std::vector<double>{1, 2}, 2), ConfigError);
    EXPECT_THROW(loss(LossKind::dlr(), std::vector<double>{1, 2}, 0), ConfigError);
    EXPECT_THROW(loss(LossKind::targeted(3), std::vector<double>{1, 2, 3}, 1), ConfigError);
}

TEST(Projection, LinfHandExample) {
    const Tensor origin(1, 3, {0.5, 0.95, 0.02});
    const Tensor x(1, 3, {0.8, 0.99, -0.3});
    const AttackBudget b{Norm::Linf, 0.1, 0.01, 1, 1};
    const auto p = project(x, origin, b);
    EXPECT_DOUBLE_EQ(p[0], 0.6);
    EXPECT_DOUBLE_EQ(p[1], 0.99);
    EXPECT_DOUBLE_EQ(p[2], 0.0);
}

TEST(Projection, L2HandExample) {
    const Tensor origin(1, 2, {0.5, 0.5});
    const Tensor x(1, 2, {0.8, 0.9});  // delta (0.3, 0.4), norm 0.5
    const AttackBudget b{Norm::L2, 0.25, 0.01, 1, 1};
    const auto p = project(x, origin, b);
    EXPECT_NEAR(p[0], 0.65, 1e-12);
    EXPECT_NEAR(p[1], 0.70, 1e-12);
}

TEST(Projection, IdempotentAndFeasibleUnderFuzz) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t n = 1 + rng() % 3, d = 1 + rng() % 20;
        const auto origin = random_tensor(n, d, rng, 0, 1);
        const auto x = random_tensor(n, d, rng, -0.5, 1.5);
        const AttackBudget b{trial % 2 ? Norm::L2 : Norm::Linf, std::uniform_real_distribution<>(0, 1)(rng), 0.1, 1,
                             1};
        const auto p = project(x, origin, b);
        const auto v = constraint_violation(p, origin, b);
        EXPECT_LE(v.ball, 1e-9);
        EXPECT_LE(v.box, 0.0);
        const auto pp = project(p, origin, b);
        for (std::size_t i = 0; i < p.size(); ++i) ASSERT_EQ(pp[i], p[i]);
    }
}

TEST(Projection, StraightThroughPassesOnesOnClippedCoordinates) {
    const Tensor origin(1, 4, {0.5, 0.5, 0.5, 0.5});
    const Tensor x(1, 4, {0.9, 0.1, 0.55, 0.45});
    const AttackBudget b{Norm::Linf, 0.1, 0.01, 1, 1};
    for (auto mode : {ProjectionGradient::StraightThrough, ProjectionGradient::Exact}) {
        auto v = ad::parameter(x);
        auto g = ad::grad(ad::sum(project(v, origin, b, mode)), {v})[0].value();
        const double clipped = mode == ProjectionGradient::StraightThrough ? 1.0 : 0.0;
        EXPECT_EQ(g[0], clipped);
        EXPECT_EQ(g[1], clipped);
        EXPECT_EQ(g[2], 1.0);
        EXPECT_EQ(g[3], 1.0);
    }
}

TEST(Projection, ExactL2GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(8);
    const auto origin = random_tensor(2, 5, rng, 0.3, 0.7);
    const auto x = random_tensor(2, 5, rng, 0.2, 0.8);
    const AttackBudget b{Norm::L2, 0.1, 0.01, 1, 1};
    const auto w = random_tensor(2, 5, rng);
    auto v = ad::parameter(x);
    auto g = ad::grad(ad::sum(ad::mul_const(project(v, origin, b, ProjectionGradient::Exact), w)), {v})[0].value();
    auto fd = numeric_gradient(
        [&](const Tensor& t) {
            const auto p = project(t, origin, b);
            double s = 0;
            for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * w[i];
            return s;
        },
        x, 1e-7);
    EXPECT_LT(max_rel_error(g, fd, 1e-4), 1e-4);
}

TEST(Projection, ShapeMismatchIsConfigError) {
    const AttackBudget b{Norm::Linf, 0.1, 0.01, 1, 1};
    EXPECT_THROW(project(Tensor(1, 3), Tensor(1, 4), b), ConfigError);
}

TEST(Budget, Validation) {
    EXPECT_THROW((AttackBudget{Norm::Linf, -0.1, 0.01, 1, 1}.validate()), ConfigError);
    EXPECT_THROW((AttackBudget{Norm::Linf, 0.1, 0.0, 1, 1}.validate()), ConfigError);
    EXPECT_THROW((AttackBudget{Norm::Linf, 0.1, 0.01, 0, 1}.validate()), ConfigError);
    EXPECT_THROW((AttackBudget{Norm::Linf, 0.1, 0.01, 1, 0}.validate()), ConfigError);
    EXPECT_NO_THROW((AttackBudget{Norm::L2, 3.0, 0.5, 1, 1}.validate()));
}

TEST(InputGradient, LinearModelCwGradientIsWeightDifference) {
    // two classes: d/dx (z_1 - z_0) = W_1 - W_0
    const Tensor w(2, 3, {0.2, -0.5, 1.0, -0.7, 0.4, 0.3});
    const auto net = nn::Network::linear(w, Tensor(1, 2, {0.1, -0.2}), {1, 1, 3});
    const Tensor x(1, 3, {0.3, 0.6, 0.1});
    const auto g = input_gradient(net, LossKind::cw(), x, 0);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(g[c], w(1, c) - w(0, c));
}

TEST(InputGradient, NetworkGradientMatchesFiniteDifferences) {
    const nn::Network net("probe", {1, 4, 4}, 3, "conv:2:3:1:1,tanh,dense:6,tanh,dense:3", 5);
    std::mt19937_64 rng(9);
    const auto x = random_tensor(1, 16, rng, 0, 1);
    for (const auto& k : {LossKind::ce(), LossKind::cw(), LossKind::dlr()}) {
        const auto g = input_gradient(net, k, x, 1);
        const auto fd = numeric_gradient([&](const Tensor& t) { return loss(k, net.logits(t).row_span(0), 1); }, x);
        EXPECT_LT(max_rel_error(g, fd, 1e-6), 1e-5) << to_string(k);
    }
}

TEST(InputGradient, SameUnderNoGradGuard) {
    const nn::Network net("probe", {1, 2, 2}, 3, "dense:4,tanh,dense:3", 6);
    std::mt19937_64 rng(10);
    const auto x = random_tensor(2, 4, rng, 0, 1);
    const std::vector<std::size_t> labels{0, 2};
    const auto with = loss_and_gradient(net, LossKind::ce(), ad::constant(x), labels);
    ad::NoGradGuard guard;
    const auto without = loss_and_gradient(net, LossKind::ce(), ad::constant(x), labels);
    EXPECT_EQ(with.gradient.value(), without.gradient.value());
    EXPECT_EQ(with.losses.value(), without.losses.value());
    EXPECT_FALSE(ad::grad_enabled());
}
