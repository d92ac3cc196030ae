#include <gtest/gtest.h>

#include <random>

#include "mama/autodiff.hpp"
#include "test_util.hpp"

using namespace mama;
using mama::testing::max_rel_error;
using mama::testing::numeric_gradient;
using mama::testing::random_tensor;

namespace {

using UnaryFn = std::function<ad::Var(const ad::Var&)>;

void expect_gradient_matches(const UnaryFn& fn, const Tensor& x, double tol = 1e-6) {
    auto v = ad::parameter(x);
    auto g = ad::grad(ad::sum(fn(v)), {v})[0].value();
    auto numeric = numeric_gradient(
        [&](const Tensor& t) {
            ad::NoGradGuard guard;
            return ad::sum(fn(ad::constant(t))).item();
        },
        x);
    EXPECT_LT(max_rel_error(g, numeric), tol);
}

}  // namespace

TEST(Autodiff, ElementwiseGradientsMatchFiniteDifferences) {
    std::mt19937_64 rng(1);
    const auto x = random_tensor(3, 4, rng, 0.2, 1.5);
    const auto y = ad::constant(random_tensor(3, 4, rng, 0.5, 2.0));
    expect_gradient_matches([&](const ad::Var& a) { return ad::mul(a, y); }, x);
    expect_gradient_matches([&](const ad::Var& a) { return ad::div(y, a); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::tanh(a); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::sigmoid(ad::scale(a, 3.0)); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::log(a); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::exp(a); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::sqrt(a); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::square(ad::add_scalar(a, -0.7)); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::logsumexp_rows(a); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::mul(a, ad::broadcast_cols(ad::sum_cols(a), 4)); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::mul(a, ad::broadcast_rows(ad::sum_rows(a), 3)); }, x);
    expect_gradient_matches([](const ad::Var& a) { return ad::square(ad::hconcat(ad::cols(a, 1, 2), a)); }, x);
}

TEST(Autodiff, MatmulAllTransposeCombinations) {
    std::mt19937_64 rng(2);
    const auto x = random_tensor(3, 4, rng);
    for (int ta = 0; ta < 2; ++ta) {
        for (int tb = 0; tb < 2; ++tb) {
            const auto other = ad::constant(random_tensor(ta ? 3 : 4, 5, rng));
            const auto left = ad::constant(random_tensor(2, tb ? 4 : 3, rng));
            if (!tb) {
                expect_gradient_matches(
                    [&](const ad::Var& a) { return ad::tanh(ad::matmul(a, other, ta, false)); }, x);
            }
            expect_gradient_matches([&](const ad::Var& a) { return ad::tanh(ad::matmul(left, a, false, tb)); }, x);
        }
    }
}

TEST(Autodiff, GatherAndScatterAreAdjoint) {
    std::mt19937_64 rng(3);
    auto idx = std::make_shared<std::vector<std::int64_t>>(std::vector<std::int64_t>{0, 5, -1, 5, 2, 11});
    const auto x = random_tensor(3, 4, rng);
    const auto y = random_tensor(2, 3, rng);
    const auto gx = ad::gather(ad::constant(x), idx, 2, 3).value();
    const auto sy = ad::scatter_add(ad::constant(y), idx, 3, 4).value();
    double lhs = 0.0;
    double rhs = 0.0;
    for (std::size_t i = 0; i < gx.size(); ++i) lhs += gx[i] * y[i];
    for (std::size_t i = 0; i < sy.size(); ++i) rhs += sy[i] * x[i];
    EXPECT_NEAR(lhs, rhs, 1e-12);
    expect_gradient_matches([&](const ad::Var& a) { return ad::square(ad::gather(a, idx, 2, 3)); }, x);
}

TEST(Autodiff, SecondOrderMatchesFiniteDifferenceOfGradient) {
    // d/dw of <grad_x L(x, w), v> compared against differences of the analytic gradient.
    std::mt19937_64 rng(4);
    const auto x0 = random_tensor(2, 3, rng);
    const auto w0 = random_tensor(3, 4, rng);
    const auto v = random_tensor(2, 3, rng);
    auto objective = [&](const ad::Var& x, const ad::Var& w) {
        return ad::sum(ad::logsumexp_rows(ad::tanh(ad::matmul(x, w))));
    };
    auto inner = [&](const Tensor& w_val, bool create_graph, ad::Var* w_out) {
        auto x = ad::parameter(x0);
        auto w = ad::parameter(w_val);
        if (w_out) *w_out = w;
        auto gx = ad::grad(objective(x, w), {x}, create_graph)[0];
        return ad::sum(ad::mul(gx, ad::constant(v)));
    };
    ad::Var w;
    auto dot = inner(w0, true, &w);
    auto analytic = ad::grad(dot, {w})[0].value();
    auto numeric = numeric_gradient([&](const Tensor& t) { return inner(t, false, nullptr).item(); }, w0);
    EXPECT_LT(max_rel_error(analytic, numeric, 1e-6), 1e-5);
}

TEST(Autodiff, ClampStraightThroughVersusExact) {
    Tensor x(1, 3, std::vector<double>{-0.5, 0.5, 1.5});
    Tensor lo(1, 3, 0.0);
    Tensor hi(1, 3, 1.0);
    auto v = ad::parameter(x);
    auto st = ad::grad(ad::sum(ad::clamp(v, lo, hi, true)), {v})[0].value();
    auto exact = ad::grad(ad::sum(ad::clamp(v, lo, hi, false)), {v})[0].value();
    EXPECT_EQ(st, Tensor(1, 3, std::vector<double>{1.0, 1.0, 1.0}));
    EXPECT_EQ(exact, Tensor(1, 3, std::vector<double>{0.0, 1.0, 0.0}));
}

TEST(Autodiff, UnreachableInputsGetZeroGradient) {
    auto a = ad::parameter(Tensor(2, 2, 1.0));
    auto b = ad::parameter(Tensor(1, 3, 1.0));
    auto g = ad::grad(ad::sum(ad::square(a)), {a, b});
    EXPECT_EQ(g[1].value(), Tensor(1, 3, 0.0));
    EXPECT_EQ(g[0].value(), Tensor(2, 2, 2.0));
}

TEST(Autodiff, NoGradGuardStopsRecording) {
    auto a = ad::parameter(Tensor(1, 1, 2.0));
    ad::NoGradGuard guard;
    EXPECT_FALSE(ad::mul(a, a).requires_grad());
}
