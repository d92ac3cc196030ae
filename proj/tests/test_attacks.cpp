#include <gtest/gtest.h>

#include <random>

#include "mama/attacks.hpp"
#include "mama/nn.hpp"
#include "test_util.hpp"

using namespace mama;
using namespace mama::attacks;
using mama::testing::random_tensor;

namespace {

nn::Network random_linear(std::size_t d, std::size_t k, std::mt19937_64& rng) {
    return nn::Network::linear(random_tensor(k, d, rng), random_tensor(1, k, rng, -0.2, 0.2), {1, 1, d});
}

/// Max of the CW loss over the 2^D corners of the feasible box.
double corner_max(const Classifier& f, const Tensor& x0, std::size_t label, double eps) {
    const std::size_t d = x0.cols();
    double best = -std::numeric_limits<double>::infinity();
    Tensor x(1, d);
    for (std::size_t mask = 0; mask < (std::size_t{1} << d); ++mask) {
        for (std::size_t c = 0; c < d; ++c) {
            x[c] = (mask >> c) & 1 ? std::min(x0[c] + eps, 1.0) : std::max(x0[c] - eps, 0.0);
        }
        best = std::max(best, loss(LossKind::cw(), f.logits(x).row_span(0), label));
    }
    return best;
}

std::vector<std::uint64_t> seeds_for(std::size_t n, std::uint64_t base) {
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = derive_seed(base, {i});
    return s;
}

}  // namespace

TEST(Step, SignGdHandExample) {
    const Tensor origin(1, 3, {0.5, 0.5, 0.5});
    const AttackBudget b{Norm::Linf, 0.1, 0.1, 1, 1};
    const auto next = attack_step(SignGD{}, AttackState::start(origin, origin), Tensor(1, 3, {2.0, -3.0, 0.0}), b);
    EXPECT_DOUBLE_EQ(next.x_adv[0], 0.6);
    EXPECT_DOUBLE_EQ(next.x_adv[1], 0.4);
    EXPECT_DOUBLE_EQ(next.x_adv[2], 0.5);
}

TEST(Step, MomentumAccumulatesL1NormalizedGradients) {
    const Tensor origin(1, 2, {0.5, 0.5});
    const AttackBudget b{Norm::Linf, 0.3, 0.01, 2, 1};
    auto s = attack_step(Momentum{1.0}, AttackState::start(origin, origin), Tensor(1, 2, {1.0, -1.0}), b);
    EXPECT_DOUBLE_EQ(s.momentum[0], 0.5);
    EXPECT_DOUBLE_EQ(s.momentum[1], -0.5);
    s = attack_step(Momentum{1.0}, s, Tensor(1, 2, {4.0, 0.0}), b);
    EXPECT_DOUBLE_EQ(s.momentum[0], 1.5);
    EXPECT_DOUBLE_EQ(s.momentum[1], -0.5);
}

TEST(Step, NesterovLooksAhead) {
    const Tensor origin(1, 2, {0.5, 0.5});
    const AttackBudget b{Norm::Linf, 0.3, 0.1, 2, 1};
    auto s = attack_step(Nesterov{0.5}, AttackState::start(origin, origin), Tensor(1, 2, {1.0, -1.0}), b);
    const auto p = gradient_point(Nesterov{0.5}, s, b);
    EXPECT_DOUBLE_EQ(p[0], s.x_adv[0] + 0.1 * 0.5 * 0.5);
    EXPECT_DOUBLE_EQ(p[1], s.x_adv[1] - 0.1 * 0.5 * 0.5);
}

TEST(Step, AdamFirstStepIsNearlySign) {
    const Tensor origin(1, 3, {0.5, 0.5, 0.5});
    const AttackBudget b{Norm::Linf, 0.3, 0.1, 1, 1};
    const auto s = attack_step(AdamStep{}, AttackState::start(origin, origin), Tensor(1, 3, {0.3, -2.0, 0.0}), b);
    EXPECT_NEAR(s.x_adv[0], 0.6, 1e-6);
    EXPECT_NEAR(s.x_adv[1], 0.4, 1e-6);
    EXPECT_DOUBLE_EQ(s.x_adv[2], 0.5);
}

TEST(Step, L2SignGdMovesAlongNormalizedGradient) {
    const Tensor origin(1, 2, {0.5, 0.5});
    const AttackBudget b{Norm::L2, 1.0, 0.1, 1, 1};
    const auto s = attack_step(SignGD{}, AttackState::start(origin, origin), Tensor(1, 2, {3.0, 4.0}), b);
    EXPECT_NEAR(s.x_adv[0], 0.56, 1e-12);
    EXPECT_NEAR(s.x_adv[1], 0.58, 1e-12);
}

TEST(Step, FreshLearnedOptimizerWithZeroHeadStaysPut) {
    auto p = learned::OptimizerParams::initialize(1, learned::InputMode::RawAndSign, 0.0);
    const Learned rule{std::make_shared<const learned::OptimizerParams>(p)};
    const Tensor origin(1, 3, {0.5, 0.5, 0.5});
    const AttackBudget b{Norm::Linf, 0.1, 0.05, 1, 1};
    const auto s = attack_step(rule, AttackState::start(origin, origin), Tensor(1, 3, {1.0, -1.0, 2.0}), b);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(s.x_adv[i], 0.5);
}

TEST(Oracle, SignGdMatchesCornerEnumerationOnBinaryLinearModels) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t d = 1 + rng() % 12;
        const auto f = random_linear(d, 2, rng);
        const auto x0 = random_tensor(1, d, rng, 0, 1);
        const std::size_t y = rng() % 2;
        const double eps = std::uniform_real_distribution<>(0.01, 0.5)(rng);
        const double alpha = eps * std::uniform_real_distribution<>(1.0, 3.0)(rng);
        const std::size_t t = 1 + rng() % 4;
        const AttackBudget b{Norm::Linf, eps, alpha, t, 1};
        const auto out = run_attack(f, {x0, y}, b, SignGD{}, CleanStart{}, LossKind::cw());
        EXPECT_NEAR(out.best_loss[0], corner_max(f, x0, y, eps), 1e-12) << "trial " << trial;
    }
}

TEST(Oracle, UniformStartNeedsTwoStepsAtAlphaEqualEpsilon) {
    std::mt19937_64 rng(22);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t d = 2 + rng() % 8;
        const auto f = random_linear(d, 2, rng);
        const auto x0 = random_tensor(1, d, rng, 0, 1);
        const AttackBudget b{Norm::Linf, 0.2, 0.2, 2, 1};
        const auto out = run_attack(f, {x0, 0}, b, SignGD{}, UniformRandom{}, LossKind::cw(), rng());
        EXPECT_NEAR(out.best_loss[0], corner_max(f, x0, 0, 0.2), 1e-12);
    }
}

TEST(Trajectory, BestIterateIsTraceMaximumAndFeasible) {
    std::mt19937_64 rng(23);
    const nn::Network f("n", {1, 3, 3}, 4, "dense:8,relu,dense:4", 3);
    const auto x = random_tensor(6, 9, rng, 0, 1);
    const std::vector<std::size_t> labels{0, 1, 2, 3, 0, 1};
    const AttackBudget b{Norm::Linf, 0.2, 0.05, 10, 1};
    for (const UpdateRule& rule : {UpdateRule{SignGD{}}, UpdateRule{Momentum{0.9}}, UpdateRule{Nesterov{1.0}},
                                   UpdateRule{AdamStep{}}}) {
        std::vector<Tensor> iterates;
        const auto out = run_attack_batch(f, x, Objective{LossKind::cw(), labels, {}}, b, rule, UniformRandom{},
                                          seeds_for(6, 1), [&](const AttackState& s) { iterates.push_back(s.x_adv); });
        ASSERT_EQ(iterates.size(), b.iterations + 1);
        for (const auto& it : iterates) {
            const auto v = constraint_violation(it, x, b);
            EXPECT_LE(v.ball, 1e-12);
            EXPECT_LE(v.box, 0.0);
        }
        for (std::size_t r = 0; r < 6; ++r) {
            EXPECT_EQ(out.best_loss[r], *std::max_element(out.trace[r].begin(), out.trace[r].end()));
            const auto z = f.logits(Tensor(1, 9, std::vector<double>(out.x_adv.row_span(r).begin(),
                                                                    out.x_adv.row_span(r).end())));
            EXPECT_NEAR(loss(LossKind::cw(), z.row_span(0), labels[r]), out.best_loss[r], 1e-12);
            EXPECT_EQ(out.success[r] != 0, out.best_loss[r] > 0.0);
            EXPECT_EQ(out.success_within(r, b.iterations), out.success[r] != 0);
        }
    }
}

TEST(Trajectory, ZeroEpsilonLeavesInputsUnchanged) {
    std::mt19937_64 rng(24);
    const nn::Network f("n", {1, 2, 2}, 3, "dense:5,relu,dense:3", 4);
    const auto x = random_tensor(5, 4, rng, 0, 1);
    const std::vector<std::size_t> labels{0, 1, 2, 0, 1};
    const AttackBudget b{Norm::Linf, 0.0, 0.05, 5, 1};
    const auto out =
        run_attack_batch(f, x, Objective{LossKind::ce(), labels, {}}, b, SignGD{}, UniformRandom{}, seeds_for(5, 2));
    const auto clean = f.logits(x);
    for (std::size_t r = 0; r < 5; ++r) {
        EXPECT_EQ(out.success[r] != 0, misclassified(clean.row_span(r), labels[r]));
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out.x_adv(r, c), x(r, c));
    }
}

TEST(Trajectory, DeterministicUnderSeeds) {
    std::mt19937_64 rng(25);
    const nn::Network f("n", {1, 2, 3}, 3, "dense:6,tanh,dense:3", 5);
    const auto x = random_tensor(4, 6, rng, 0, 1);
    const std::vector<std::size_t> labels{0, 1, 2, 1};
    const AttackBudget b{Norm::L2, 0.5, 0.1, 6, 3};
    const auto a = run_with_restarts_batch(f, x, Objective{LossKind::dlr(), labels, {}}, b, SignGD{}, Odi{2, {}},
                                           seeds_for(4, 3));
    const auto c = run_with_restarts_batch(f, x, Objective{LossKind::dlr(), labels, {}}, b, SignGD{}, Odi{2, {}},
                                           seeds_for(4, 3));
    EXPECT_EQ(a.success, c.success);
    EXPECT_EQ(a.best_loss, c.best_loss);
    EXPECT_EQ(a.x_adv, c.x_adv);
}

TEST(Restarts, UnionIsMonotoneAndMatchesShorterRuns) {
    std::mt19937_64 rng(26);
    const nn::Network f("n", {1, 3, 3}, 4, "dense:10,relu,dense:4", 6);
    const auto x = random_tensor(20, 9, rng, 0, 1);
    std::vector<std::size_t> labels(20);
    for (std::size_t i = 0; i < 20; ++i) labels[i] = i % 4;
    const Objective obj{LossKind::cw(), labels, {}};
    const auto seeds = seeds_for(20, 4);
    AttackBudget b{Norm::Linf, 0.05, 0.02, 8, 6};
    const auto full = run_with_restarts_batch(f, x, obj, b, SignGD{}, UniformRandom{}, seeds);
    for (std::size_t r = 0; r < 20; ++r) {
        bool prev = false;
        for (std::size_t k = 1; k <= 6; ++k) {
            const bool now = full.success_within(r, k, b.iterations);
            EXPECT_TRUE(!prev || now);
            prev = now;
        }
        EXPECT_EQ(full.success_within(r, 6, 8), full.success[r] != 0);
    }
    // a dedicated R=3, T=5 run equals the prefix of the long run
    AttackBudget short_b{Norm::Linf, 0.05, 0.02, 5, 3};
    const auto small = run_with_restarts_batch(f, x, obj, short_b, SignGD{}, UniformRandom{}, seeds);
    for (std::size_t r = 0; r < 20; ++r) EXPECT_EQ(full.success_within(r, 3, 5), small.success[r] != 0);
}

TEST(Odi, StartIsFeasibleDiffersFromUniformAndIsSeeded) {
    std::mt19937_64 rng(27);
    const nn::Network f("n", {1, 3, 3}, 5, "dense:10,relu,dense:5", 7);
    const auto x = random_tensor(8, 9, rng, 0, 1);
    const AttackBudget b{Norm::Linf, 0.1, 0.02, 1, 1};
    const auto seeds = seeds_for(8, 5);
    const auto a = odi_init_batch(f, x, b, 2, 0.1, seeds);
    const auto again = odi_init_batch(f, x, b, 2, 0.1, seeds);
    const auto uniform = uniform_start(x, b, seeds);
    EXPECT_EQ(a.x_adv, again.x_adv);
    EXPECT_NE(a.x_adv, uniform);
    const auto v = constraint_violation(a.x_adv, x, b);
    EXPECT_LE(v.ball, 1e-12);
    EXPECT_LE(v.box, 0.0);
    EXPECT_THROW(odi_init_batch(f, x, b, 0, 0.1, seeds), ConfigError);
}

TEST(MultiTargeted, BinaryCaseEqualsUntargetedCw) {
    std::mt19937_64 rng(28);
    const nn::Network f("n", {1, 2, 2}, 2, "dense:6,relu,dense:2", 8);
    const auto x = random_tensor(12, 4, rng, 0, 1);
    std::vector<std::size_t> labels(12);
    for (std::size_t i = 0; i < 12; ++i) labels[i] = i % 2;
    const AttackBudget b{Norm::Linf, 0.2, 0.05, 6, 2};
    const auto seeds = seeds_for(12, 6);
    const auto mt = multi_targeted_batch(f, x, labels, b, SignGD{}, UniformRandom{}, seeds);
    const auto cw = run_with_restarts_batch(f, x, Objective{LossKind::cw(), labels, {}}, b, SignGD{},
                                            UniformRandom{}, seeds);
    EXPECT_EQ(mt.targeted_runs, 1u);
    EXPECT_EQ(mt.success, cw.success);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(mt.best_loss[i], cw.best_loss[i], 1e-12);
}

TEST(Validation, BadInputsAreConfigErrors) {
    const nn::Network f("n", {1, 2, 2}, 3, "dense:3", 9);
    const Tensor x(1, 4, 0.5);
    EXPECT_THROW(run_attack(f, {x, 3}, {Norm::Linf, 0.1, 0.01, 1, 1}, SignGD{}, CleanStart{}, LossKind::cw()),
                 ConfigError);
    EXPECT_THROW(run_attack(f, {x, 0}, {Norm::Linf, 0.1, 0.0, 1, 1}, SignGD{}, CleanStart{}, LossKind::cw()),
                 ConfigError);
    EXPECT_THROW(run_attack(f, {x, 0}, {Norm::Linf, 0.1, 0.01, 1, 1}, Momentum{1.5}, CleanStart{}, LossKind::cw()),
                 ConfigError);
    EXPECT_THROW(run_attack(f, {x, 0}, {Norm::Linf, 0.1, 0.01, 1, 1}, Learned{}, CleanStart{}, LossKind::cw()),
                 ConfigError);
}
