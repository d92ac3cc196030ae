#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "mama/nn.hpp"
#include "mama/training.hpp"
#include "test_util.hpp"

using namespace mama;
using namespace mama::training;
using mama::testing::random_tensor;

namespace {

// Smooth two-input defenses; with origin near the centre of the box and a
// small step no coordinate is ever clipped.
nn::Network smooth_net(std::uint64_t seed) { return nn::Network("smooth" + std::to_string(seed), {1, 1, 2}, 3, "dense:5,tanh,dense:3", seed); }

Batch centred_batch(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return {random_tensor(2, 2, rng, 0.4, 0.6), {0, 2}, {seed, seed + 1}};
}

AttackBudget tiny_budget() { return {Norm::Linf, 0.3, 0.02, 3, 1}; }

BMAConfig tiny_config(bool differentiate_input_gradient) {
    auto c = BMAConfig::defaults(3);
    c.step_weights = {0.5, 1.0, 2.0};
    c.prior_weights = {0.1, 0.2, 0.3};
    c.loss = LossKind::ce();
    c.differentiate_input_gradient = differentiate_input_gradient;
    c.start = StartPoint::Clean;
    return c;
}

std::vector<Tensor> random_direction(const learned::OptimizerParams& p, std::mt19937_64& rng) {
    std::vector<Tensor> d;
    for (const auto& t : p.tensors) d.push_back(random_tensor(t.rows(), t.cols(), rng));
    return d;
}

learned::OptimizerParams shifted(const learned::OptimizerParams& p, const std::vector<Tensor>& dir, double h) {
    auto values = p.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
        for (std::size_t j = 0; j < values[i].size(); ++j) values[i][j] += h * dir[i][j];
    }
    return from_values(p, values);
}

double dot(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < a[i].size(); ++j) s += a[i][j] * b[i][j];
    }
    return s;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

}  // namespace

class BmaGradient : public ::testing::TestWithParam<bool> {};

// With a detached input gradient the objective's derivative is only exact
// when the input gradient does not depend on the iterate: a linear binary
// model under the margin loss.
TEST_P(BmaGradient, MatchesFiniteDifferences) {
    const bool diff_input = GetParam();
    const auto f = diff_input ? smooth_net(1)
                              : nn::Network::linear(Tensor(2, 2, {0.3, -0.8, -0.5, 0.9}), Tensor(1, 2, {0.1, 0.0}),
                                                    {1, 1, 2});
    auto batch = centred_batch(2);
    if (!diff_input) batch.labels = {0, 1};
    const auto budget = tiny_budget();
    auto cfg = tiny_config(diff_input);
    if (!diff_input) cfg.loss = LossKind::cw();
    const auto params = learned::OptimizerParams::initialize(3, learned::InputMode::RawAndSign, 0.5);

    UnrollTrace trace;
    const auto live = params.trainable();
    auto j = bma_objective(live, f, batch, budget, cfg, cfg.loss, &trace);
    for (const auto& x : trace.iterates) {
        ASSERT_EQ(constraint_violation(x, batch.images, {Norm::Linf, 0.3 - 1e-9, 1, 1, 1}).ball, 0.0);
        for (double v : x.data()) ASSERT_TRUE(v > 0.0 && v < 1.0);
    }
    const auto grads = values_of(ad::grad(j, live.tensors));
    auto objective = [&](const learned::OptimizerParams& p) {
        ad::NoGradGuard guard;
        return bma_objective(p, f, batch, budget, cfg, cfg.loss).item();
    };
    std::mt19937_64 rng(4);
    for (int k = 0; k < 6; ++k) {
        const auto dir = random_direction(params, rng);
        const double h = 1e-5;
        const double fd = (objective(shifted(params, dir, h)) - objective(shifted(params, dir, -h))) / (2 * h);
        EXPECT_LT(rel(dot(grads, dir), fd), 1e-3) << "direction " << k;
    }
    // coordinate checks on the output head and the first-layer input weights
    for (std::size_t tensor : {0u, 6u, 7u}) {
        for (std::size_t idx = 0; idx < std::min<std::size_t>(5, params.tensors[tensor].size()); ++idx) {
            std::vector<Tensor> dir;
            for (const auto& t : params.tensors) dir.emplace_back(t.rows(), t.cols());
            dir[tensor][idx] = 1.0;
            const double h = 1e-5;
            const double fd = (objective(shifted(params, dir, h)) - objective(shifted(params, dir, -h))) / (2 * h);
            EXPECT_LT(rel(grads[tensor][idx], fd), 1e-3) << "tensor " << tensor << " index " << idx;
        }
    }
}

INSTANTIATE_TEST_SUITE_P(InputGradientMode, BmaGradient, ::testing::Values(false, true));

TEST(BmaObjective, ValueIsWeightedLossMinusPenalty) {
    const auto f = smooth_net(5);
    const auto batch = centred_batch(6);
    const auto budget = tiny_budget();
    const auto cfg = tiny_config(false);
    const auto params = learned::OptimizerParams::initialize(7, learned::InputMode::RawAndSign, 0.5);
    UnrollTrace trace;
    const double j = bma_objective(params, f, batch, budget, cfg, cfg.loss, &trace).item();
    double expect = 0.0;
    for (std::size_t t = 0; t < 3; ++t) {
        expect += cfg.step_weights[t] * trace.mean_losses[t] - cfg.prior_weights[t] * trace.mean_penalties[t];
    }
    EXPECT_NEAR(j, expect, 1e-12);
    // independent recomputation of the losses from the iterates
    for (std::size_t t = 1; t <= 3; ++t) {
        const auto z = f.logits(trace.iterates[t]);
        const double mean = 0.5 * (loss(LossKind::ce(), z.row_span(0), 0) + loss(LossKind::ce(), z.row_span(1), 2));
        EXPECT_NEAR(trace.mean_losses[t - 1], mean, 1e-12);
    }
}

TEST(BmaObjective, TruncationKeepsValueAndCutsEarlyGradient) {
    const auto f = smooth_net(8);
    const auto batch = centred_batch(9);
    const auto budget = tiny_budget();
    auto full = tiny_config(false);
    auto cut = full;
    cut.unroll_truncation = 1;
    const auto params = learned::OptimizerParams::initialize(10, learned::InputMode::RawAndSign, 0.5);
    const auto live = params.trainable();
    auto a = bma_objective(live, f, batch, budget, full, full.loss);
    auto b = bma_objective(live, f, batch, budget, cut, cut.loss);
    EXPECT_NEAR(a.item(), b.item(), 1e-14);
    const auto ga = values_of(ad::grad(a, live.tensors));
    const auto gb = values_of(ad::grad(b, live.tensors));
    EXPECT_GT(mama::testing::max_rel_error(ga[6], gb[6]), 1e-6);
}

TEST(BmaObjective, DetachingTheInputGradientChangesTheGradientOnCurvedModels) {
    const auto f = smooth_net(14);
    const auto batch = centred_batch(15);
    const auto params = learned::OptimizerParams::initialize(16, learned::InputMode::RawAndSign, 0.5);
    const auto live = params.trainable();
    const auto full = tiny_config(true), cut = tiny_config(false);
    auto a = bma_objective(live, f, batch, tiny_budget(), full, full.loss);
    auto b = bma_objective(live, f, batch, tiny_budget(), cut, cut.loss);
    EXPECT_NEAR(a.item(), b.item(), 1e-14);
    const auto ga = values_of(ad::grad(a, live.tensors));
    const auto gb = values_of(ad::grad(b, live.tensors));
    EXPECT_GT(mama::testing::max_rel_error(ga[0], gb[0]), 1e-6);
}

TEST(BmaObjective, RejectsMismatchedInputs) {
    const auto f = smooth_net(11);
    auto batch = centred_batch(12);
    const auto params = learned::OptimizerParams::initialize(13);
    auto cfg = tiny_config(false);
    batch.labels.pop_back();
    EXPECT_THROW(bma_objective(params, f, batch, tiny_budget(), cfg, cfg.loss), ConfigError);
    cfg.step_weights.pop_back();
    EXPECT_THROW(bma_objective(params, f, centred_batch(12), tiny_budget(), cfg, cfg.loss), ConfigError);
}

TEST(MamaGradient, SecondOrderMatchesFiniteDifferences) {
    const auto f1 = smooth_net(21);
    const auto f2 = smooth_net(22);
    const std::vector<const Classifier*> train{&f1}, test{&f2};
    const std::vector<Batch> train_b{centred_batch(23)}, test_b{centred_batch(24)};
    const auto budget = tiny_budget();
    MAMAConfig cfg;
    cfg.bma = tiny_config(true);
    cfg.beta = 0.5;  // large enough that the second-order term matters
    cfg.mu = 1.0;
    const auto params = learned::OptimizerParams::initialize(25, learned::InputMode::RawAndSign, 0.5);

    const auto mg = meta_gradient(params, train, train_b, test, test_b, budget, cfg);
    auto first_order = cfg;
    first_order.first_order = true;
    const auto fo = meta_gradient(params, train, train_b, test, test_b, budget, first_order);

    // F(phi) = J_train(phi) + mu * J_test(phi + beta * dJ_train/dphi), evaluated numerically
    auto combined = [&](const learned::OptimizerParams& p) {
        const auto live = p.trainable();
        auto jt = mean_objective(live, train, train_b, budget, cfg.bma);
        const auto g = values_of(ad::grad(jt, live.tensors));
        auto stepped = p.values();
        for (std::size_t i = 0; i < stepped.size(); ++i) {
            for (std::size_t j = 0; j < stepped[i].size(); ++j) stepped[i][j] += cfg.beta * g[i][j];
        }
        ad::NoGradGuard guard;
        return jt.item() + cfg.mu * mean_objective(from_values(p, stepped), test, test_b, budget, cfg.bma).item();
    };
    std::mt19937_64 rng(26);
    double worst = 0.0, worst_fo = 0.0;
    for (int k = 0; k < 5; ++k) {
        const auto dir = random_direction(params, rng);
        const double h = 1e-5;
        const double fd = (combined(shifted(params, dir, h)) - combined(shifted(params, dir, -h))) / (2 * h);
        worst = std::max(worst, rel(dot(mg.gradient, dir), fd));
        worst_fo = std::max(worst_fo, rel(dot(fo.gradient, dir), fd));
    }
    EXPECT_LT(worst, 1e-2);
    // the first-order approximation really drops something measurable here
    EXPECT_GT(worst_fo, worst);
}

TEST(MamaStep, MuZeroEqualsBmaStep) {
    const auto f1 = smooth_net(31);
    const auto f2 = smooth_net(32);
    const std::vector<const Classifier*> train{&f1}, test{&f2};
    const std::vector<Batch> train_b{centred_batch(33)}, test_b{centred_batch(34)};
    const auto budget = tiny_budget();
    MAMAConfig cfg;
    cfg.bma = tiny_config(true);
    cfg.mu = 0.0;
    auto a = learned::OptimizerParams::initialize(35, learned::InputMode::RawAndSign, 0.5);
    auto b = a;
    optim::Optimizer outer(optim::Kind::Sgd, cfg.gamma);
    optim::Optimizer trainer(optim::Kind::Sgd, cfg.gamma);
    const auto r = mama_step(a, train, train_b, test, test_b, budget, cfg, outer);
    const double j = bma_step(b, train, train_b, budget, cfg.bma, trainer);
    EXPECT_EQ(r.meta_train_objective, j);
    EXPECT_TRUE(r.meta_test_objective.has_value());
    EXPECT_TRUE(a == b);
}

TEST(MamaSplit, UniformOverDefensesChiSquare) {
    std::mt19937_64 rng(41);
    const std::size_t pool = 5, draws = 5000;
    std::vector<double> count(pool, 0.0);
    for (std::size_t i = 0; i < draws; ++i) {
        const auto s = random_split(pool, 1, rng);
        ASSERT_EQ(s.meta_test.size(), 1u);
        ASSERT_EQ(s.meta_train.size(), 4u);
        count[s.meta_test[0]] += 1.0;
    }
    const double expected = static_cast<double>(draws) / pool;
    double chi2 = 0.0;
    for (double c : count) chi2 += (c - expected) * (c - expected) / expected;
    EXPECT_LT(chi2, 18.47);  // df = 4, p = 0.001
}

TEST(MamaSplit, PartitionsThePool) {
    std::mt19937_64 rng(42);
    for (std::size_t n = 0; n < 6; ++n) {
        const auto s = random_split(6, n, rng);
        std::vector<std::size_t> all = s.meta_train;
        all.insert(all.end(), s.meta_test.begin(), s.meta_test.end());
        std::sort(all.begin(), all.end());
        for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(all[i], i);
        EXPECT_EQ(s.meta_test.size(), n);
    }
}

TEST(MamaConfig, Validation) {
    MAMAConfig cfg;
    cfg.bma = tiny_config(true);
    EXPECT_NO_THROW(cfg.validate(tiny_budget(), 2));
    EXPECT_THROW(cfg.validate(tiny_budget(), 1), ConfigError);
    cfg.meta_test_count = 0;
    EXPECT_NO_THROW(cfg.validate(tiny_budget(), 1));
    cfg.beta = 0.0;
    EXPECT_THROW(cfg.validate(tiny_budget(), 2), ConfigError);
}

TEST(Divergence, WritesLastFiniteParametersAndThrows) {
    const auto path = std::filesystem::temp_directory_path() / "mama_diverged.ckpt";
    const auto p = learned::OptimizerParams::initialize(51);
    EXPECT_THROW(training::detail::diverged(p, path, 7, "test"), RuntimeError);
    EXPECT_TRUE(learned::load_checkpoint(path) == p);
    std::filesystem::remove(path);
}

TEST(TrainBma, DeterministicGivenSeed) {
    const auto f = smooth_net(61);
    data::Dataset d;
    d.shape = {1, 1, 2};
    d.num_classes = 3;
    std::mt19937_64 rng(62);
    d.images = random_tensor(20, 2, rng, 0.3, 0.7);
    for (std::size_t i = 0; i < 20; ++i) d.labels.push_back(i % 3);
    auto cfg = tiny_config(false);
    cfg.max_iterations = 3;
    cfg.batch_size = 4;
    const auto init = learned::OptimizerParams::initialize(63);
    const auto a = train_bma(init, {&f}, d, tiny_budget(), cfg);
    const auto b = train_bma(init, {&f}, d, tiny_budget(), cfg);
    EXPECT_TRUE(a.params == b.params);
    EXPECT_FALSE(a.params == init);
    ASSERT_EQ(a.curve.size(), 3u);
    EXPECT_EQ(a.curve[2].objective, b.curve[2].objective);
}

TEST(Curve, JsonRoundTripKeepsMissingValues) {
    const std::vector<training::CurvePoint> curve{
        {0, std::numeric_limits<double>::quiet_NaN(), 78.5, 0.0}, {1, -2.5, std::nullopt, 0.25}};
    for (const auto& p : curve) {
        const auto back = nlohmann::json::parse(nlohmann::json(p).dump()).get<training::CurvePoint>();
        EXPECT_EQ(back.iteration, p.iteration);
        EXPECT_EQ(std::isnan(back.objective), std::isnan(p.objective));
        if (!std::isnan(p.objective)) EXPECT_EQ(back.objective, p.objective);
        EXPECT_EQ(back.robust_accuracy, p.robust_accuracy);
        EXPECT_EQ(back.wall_seconds, p.wall_seconds);
    }
}
