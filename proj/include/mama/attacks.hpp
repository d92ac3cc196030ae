#pragma once

// Iterative white-box attacks: hand-designed update rules (sign gradient,
// momentum, Nesterov, Adam), the learned recurrent rule, initialization
// strategies, restarts and the multi-targeted wrapper. All attacks run on a
// batch of examples at once; every row is an independent trajectory.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mama/core.hpp"
#include "mama/learned_opt.hpp"
#include "mama/seeding.hpp"

namespace mama::attacks {

struct SignGD {};
struct Momentum {
    double decay = 1.0;
};
struct Nesterov {
    double decay = 1.0;
};
struct AdamStep {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps_hat = 1e-8;
};
struct Learned {
    std::shared_ptr<const learned::OptimizerParams> params;
};

using UpdateRule = std::variant<SignGD, Momentum, Nesterov, AdamStep, Learned>;

struct CleanStart {};
struct UniformRandom {};
struct Odi {
    std::size_t steps = 2;
    /// Defaults to the budget's epsilon.
    std::optional<double> step_size;
};

using InitStrategy = std::variant<CleanStart, UniformRandom, Odi>;

inline std::string rule_name(const UpdateRule& r) {
    return std::visit(
        [](const auto& v) -> std::string {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, SignGD>) return "signgd";
            if constexpr (std::is_same_v<T, Momentum>) return "momentum";
            if constexpr (std::is_same_v<T, Nesterov>) return "nesterov";
            if constexpr (std::is_same_v<T, AdamStep>) return "adam";
            if constexpr (std::is_same_v<T, Learned>) return "learned";
            return "?";
        },
        r);
}

inline void validate_rule(const UpdateRule& r) {
    std::visit(
        [](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, Momentum> || std::is_same_v<T, Nesterov>) {
                if (!(v.decay >= 0.0 && v.decay <= 1.0)) throw ConfigError("momentum decay must be in [0,1]");
            } else if constexpr (std::is_same_v<T, AdamStep>) {
                if (!(v.beta1 >= 0.0 && v.beta1 < 1.0 && v.beta2 >= 0.0 && v.beta2 < 1.0 && v.eps_hat > 0.0)) {
                    throw ConfigError("adam: betas must be in [0,1), eps_hat > 0");
                }
            } else if constexpr (std::is_same_v<T, Learned>) {
                if (!v.params) throw ConfigError("learned rule without parameters");
            }
        },
        r);
}

/// Iterate plus every per-trajectory accumulator. Accumulators are empty at
/// the start of a trajectory and allocated by the first step that needs them.
struct AttackState {
    Tensor x_adv;
    Tensor origin;
    std::size_t step_index = 0;
    Tensor momentum;
    Tensor adam_m;
    Tensor adam_v;
    std::optional<learned::RecurrentState> hidden;

    static AttackState start(Tensor origin, Tensor x0) {
        AttackState s;
        s.origin = std::move(origin);
        s.x_adv = std::move(x0);
        return s;
    }
};

namespace detail {

/// Steepest-ascent direction of a unit step: sign for Linf, row-normalized
/// for L2 (zero rows stay zero).
inline Tensor steepest(const Tensor& d, Norm norm) {
    if (norm == Norm::Linf) return tensor_ops::sign(d);
    Tensor out(d.rows(), d.cols());
    for (std::size_t r = 0; r < d.rows(); ++r) {
        const double n = tensor_ops::l2_norm(d.row_span(r));
        if (n == 0.0) continue;
        for (std::size_t c = 0; c < d.cols(); ++c) out(r, c) = d(r, c) / n;
    }
    return out;
}

/// g <- decay * g + grad / ||grad||_1 per row; a zero row contributes nothing.
inline Tensor accumulate_momentum(const Tensor& previous, const Tensor& grad, double decay) {
    Tensor g = previous.empty() ? Tensor(grad.rows(), grad.cols()) : previous;
    for (std::size_t r = 0; r < grad.rows(); ++r) {
        const double l1 = tensor_ops::l1_norm(grad.row_span(r));
        for (std::size_t c = 0; c < grad.cols(); ++c) {
            g(r, c) = decay * g(r, c) + (l1 > 0.0 ? grad(r, c) / l1 : 0.0);
        }
    }
    return g;
}

}  // namespace detail

/// Point at which the caller must evaluate the gradient for the next step:
/// the Nesterov look-ahead x + step * decay * g, otherwise the iterate.
inline Tensor gradient_point(const UpdateRule& rule, const AttackState& state, const AttackBudget& budget) {
    if (const auto* nes = std::get_if<Nesterov>(&rule); nes && !state.momentum.empty()) {
        Tensor x = state.x_adv;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += budget.step_size * nes->decay * state.momentum[i];
        return x;
    }
    return state.x_adv;
}

/// One projected update. `grad` is the loss gradient at gradient_point().
inline AttackState attack_step(const UpdateRule& rule, const AttackState& state, const Tensor& grad,
                               const AttackBudget& budget) {
    if (!grad.same_shape(state.x_adv)) throw ConfigError("attack_step: gradient shape mismatch");
    AttackState next = state;
    next.step_index = state.step_index + 1;
    Tensor direction;
    std::visit(
        [&](const auto& r) {
            using T = std::decay_t<decltype(r)>;
            if constexpr (std::is_same_v<T, SignGD>) {
                direction = detail::steepest(grad, budget.norm);
            } else if constexpr (std::is_same_v<T, Momentum> || std::is_same_v<T, Nesterov>) {
                next.momentum = detail::accumulate_momentum(state.momentum, grad, r.decay);
                direction = detail::steepest(next.momentum, budget.norm);
            } else if constexpr (std::is_same_v<T, AdamStep>) {
                if (state.adam_m.empty()) {
                    next.adam_m = Tensor(grad.rows(), grad.cols());
                    next.adam_v = Tensor(grad.rows(), grad.cols());
                }
                const double t = static_cast<double>(next.step_index);
                const double c1 = 1.0 - std::pow(r.beta1, t);
                const double c2 = 1.0 - std::pow(r.beta2, t);
                direction = Tensor(grad.rows(), grad.cols());
                for (std::size_t i = 0; i < grad.size(); ++i) {
                    next.adam_m[i] = r.beta1 * next.adam_m[i] + (1.0 - r.beta1) * grad[i];
                    next.adam_v[i] = r.beta2 * next.adam_v[i] + (1.0 - r.beta2) * grad[i] * grad[i];
                    direction[i] = (next.adam_m[i] / c1) / (std::sqrt(next.adam_v[i] / c2) + r.eps_hat);
                }
                if (budget.norm == Norm::L2) direction = detail::steepest(direction, Norm::L2);
            } else if constexpr (std::is_same_v<T, Learned>) {
                ad::NoGradGuard guard;
                const auto rows = grad.size();
                const auto hidden = state.hidden ? *state.hidden : learned::RecurrentState::zeros(rows);
                auto out = learned::rnn_step(*r.params, ad::constant(grad), hidden);
                direction = out.direction.value();
                next.hidden = std::move(out.next);
            }
        },
        rule);
    Tensor moved = state.x_adv;
    for (std::size_t i = 0; i < moved.size(); ++i) moved[i] += budget.step_size * direction[i];
    next.x_adv = project(moved, state.origin, budget);
    return next;
}

// ---------------------------------------------------------------------------
// Objectives

/// What a trajectory maximizes: a loss kind against the true labels, or a
/// per-row targeted margin. Success is always misclassification w.r.t. the
/// true label.
struct Objective {
    LossKind kind = LossKind::cw();
    std::vector<std::size_t> labels;
    std::vector<std::size_t> row_targets;  // non-empty: per-row targeted margin

    [[nodiscard]] ad::Var losses(const ad::Var& logits) const {
        if (!row_targets.empty()) return targeted_margin(logits, row_targets);
        return batch_loss(kind, logits, labels);
    }
};

struct Evaluation {
    Tensor losses;  // N x 1
    Tensor gradient;
    Tensor logits;
};

inline Evaluation evaluate(const Classifier& f, const Objective& obj, const Tensor& x, bool want_gradient,
                           std::size_t step) {
    if (!want_gradient) {
        ad::NoGradGuard guard;
        auto logits = f.logits(ad::constant(x));
        return {obj.losses(logits).value(), {}, logits.value()};
    }
    auto input = ad::parameter(x);
    auto logits = f.logits(input);
    auto losses = obj.losses(logits);
    auto g = ad::grad(ad::sum(losses), {input})[0].value();
    for (std::size_t r = 0; r < g.rows(); ++r) {
        for (double v : g.row_span(r)) {
            if (!std::isfinite(v)) throw NonFiniteError("attack gradient is not finite", step, r);
        }
    }
    return {losses.value(), std::move(g), logits.value()};
}

// ---------------------------------------------------------------------------
// Initialization

inline Tensor uniform_start(const Tensor& origin, const AttackBudget& budget, std::span<const std::uint64_t> seeds) {
    Tensor x = origin;
    for (std::size_t r = 0; r < origin.rows(); ++r) {
        std::mt19937_64 rng(seeds[r]);
        std::uniform_real_distribution<double> d(-budget.epsilon, budget.epsilon);
        for (std::size_t c = 0; c < origin.cols(); ++c) x(r, c) += budget.epsilon > 0.0 ? d(rng) : 0.0;
    }
    return project(x, origin, budget);
}

/// Output-diversified start: from a uniform random point, take `steps`
/// normalized ascent steps on w^T f(x) with w ~ U(-1,1)^K drawn per row.
/// Rows whose diversity gradient vanishes keep the uniform random start.
inline AttackState odi_init_batch(const Classifier& f, const Tensor& origin, const AttackBudget& budget,
                                  std::size_t steps, double step_size, std::span<const std::uint64_t> seeds) {
    if (steps < 1) throw ConfigError("odi_init: odi_steps must be >= 1");
    const std::size_t n = origin.rows();
    const std::size_t k = f.num_classes();
    Tensor x = origin;
    Tensor weights(n, k);
    for (std::size_t r = 0; r < n; ++r) {
        std::mt19937_64 rng(seeds[r]);
        std::uniform_real_distribution<double> d(-budget.epsilon, budget.epsilon);
        for (std::size_t c = 0; c < origin.cols(); ++c) x(r, c) += budget.epsilon > 0.0 ? d(rng) : 0.0;
        std::uniform_real_distribution<double> w(-1.0, 1.0);
        for (std::size_t c = 0; c < k; ++c) weights(r, c) = w(rng);
    }
    x = project(x, origin, budget);
    std::vector<char> fallback(n, 0);
    for (std::size_t s = 0; s < steps; ++s) {
        auto input = ad::parameter(x);
        auto score = ad::sum(ad::mul_const(f.logits(input), weights));
        auto g = ad::grad(score, {input})[0].value();
        Tensor moved = x;
        for (std::size_t r = 0; r < n; ++r) {
            const double norm = tensor_ops::l2_norm(g.row_span(r));
            if (!std::isfinite(norm)) throw NonFiniteError("odi: non-finite gradient", s, r);
            if (norm == 0.0) fallback[r] = 1;
            if (fallback[r]) continue;
            for (std::size_t c = 0; c < x.cols(); ++c) {
                const double v = g(r, c) / norm;
                moved(r, c) += step_size * (budget.norm == Norm::Linf ? tensor_ops::sign(v) : v);
            }
        }
        x = project(moved, origin, budget);
    }
    // Rows that hit a zero gradient restart from their uniform sample.
    if (std::any_of(fallback.begin(), fallback.end(), [](char c) { return c != 0; })) {
        const Tensor uniform = uniform_start(origin, budget, seeds);
        for (std::size_t r = 0; r < n; ++r) {
            if (fallback[r]) x.set_row(r, uniform.row_span(r));
        }
    }
    return AttackState::start(origin, std::move(x));
}

inline AttackState odi_init(const Classifier& f, const LabeledExample& example, const AttackBudget& budget,
                            std::size_t odi_steps, double odi_step_size, std::uint64_t seed) {
    const std::uint64_t seeds[1] = {seed};
    return odi_init_batch(f, example.image, budget, odi_steps, odi_step_size, seeds);
}

inline AttackState initialize(const Classifier& f, const InitStrategy& init, const Tensor& origin,
                              const AttackBudget& budget, std::span<const std::uint64_t> seeds) {
    if (seeds.size() != origin.rows()) throw ConfigError("initialize: one seed per example required");
    if (std::holds_alternative<CleanStart>(init)) return AttackState::start(origin, origin);
    if (std::holds_alternative<UniformRandom>(init)) return AttackState::start(origin, uniform_start(origin, budget, seeds));
    const auto& odi = std::get<Odi>(init);
    return odi_init_batch(f, origin, budget, odi.steps, odi.step_size.value_or(budget.epsilon), seeds);
}

// ---------------------------------------------------------------------------
// Trajectories

struct AttackOutcome {
    Tensor x_adv;                             // best iterate per row
    std::vector<char> success;                // misclassified at the best iterate
    std::vector<double> best_loss;            // max over the trace
    std::vector<std::vector<double>> trace;   // per row, T+1 losses including the start
    std::vector<std::vector<char>> misclassified_trace;  // per row, T+1 flags

    /// Best-iterate success when only the first `horizon` steps count.
    [[nodiscard]] bool success_within(std::size_t row, std::size_t horizon) const {
        const auto& l = trace.at(row);
        const std::size_t last = std::min(horizon, l.size() - 1);
        std::size_t best = 0;
        for (std::size_t t = 1; t <= last; ++t) {
            if (l[t] > l[best]) best = t;
        }
        return misclassified_trace.at(row)[best] != 0;
    }
};

/// Called with every iterate, including the initial point.
using IterateObserver = std::function<void(const AttackState&)>;

/// Runs init followed by T steps and keeps the max-loss iterate per row.
inline AttackOutcome run_attack_batch(const Classifier& f, const Tensor& images, const Objective& objective,
                                      const AttackBudget& budget, const UpdateRule& rule, const InitStrategy& init,
                                      std::span<const std::uint64_t> seeds, const IterateObserver& observer = {}) {
    budget.validate();
    validate_rule(rule);
    const std::size_t n = images.rows();
    if (objective.labels.size() != n) throw ConfigError("run_attack: one label per example required");

    AttackState state = initialize(f, init, images, budget, seeds);
    if (observer) observer(state);
    const bool nesterov = std::holds_alternative<Nesterov>(rule);

    AttackOutcome out;
    out.trace.assign(n, {});
    auto current = evaluate(f, objective, state.x_adv, !nesterov, 0);
    out.x_adv = state.x_adv;
    out.best_loss.resize(n);
    Tensor best_logits = current.logits;
    out.misclassified_trace.assign(n, {});
    for (std::size_t r = 0; r < n; ++r) {
        out.best_loss[r] = current.losses[r];
        out.trace[r].reserve(budget.iterations + 1);
        out.trace[r].push_back(current.losses[r]);
        out.misclassified_trace[r].push_back(misclassified(current.logits.row_span(r), objective.labels[r]));
    }

    for (std::size_t t = 1; t <= budget.iterations; ++t) {
        Tensor grad;
        if (nesterov) {
            grad = evaluate(f, objective, gradient_point(rule, state, budget), true, t - 1).gradient;
        } else {
            grad = std::move(current.gradient);
        }
        state = attack_step(rule, state, grad, budget);
        if (observer) observer(state);
        const bool need_grad = !nesterov && t < budget.iterations;
        current = evaluate(f, objective, state.x_adv, need_grad, t);
        for (std::size_t r = 0; r < n; ++r) {
            const double l = current.losses[r];
            out.trace[r].push_back(l);
            out.misclassified_trace[r].push_back(misclassified(current.logits.row_span(r), objective.labels[r]));
            if (l > out.best_loss[r]) {
                out.best_loss[r] = l;
                out.x_adv.set_row(r, state.x_adv.row_span(r));
                best_logits.set_row(r, current.logits.row_span(r));
            }
        }
    }

    out.success.resize(n);
    for (std::size_t r = 0; r < n; ++r) out.success[r] = misclassified(best_logits.row_span(r), objective.labels[r]);
    return out;
}

/// Single-example form.
inline AttackOutcome run_attack(const Classifier& f, const LabeledExample& example, const AttackBudget& budget,
                                const UpdateRule& rule, const InitStrategy& init, const LossKind& kind,
                                std::uint64_t seed = 0) {
    example.validate(f.num_classes());
    Objective obj{kind, {example.label}, {}};
    const std::uint64_t seeds[1] = {seed};
    return run_attack_batch(f, example.image, obj, budget, rule, init, seeds);
}

struct RestartOutcome {
    Tensor x_adv;
    std::vector<char> success;
    std::vector<double> best_loss;
    std::vector<std::vector<double>> per_restart_losses;  // [restart][row]
    std::vector<AttackOutcome> runs;                      // one per restart, with traces

    /// Union of successes over the first `restarts` restarts, each counted
    /// within `horizon` steps.
    [[nodiscard]] bool success_within(std::size_t row, std::size_t restarts, std::size_t horizon) const {
        for (std::size_t r = 0; r < std::min(restarts, runs.size()); ++r) {
            if (runs[r].success_within(row, horizon)) return true;
        }
        return false;
    }
};

/// budget.restarts independent trajectories; restart r of row i is seeded
/// with restart_seed(seeds[i], r). A successful restart beats any failed
/// one; ties go to the larger final (best-iterate) loss.
inline RestartOutcome run_with_restarts_batch(const Classifier& f, const Tensor& images, const Objective& objective,
                                              const AttackBudget& budget, const UpdateRule& rule,
                                              const InitStrategy& init, std::span<const std::uint64_t> seeds,
                                              const IterateObserver& observer = {}) {
    budget.validate();
    const std::size_t n = images.rows();
    RestartOutcome out;
    std::vector<std::uint64_t> restart_seeds(n);
    for (std::size_t r = 0; r < budget.restarts; ++r) {
        for (std::size_t i = 0; i < n; ++i) restart_seeds[i] = restart_seed(seeds[i], r);
        auto run = run_attack_batch(f, images, objective, budget, rule, init, restart_seeds, observer);
        out.per_restart_losses.push_back(run.best_loss);
        if (r == 0) {
            out.x_adv = run.x_adv;
            out.success = run.success;
            out.best_loss = run.best_loss;
            out.runs.push_back(std::move(run));
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const bool better = (run.success[i] && !out.success[i]) ||
                                (run.success[i] == out.success[i] && run.best_loss[i] > out.best_loss[i]);
            if (better) {
                out.x_adv.set_row(i, run.x_adv.row_span(i));
                out.success[i] = run.success[i];
                out.best_loss[i] = run.best_loss[i];
            }
        }
        out.runs.push_back(std::move(run));
    }
    return out;
}

inline RestartOutcome run_with_restarts(const Classifier& f, const LabeledExample& example, const AttackBudget& budget,
                                        const UpdateRule& rule, const InitStrategy& init, const LossKind& kind,
                                        std::uint64_t seed = 0) {
    example.validate(f.num_classes());
    Objective obj{kind, {example.label}, {}};
    const std::uint64_t seeds[1] = {seed};
    return run_with_restarts_batch(f, example.image, obj, budget, rule, init, seeds);
}

struct MultiTargetOutcome {
    Tensor x_adv;
    std::vector<char> success;
    std::vector<double> best_loss;
    std::size_t targeted_runs = 0;
};

/// One restart-wrapped targeted-margin attack per class other than the true
/// one (target offsets 1..K-1 from the label), all with the same seeds.
inline MultiTargetOutcome multi_targeted_batch(const Classifier& f, const Tensor& images,
                                               std::span<const std::size_t> labels, const AttackBudget& budget,
                                               const UpdateRule& rule, const InitStrategy& init,
                                               std::span<const std::uint64_t> seeds) {
    const std::size_t k = f.num_classes();
    if (k < 2) throw ConfigError("multi_targeted: need K >= 2");
    const std::size_t n = images.rows();
    MultiTargetOutcome out;
    for (std::size_t offset = 1; offset < k; ++offset) {
        Objective obj{LossKind::cw(), {labels.begin(), labels.end()}, std::vector<std::size_t>(n)};
        for (std::size_t i = 0; i < n; ++i) obj.row_targets[i] = (labels[i] + offset) % k;
        auto run = run_with_restarts_batch(f, images, obj, budget, rule, init, seeds);
        ++out.targeted_runs;
        if (offset == 1) {
            out.x_adv = std::move(run.x_adv);
            out.success = std::move(run.success);
            out.best_loss = std::move(run.best_loss);
            continue;
        }
        for (std::size_t i = 0; i < n; ++i) {
            const bool better = (run.success[i] && !out.success[i]) ||
                                (run.success[i] == out.success[i] && run.best_loss[i] > out.best_loss[i]);
            if (better) {
                out.x_adv.set_row(i, run.x_adv.row_span(i));
                out.success[i] = run.success[i];
                out.best_loss[i] = run.best_loss[i];
            }
        }
    }
    return out;
}

inline MultiTargetOutcome multi_targeted(const Classifier& f, const LabeledExample& example,
                                         const AttackBudget& budget, const UpdateRule& rule, const InitStrategy& init,
                                         std::uint64_t seed = 0) {
    example.validate(f.num_classes());
    const std::size_t labels[1] = {example.label};
    const std::uint64_t seeds[1] = {seed};
    return multi_targeted_batch(f, example.image, labels, budget, rule, init, seeds);
}

}  // namespace mama::attacks
