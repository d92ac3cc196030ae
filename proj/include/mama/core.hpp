#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mama/autodiff.hpp"
#include "mama/tensor.hpp"

namespace mama {

/// Invalid configuration or violated precondition (CLI exit code 1).
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Failure while running an attack or a trainer (CLI exit code 2).
class RuntimeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A gradient or objective went non-finite.
class NonFiniteError : public RuntimeError {
public:
    NonFiniteError(const std::string& what, std::size_t step, std::size_t example)
        : RuntimeError(what + " (step " + std::to_string(step) + ", example " + std::to_string(example) + ")"),
          step_(step),
          example_(example) {}
    [[nodiscard]] std::size_t step() const noexcept { return step_; }
    [[nodiscard]] std::size_t example() const noexcept { return example_; }

private:
    std::size_t step_;
    std::size_t example_;
};

enum class Norm { Linf, L2 };

inline std::string to_string(Norm n) { return n == Norm::Linf ? "linf" : "l2"; }

inline Norm parse_norm(const std::string& s) {
    if (s == "linf" || s == "Linf" || s == "inf") return Norm::Linf;
    if (s == "l2" || s == "L2") return Norm::L2;
    throw ConfigError("unknown norm '" + s + "'");
}

struct AttackBudget {
    Norm norm = Norm::Linf;
    double epsilon = 0.0;
    double step_size = 1.0;
    std::size_t iterations = 1;
    std::size_t restarts = 1;

    void validate() const {
        if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("budget: epsilon must be >= 0");
        if (!(step_size > 0.0) || !std::isfinite(step_size)) throw ConfigError("budget: step_size must be > 0");
        if (iterations < 1) throw ConfigError("budget: iterations must be >= 1");
        if (restarts < 1) throw ConfigError("budget: restarts must be >= 1");
        if (norm == Norm::Linf && epsilon > 1.0) throw ConfigError("budget: Linf epsilon must be <= 1");
    }
};

struct ImageShape {
    std::size_t channels = 1;
    std::size_t height = 1;
    std::size_t width = 1;

    [[nodiscard]] std::size_t size() const noexcept { return channels * height * width; }
    bool operator==(const ImageShape&) const = default;
};

/// One image (flattened C*H*W, values in [0,1]) and its class.
struct LabeledExample {
    Tensor image;  // 1 x D
    std::size_t label = 0;

    void validate(std::size_t num_classes) const {
        if (image.rows() != 1) throw ConfigError("example: image must be a single row");
        for (double v : image.data()) {
            if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("example: pixel outside [0,1]");
        }
        if (label >= num_classes) throw ConfigError("example: label out of range");
    }
};

struct ClassifierInfo {
    std::string name;
    std::string architecture;
    std::string recipe;
    std::size_t num_classes = 0;
    ImageShape input;
};

/// Differentiable map from a batch of flattened images (N x D) to logits
/// (N x K). Implementations must be deterministic and must not mutate state
/// in logits().
class Classifier {
public:
    virtual ~Classifier() = default;
    [[nodiscard]] virtual ad::Var logits(const ad::Var& images) const = 0;
    [[nodiscard]] virtual const ClassifierInfo& info() const = 0;

    [[nodiscard]] std::size_t num_classes() const { return info().num_classes; }
    [[nodiscard]] std::size_t input_dim() const { return info().input.size(); }

    [[nodiscard]] Tensor logits(const Tensor& images) const {
        ad::NoGradGuard guard;
        return logits(ad::constant(images)).value();
    }
};

// ---------------------------------------------------------------------------
// Losses

struct LossKind {
    enum class Kind { CE, CW, DLR, TargetedMargin };
    Kind kind = Kind::CW;
    std::size_t target = 0;

    static LossKind ce() { return {Kind::CE, 0}; }
    static LossKind cw() { return {Kind::CW, 0}; }
    static LossKind dlr() { return {Kind::DLR, 0}; }
    static LossKind targeted(std::size_t c) { return {Kind::TargetedMargin, c}; }

    bool operator==(const LossKind&) const = default;
};

inline std::string to_string(const LossKind& k) {
    switch (k.kind) {
        case LossKind::Kind::CE: return "ce";
        case LossKind::Kind::CW: return "cw";
        case LossKind::Kind::DLR: return "dlr";
        case LossKind::Kind::TargetedMargin: return "targeted:" + std::to_string(k.target);
    }
    return "?";
}

inline LossKind parse_loss(const std::string& s) {
    if (s == "ce") return LossKind::ce();
    if (s == "cw") return LossKind::cw();
    if (s == "dlr") return LossKind::dlr();
    if (s.rfind("targeted:", 0) == 0) return LossKind::targeted(std::stoul(s.substr(9)));
    throw ConfigError("unknown loss '" + s + "'");
}

/// Smallest index among the maximal entries.
inline std::size_t argmax(std::span<const double> z) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < z.size(); ++i) {
        if (z[i] > z[best]) best = i;
    }
    return best;
}

/// Largest entry other than `skip`, ties to the smaller index.
inline std::size_t argmax_except(std::span<const double> z, std::size_t skip) {
    std::size_t best = skip == 0 ? 1 : 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (i != skip && z[i] > z[best]) best = i;
    }
    return best;
}

inline bool misclassified(std::span<const double> logits, std::size_t label) { return argmax(logits) != label; }

namespace detail {

inline constexpr double kDlrTieOffset = 1e-12;

inline void check_loss_args(const LossKind& kind, std::size_t k, std::size_t label) {
    if (k < 2) throw ConfigError("loss: need at least 2 classes");
    if (label >= k) throw ConfigError("loss: label out of range");
    if (kind.kind == LossKind::Kind::DLR && k < 3) throw ConfigError("loss: DLR requires K >= 3");
    if (kind.kind == LossKind::Kind::TargetedMargin && kind.target >= k) {
        throw ConfigError("loss: target class out of range");
    }
}

/// Positions of the first and third largest logits (stable descending sort).
inline std::pair<std::size_t, std::size_t> first_and_third(std::span<const double> z) {
    std::vector<std::size_t> order(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return z[a] > z[b]; });
    return {order[0], order[2]};
}

}  // namespace detail

/// Scalar reference implementation of the attack losses. Higher is more
/// adversarial.
inline double loss(const LossKind& kind, std::span<const double> z, std::size_t label) {
    for (double v : z) {
        if (!std::isfinite(v)) throw ConfigError("loss: non-finite logits");
    }
    detail::check_loss_args(kind, z.size(), label);
    switch (kind.kind) {
        case LossKind::Kind::CE: {
            double m = z[0];
            for (double v : z) m = std::max(m, v);
            double s = 0.0;
            for (double v : z) s += std::exp(v - m);
            return m + std::log(s) - z[label];
        }
        case LossKind::Kind::CW: return z[argmax_except(z, label)] - z[label];
        case LossKind::Kind::DLR: {
            const auto [p1, p3] = detail::first_and_third(z);
            double denom = z[p1] - z[p3];
            if (denom == 0.0) denom = detail::kDlrTieOffset;
            return -(z[label] - z[argmax_except(z, label)]) / denom;
        }
        case LossKind::Kind::TargetedMargin: return z[kind.target] - z[argmax_except(z, kind.target)];
    }
    return 0.0;
}

/// Per-example losses for a batch of logits (N x K) -> (N x 1), differentiable.
inline ad::Var batch_loss(const LossKind& kind, const ad::Var& logits, std::span<const std::size_t> labels) {
    const auto& z = logits.value();
    const std::size_t n = z.rows();
    const std::size_t k = z.cols();
    if (labels.size() != n) throw ConfigError("batch_loss: one label per row required");
    for (std::size_t r = 0; r < n; ++r) detail::check_loss_args(kind, k, labels[r]);
    if (!z.all_finite()) throw NonFiniteError("batch_loss: non-finite logits", 0, 0);

    std::vector<std::size_t> label_idx(labels.begin(), labels.end());
    switch (kind.kind) {
        case LossKind::Kind::CE:
            return ad::sub(ad::logsumexp_rows(logits), ad::pick(logits, label_idx));
        case LossKind::Kind::CW: {
            std::vector<std::size_t> other(n);
            for (std::size_t r = 0; r < n; ++r) other[r] = argmax_except(z.row_span(r), labels[r]);
            return ad::sub(ad::pick(logits, other), ad::pick(logits, label_idx));
        }
        case LossKind::Kind::DLR: {
            std::vector<std::size_t> other(n);
            std::vector<std::size_t> first(n);
            std::vector<std::size_t> third(n);
            Tensor tie(n, 1);
            for (std::size_t r = 0; r < n; ++r) {
                other[r] = argmax_except(z.row_span(r), labels[r]);
                std::tie(first[r], third[r]) = detail::first_and_third(z.row_span(r));
                if (z(r, first[r]) == z(r, third[r])) tie[r] = detail::kDlrTieOffset;
            }
            auto margin = ad::sub(ad::pick(logits, label_idx), ad::pick(logits, other));
            auto denom = ad::add(ad::sub(ad::pick(logits, first), ad::pick(logits, third)), ad::constant(tie));
            return ad::neg(ad::div(margin, denom));
        }
        case LossKind::Kind::TargetedMargin: {
            std::vector<std::size_t> target(n, kind.target);
            std::vector<std::size_t> other(n);
            for (std::size_t r = 0; r < n; ++r) other[r] = argmax_except(z.row_span(r), kind.target);
            return ad::sub(ad::pick(logits, target), ad::pick(logits, other));
        }
    }
    throw ConfigError("batch_loss: unknown loss kind");
}

/// Per-example targeted margins where each row has its own target class.
inline ad::Var targeted_margin(const ad::Var& logits, std::span<const std::size_t> targets) {
    const auto& z = logits.value();
    if (targets.size() != z.rows()) throw ConfigError("targeted_margin: one target per row required");
    std::vector<std::size_t> target(targets.begin(), targets.end());
    std::vector<std::size_t> other(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) {
        if (target[r] >= z.cols()) throw ConfigError("targeted_margin: target out of range");
        other[r] = argmax_except(z.row_span(r), target[r]);
    }
    return ad::sub(ad::pick(logits, target), ad::pick(logits, other));
}

// ---------------------------------------------------------------------------
// Projection onto the budget ball intersected with the [0,1] box

namespace detail {

/// The L2 rescale only fires when the norm exceeds epsilon by more than this
/// relative slack, which makes projection exactly idempotent.
inline constexpr double kL2Slack = 1e-12;

inline void check_projection_args(const Tensor& x, const Tensor& origin) {
    if (!x.same_shape(origin)) {
        throw ConfigError("project: shape mismatch " + x.shape_string() + " vs " + origin.shape_string());
    }
}

/// Elementwise [lo, hi] for the Linf ball intersected with the box.
inline std::pair<Tensor, Tensor> linf_bounds(const Tensor& origin, double eps) {
    Tensor lo(origin.rows(), origin.cols());
    Tensor hi(origin.rows(), origin.cols());
    for (std::size_t i = 0; i < origin.size(); ++i) {
        lo[i] = std::max(origin[i] - eps, 0.0);
        hi[i] = std::min(origin[i] + eps, 1.0);
    }
    return {std::move(lo), std::move(hi)};
}

/// Per-row L2 rescale factor (1 where the row is already inside the ball).
inline std::vector<double> l2_factors(const Tensor& x, const Tensor& origin, double eps) {
    std::vector<double> factor(x.rows(), 1.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const double d = x(r, c) - origin(r, c);
            s += d * d;
        }
        const double n = std::sqrt(s);
        if (n > eps * (1.0 + kL2Slack)) factor[r] = n > 0.0 ? eps / n : 0.0;
    }
    return factor;
}

}  // namespace detail

/// Projects each row of x onto the budget ball around the matching row of
/// origin, then clamps to [0,1]. Idempotent.
inline Tensor project(const Tensor& x, const Tensor& origin, const AttackBudget& budget) {
    detail::check_projection_args(x, origin);
    Tensor out(x.rows(), x.cols());
    if (budget.norm == Norm::Linf) {
        const double eps = budget.epsilon;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double lo = std::max(origin[i] - eps, 0.0);
            const double hi = std::min(origin[i] + eps, 1.0);
            out[i] = std::clamp(x[i], lo, hi);
        }
        return out;
    }
    const auto factor = detail::l2_factors(x, origin, budget.epsilon);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const double v = factor[r] == 1.0 ? x(r, c) : origin(r, c) + (x(r, c) - origin(r, c)) * factor[r];
            out(r, c) = std::clamp(v, 0.0, 1.0);
        }
    }
    return out;
}

enum class ProjectionGradient { StraightThrough, Exact };

/// Differentiable projection. The forward value always equals project();
/// the backward pass is either the identity or the true derivative.
inline ad::Var project(const ad::Var& x, const Tensor& origin, const AttackBudget& budget, ProjectionGradient mode) {
    detail::check_projection_args(x.value(), origin);
    const bool st = mode == ProjectionGradient::StraightThrough;
    if (budget.norm == Norm::Linf) {
        auto [lo, hi] = detail::linf_bounds(origin, budget.epsilon);
        return ad::clamp(x, lo, hi, st);
    }
    const Tensor zeros(x.rows(), x.cols(), 0.0);
    const Tensor ones(x.rows(), x.cols(), 1.0);
    if (st) {
        // Forward through the exact projection, backward as identity.
        const Tensor projected = project(x.value(), origin, budget);
        auto shift = ad::constant(tensor_ops::zip(projected, x.value(), [](double p, double v) { return p - v; }));
        return ad::add(x, shift);
    }
    const auto factor = detail::l2_factors(x.value(), origin, budget.epsilon);
    auto delta = ad::sub(x, ad::constant(origin));
    Tensor active(x.rows(), 1);
    Tensor inactive(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        (factor[r] == 1.0 ? inactive : active)[r] = 1.0;
    }
    // factor = eps / ||delta|| on rescaled rows, 1 elsewhere.
    auto norms = ad::sqrt(ad::add(ad::sum_cols(ad::square(delta)), ad::constant(inactive)));
    auto scale_col = ad::add(ad::mul_const(ad::reciprocal(norms), tensor_ops::map(active, [&](double a) {
                                               return a * budget.epsilon;
                                           })),
                             ad::constant(inactive));
    auto rescaled = ad::add(ad::constant(origin), ad::mul(delta, ad::broadcast_cols(scale_col, x.cols())));
    return ad::clamp(rescaled, zeros, ones, false);
}

/// Largest per-row constraint violation of x relative to origin: the ball
/// excess (norm minus epsilon, clipped at 0) and the box excess.
struct ConstraintViolation {
    double ball = 0.0;
    double box = 0.0;
};

inline ConstraintViolation constraint_violation(const Tensor& x, const Tensor& origin, const AttackBudget& budget) {
    ConstraintViolation v;
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double norm = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const double d = x(r, c) - origin(r, c);
            norm = budget.norm == Norm::Linf ? std::max(norm, std::abs(d)) : norm + d * d;
            v.box = std::max({v.box, -x(r, c), x(r, c) - 1.0});
        }
        if (budget.norm == Norm::L2) norm = std::sqrt(norm);
        v.ball = std::max(v.ball, norm - budget.epsilon);
    }
    return v;
}

// ---------------------------------------------------------------------------
// Input gradients

struct LossAndGradient {
    ad::Var losses;    // N x 1
    ad::Var gradient;  // N x D
    ad::Var logits;    // N x K
};

/// Loss and its gradient with respect to the input batch. With create_graph
/// the gradient stays differentiable with respect to whatever x depends on.
inline LossAndGradient loss_and_gradient(const Classifier& f, const LossKind& kind, const ad::Var& x,
                                         std::span<const std::size_t> labels, bool create_graph = false,
                                         std::size_t step = 0) {
    if (!ad::grad_enabled()) {
        ad::EnableGradGuard on;
        auto r = loss_and_gradient(f, kind, ad::detach(x), labels, false, step);
        return {ad::detach(r.losses), ad::detach(r.gradient), ad::detach(r.logits)};
    }
    ad::Var input = x;
    if (!x.requires_grad()) input = ad::parameter(x.value());
    auto logits = f.logits(input);
    auto losses = batch_loss(kind, logits, labels);
    auto grads = ad::grad(ad::sum(losses), {input}, create_graph);
    const auto& g = grads[0].value();
    for (std::size_t r = 0; r < g.rows(); ++r) {
        for (double v : g.row_span(r)) {
            if (!std::isfinite(v)) throw NonFiniteError("input gradient is not finite", step, r);
        }
    }
    return {losses, grads[0], logits};
}

/// Gradient of loss(kind, f(x), label) with respect to x, one row per example.
inline Tensor input_gradient(const Classifier& f, const LossKind& kind, const Tensor& x,
                             std::span<const std::size_t> labels, std::size_t step = 0) {
    return loss_and_gradient(f, kind, ad::constant(x), labels, false, step).gradient.value();
}

inline Tensor input_gradient(const Classifier& f, const LossKind& kind, const Tensor& x, std::size_t label) {
    const std::size_t labels[1] = {label};
    return input_gradient(f, kind, x, labels);
}

}  // namespace mama
