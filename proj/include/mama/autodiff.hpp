#pragma once

// Reverse-mode automatic differentiation over 2-D tensors.
//
// Every backward rule is written in terms of the same differentiable ops, so
// calling grad(..., create_graph = true) yields gradients that can themselves
// be differentiated. The meta-test term of the meta-attack update and the
// unrolled attack trajectory both rely on this.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mama/tensor.hpp"

namespace mama::ad {

class Var;

/// Receives the upstream gradient and the node's own output; returns one
/// gradient per input (an empty Var where the input does not need one).
using BackwardFn = std::function<std::vector<Var>(const Var& grad, const Var& self)>;

struct Node {
    Tensor value;
    bool requires_grad = false;
    std::vector<Var> inputs;
    BackwardFn backward;
    const char* op = "leaf";
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false)
        : node_(std::make_shared<Node>(Node{std::move(value), requires_grad, {}, {}, "leaf"})) {}
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
    [[nodiscard]] const Tensor& value() const { return node_->value; }
    [[nodiscard]] bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    [[nodiscard]] std::size_t rows() const { return node_->value.rows(); }
    [[nodiscard]] std::size_t cols() const { return node_->value.cols(); }
    [[nodiscard]] std::size_t size() const { return node_->value.size(); }
    [[nodiscard]] double item() const { return node_->value.item(); }
    [[nodiscard]] Node* node() const noexcept { return node_.get(); }
    [[nodiscard]] const std::shared_ptr<Node>& shared() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {
inline thread_local bool grad_mode = true;
}

[[nodiscard]] inline bool grad_enabled() noexcept { return detail::grad_mode; }

/// Disables graph recording in scope.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Re-enables graph recording in scope, e.g. for an input gradient needed
/// inside a no-grad evaluation.
class EnableGradGuard {
public:
    EnableGradGuard() : previous_(detail::grad_mode) { detail::grad_mode = true; }
    ~EnableGradGuard() { detail::grad_mode = previous_; }
    EnableGradGuard(const EnableGradGuard&) = delete;
    EnableGradGuard& operator=(const EnableGradGuard&) = delete;

private:
    bool previous_;
};

inline Var constant(Tensor value) { return Var(std::move(value), false); }
inline Var parameter(Tensor value) { return Var(std::move(value), true); }
inline Var detach(const Var& v) { return constant(v.value()); }

namespace detail {

inline Var make_result(Tensor value, std::vector<Var> inputs, BackwardFn fn, const char* op) {
    bool needs = false;
    if (grad_mode) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    if (needs) {
        node->requires_grad = true;
        node->inputs = std::move(inputs);
        node->backward = std::move(fn);
    }
    return Var(std::move(node));
}

inline void check_same(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.value().shape_string() + " vs " +
                                    b.value().shape_string());
    }
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var sum(const Var& a);
Var broadcast(const Var& a, std::size_t rows, std::size_t cols);
Var sum_rows(const Var& a);
Var broadcast_rows(const Var& a, std::size_t rows);
Var sum_cols(const Var& a);
Var broadcast_cols(const Var& a, std::size_t cols);
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var cols(const Var& a, std::size_t start, std::size_t len);
Var pad_cols(const Var& a, std::size_t start, std::size_t total);
Var gather(const Var& a, std::shared_ptr<const std::vector<std::int64_t>> index, std::size_t rows,
           std::size_t cols);
Var scatter_add(const Var& a, std::shared_ptr<const std::vector<std::int64_t>> index, std::size_t rows,
                std::size_t cols);

inline Var add(const Var& a, const Var& b) {
    detail::check_same(a, b, "add");
    Tensor out = Tensor::uninitialized(a.rows(), a.cols());
    const auto& x = a.value();
    const auto& y = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return detail::make_result(
        std::move(out), {a, b}, [](const Var& g, const Var&) { return std::vector<Var>{g, g}; }, "add");
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_same(a, b, "sub");
    Tensor out = Tensor::uninitialized(a.rows(), a.cols());
    const auto& x = a.value();
    const auto& y = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return detail::make_result(
        std::move(out), {a, b}, [](const Var& g, const Var&) { return std::vector<Var>{g, neg(g)}; }, "sub");
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_same(a, b, "mul");
    Tensor out = Tensor::uninitialized(a.rows(), a.cols());
    const auto& x = a.value();
    const auto& y = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return detail::make_result(
        std::move(out), {a, b},
        [a, b](const Var& g, const Var&) {
            return std::vector<Var>{a.requires_grad() ? mul(g, b) : Var{}, b.requires_grad() ? mul(g, a) : Var{}};
        },
        "mul");
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var scale(const Var& a, double s) {
    Tensor out = Tensor::uninitialized(a.rows(), a.cols());
    const auto& x = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
    return detail::make_result(
        std::move(out), {a}, [s](const Var& g, const Var&) { return std::vector<Var>{scale(g, s)}; }, "scale");
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = Tensor::uninitialized(a.rows(), a.cols());
    const auto& x = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
    return detail::make_result(
        std::move(out), {a}, [](const Var& g, const Var&) { return std::vector<Var>{g}; }, "add_scalar");
}

/// Elementwise product with a constant mask; the mask carries no gradient.
inline Var mul_const(const Var& a, const Tensor& mask) { return mul(a, constant(mask)); }

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const auto r = a.rows();
    const auto c = a.cols();
    return detail::make_result(
        Tensor::scalar(s), {a}, [r, c](const Var& g, const Var&) { return std::vector<Var>{broadcast(g, r, c)}; },
        "sum");
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

inline Var broadcast(const Var& a, std::size_t rows, std::size_t cols) {
    if (a.size() != 1) throw std::invalid_argument("broadcast: expected scalar, got " + a.value().shape_string());
    return detail::make_result(
        Tensor(rows, cols, a.value()[0]), {a}, [](const Var& g, const Var&) { return std::vector<Var>{sum(g)}; },
        "broadcast");
}

/// Column sums: (n x m) -> (1 x m).
inline Var sum_rows(const Var& a) {
    const auto& x = a.value();
    Tensor out(1, x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) out[c] += x(r, c);
    }
    const auto n = x.rows();
    return detail::make_result(
        std::move(out), {a}, [n](const Var& g, const Var&) { return std::vector<Var>{broadcast_rows(g, n)}; },
        "sum_rows");
}

/// Repeats a (1 x m) row n times.
inline Var broadcast_rows(const Var& a, std::size_t rows) {
    if (a.rows() != 1) throw std::invalid_argument("broadcast_rows: expected a row, got " + a.value().shape_string());
    Tensor out = Tensor::uninitialized(rows, a.cols());
    for (std::size_t r = 0; r < rows; ++r) out.set_row(r, a.value().row_span(0));
    return detail::make_result(
        std::move(out), {a}, [](const Var& g, const Var&) { return std::vector<Var>{sum_rows(g)}; },
        "broadcast_rows");
}

/// Row sums: (n x m) -> (n x 1).
inline Var sum_cols(const Var& a) {
    const auto& x = a.value();
    Tensor out(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        double s = 0.0;
        for (double v : x.row_span(r)) s += v;
        out[r] = s;
    }
    const auto m = x.cols();
    return detail::make_result(
        std::move(out), {a}, [m](const Var& g, const Var&) { return std::vector<Var>{broadcast_cols(g, m)}; },
        "sum_cols");
}

/// Repeats an (n x 1) column m times.
inline Var broadcast_cols(const Var& a, std::size_t cols) {
    if (a.cols() != 1) {
        throw std::invalid_argument("broadcast_cols: expected a column, got " + a.value().shape_string());
    }
    Tensor out = Tensor::uninitialized(a.rows(), cols);
    for (std::size_t r = 0; r < a.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) out(r, c) = a.value()[r];
    }
    return detail::make_result(
        std::move(out), {a}, [](const Var& g, const Var&) { return std::vector<Var>{sum_cols(g)}; },
        "broadcast_cols");
}

/// a (n x m) + b (1 x m), the bias add of a dense layer.
inline Var add_row(const Var& a, const Var& b) {
    if (b.rows() != 1 || b.cols() != a.cols()) {
        throw std::invalid_argument("add_row: expected (1 x " + std::to_string(a.cols()) + "), got " +
                                    b.value().shape_string());
    }
    const auto& x = a.value();
    const auto& y = b.value();
    Tensor out = Tensor::uninitialized(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* src = x.data().data() + r * x.cols();
        double* dst = out.data().data() + r * x.cols();
        for (std::size_t c = 0; c < x.cols(); ++c) dst[c] = src[c] + y[c];
    }
    return detail::make_result(
        std::move(out), {a, b},
        [b](const Var& g, const Var&) { return std::vector<Var>{g, b.requires_grad() ? sum_rows(g) : Var{}}; },
        "add_row");
}

inline Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    const auto& x = a.value();
    const auto& y = b.value();
    const std::size_t m = trans_a ? x.cols() : x.rows();
    const std::size_t k = trans_a ? x.rows() : x.cols();
    const std::size_t k2 = trans_b ? y.cols() : y.rows();
    const std::size_t n = trans_b ? y.rows() : y.cols();
    if (k != k2) {
        throw std::invalid_argument("matmul: inner dimension mismatch " + x.shape_string() + (trans_a ? "^T" : "") +
                                    " * " + y.shape_string() + (trans_b ? "^T" : ""));
    }
    Tensor out = Tensor::uninitialized(m, n);
    detail::ConstMap xa(x.data().data(), static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.cols()));
    detail::ConstMap yb(y.data().data(), static_cast<Eigen::Index>(y.rows()), static_cast<Eigen::Index>(y.cols()));
    detail::MutMap o(out.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (!trans_a && !trans_b) {
        o.noalias() = xa * yb;
    } else if (trans_a && !trans_b) {
        o.noalias() = xa.transpose() * yb;
    } else if (!trans_a && trans_b) {
        o.noalias() = xa * yb.transpose();
    } else {
        o.noalias() = xa.transpose() * yb.transpose();
    }
    return detail::make_result(
        std::move(out), {a, b},
        [a, b, trans_a, trans_b](const Var& g, const Var&) {
            Var ga;
            Var gb;
            if (a.requires_grad()) {
                // C = op(A) op(B); dop(A) = G op(B)^T
                ga = trans_a ? matmul(b, g, trans_b, true) : matmul(g, b, false, !trans_b);
            }
            if (b.requires_grad()) {
                gb = trans_b ? matmul(g, a, true, trans_a) : matmul(a, g, !trans_a, false);
            }
            return std::vector<Var>{ga, gb};
        },
        "matmul");
}

inline Var tanh(const Var& a) {
    auto out = tensor_ops::map(a.value(), [](double v) { return std::tanh(v); });
    return detail::make_result(
        std::move(out), {a},
        [](const Var& g, const Var& self) {
            // 1 - y^2
            auto one_minus = add_scalar(neg(mul(self, self)), 1.0);
            return std::vector<Var>{mul(g, one_minus)};
        },
        "tanh");
}

inline Var sigmoid(const Var& a) {
    auto out = tensor_ops::map(a.value(), [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
    return detail::make_result(
        std::move(out), {a},
        [](const Var& g, const Var& self) {
            auto dy = mul(self, add_scalar(neg(self), 1.0));
            return std::vector<Var>{mul(g, dy)};
        },
        "sigmoid");
}

inline Var relu(const Var& a) {
    auto mask = tensor_ops::map(a.value(), [](double v) { return v > 0.0 ? 1.0 : 0.0; });
    auto out = tensor_ops::zip(a.value(), mask, [](double v, double m) { return v * m; });
    return detail::make_result(
        std::move(out), {a}, [mask](const Var& g, const Var&) { return std::vector<Var>{mul_const(g, mask)}; },
        "relu");
}

inline Var exp(const Var& a) {
    auto out = tensor_ops::map(a.value(), [](double v) { return std::exp(v); });
    return detail::make_result(
        std::move(out), {a}, [](const Var& g, const Var& self) { return std::vector<Var>{mul(g, self)}; }, "exp");
}

Var reciprocal(const Var& a);

inline Var log(const Var& a) {
    auto out = tensor_ops::map(a.value(), [](double v) { return std::log(v); });
    return detail::make_result(
        std::move(out), {a}, [a](const Var& g, const Var&) { return std::vector<Var>{mul(g, reciprocal(a))}; },
        "log");
}

inline Var reciprocal(const Var& a) {
    auto out = tensor_ops::map(a.value(), [](double v) { return 1.0 / v; });
    return detail::make_result(
        std::move(out), {a},
        [](const Var& g, const Var& self) { return std::vector<Var>{neg(mul(g, mul(self, self)))}; }, "reciprocal");
}

inline Var div(const Var& a, const Var& b) { return mul(a, reciprocal(b)); }

inline Var square(const Var& a) {
    auto out = tensor_ops::map(a.value(), [](double v) { return v * v; });
    return detail::make_result(
        std::move(out), {a}, [a](const Var& g, const Var&) { return std::vector<Var>{scale(mul(g, a), 2.0)}; },
        "square");
}

inline Var sqrt(const Var& a) {
    auto out = tensor_ops::map(a.value(), [](double v) { return std::sqrt(v); });
    return detail::make_result(
        std::move(out), {a},
        [](const Var& g, const Var& self) { return std::vector<Var>{scale(mul(g, reciprocal(self)), 0.5)}; },
        "sqrt");
}

/// sign(0) = 0. Piecewise constant, so the result is a constant.
inline Var sign(const Var& a) { return constant(tensor_ops::sign(a.value())); }

inline Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
    const auto r0 = a.rows();
    const auto c0 = a.cols();
    return detail::make_result(
        a.value().reshaped(rows, cols), {a},
        [r0, c0](const Var& g, const Var&) { return std::vector<Var>{reshape(g, r0, c0)}; }, "reshape");
}

/// Columns [start, start+len).
inline Var cols(const Var& a, std::size_t start, std::size_t len) {
    const auto& x = a.value();
    if (start + len > x.cols()) throw std::out_of_range("cols: slice exceeds width " + x.shape_string());
    Tensor out = Tensor::uninitialized(x.rows(), len);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* src = x.data().data() + r * x.cols() + start;
        std::copy(src, src + len, out.data().data() + r * len);
    }
    const auto total = x.cols();
    return detail::make_result(
        std::move(out), {a},
        [start, total](const Var& g, const Var&) { return std::vector<Var>{pad_cols(g, start, total)}; }, "cols");
}

/// Places a into columns [start, start+a.cols) of a zero (rows x total) tensor.
inline Var pad_cols(const Var& a, std::size_t start, std::size_t total) {
    const auto& x = a.value();
    if (start + x.cols() > total) throw std::out_of_range("pad_cols: exceeds total width");
    Tensor out(x.rows(), total);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double* src = x.data().data() + r * x.cols();
        std::copy(src, src + x.cols(), out.data().data() + r * total + start);
    }
    const auto len = x.cols();
    return detail::make_result(
        std::move(out), {a}, [start, len](const Var& g, const Var&) { return std::vector<Var>{cols(g, start, len)}; },
        "pad_cols");
}

inline Var hconcat(const Var& a, const Var& b) {
    const auto total = a.cols() + b.cols();
    return add(pad_cols(a, 0, total), pad_cols(b, a.cols(), total));
}

/// out.flat[i] = a.flat[index[i]], or 0 where index[i] < 0.
inline Var gather(const Var& a, std::shared_ptr<const std::vector<std::int64_t>> index, std::size_t rows,
                  std::size_t cols) {
    if (index->size() != rows * cols) throw std::invalid_argument("gather: index size does not match output shape");
    const auto& x = a.value();
    Tensor out(rows, cols);
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) out[i] = x[static_cast<std::size_t>(idx[i])];
    }
    const auto r0 = x.rows();
    const auto c0 = x.cols();
    return detail::make_result(
        std::move(out), {a},
        [index, r0, c0](const Var& g, const Var&) { return std::vector<Var>{scatter_add(g, index, r0, c0)}; },
        "gather");
}

/// Adjoint of gather: out.flat[index[i]] += a.flat[i].
inline Var scatter_add(const Var& a, std::shared_ptr<const std::vector<std::int64_t>> index, std::size_t rows,
                       std::size_t cols) {
    const auto& x = a.value();
    if (index->size() != x.size()) throw std::invalid_argument("scatter_add: index size does not match input");
    Tensor out(rows, cols);
    const auto& idx = *index;
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) out[static_cast<std::size_t>(idx[i])] += x[i];
    }
    const auto r0 = x.rows();
    const auto c0 = x.cols();
    return detail::make_result(
        std::move(out), {a},
        [index, r0, c0](const Var& g, const Var&) { return std::vector<Var>{gather(g, index, r0, c0)}; },
        "scatter_add");
}

/// Picks a(r, idx[r]) for every row: (n x m) -> (n x 1).
inline Var pick(const Var& a, const std::vector<std::size_t>& idx) {
    if (idx.size() != a.rows()) throw std::invalid_argument("pick: one index per row required");
    auto flat = std::make_shared<std::vector<std::int64_t>>(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= a.cols()) throw std::out_of_range("pick: column index out of range");
        (*flat)[r] = static_cast<std::int64_t>(r * a.cols() + idx[r]);
    }
    return gather(a, std::move(flat), idx.size(), 1);
}

/// Row-wise log-sum-exp: (n x m) -> (n x 1).
inline Var logsumexp_rows(const Var& a) {
    const auto& x = a.value();
    Tensor out(x.rows(), 1);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto row = x.row_span(r);
        double m = row[0];
        for (double v : row) m = std::max(m, v);
        double s = 0.0;
        for (double v : row) s += std::exp(v - m);
        out[r] = m + std::log(s);
    }
    return detail::make_result(
        std::move(out), {a},
        [a](const Var& g, const Var& self) {
            auto softmax = exp(sub(a, broadcast_cols(self, a.cols())));
            return std::vector<Var>{mul(broadcast_cols(g, a.cols()), softmax)};
        },
        "logsumexp_rows");
}

/// Elementwise clamp to [lo, hi]. The backward pass is either the identity
/// (straight-through) or the true piecewise derivative.
inline Var clamp(const Var& a, const Tensor& lo, const Tensor& hi, bool straight_through) {
    const auto& x = a.value();
    if (!x.same_shape(lo) || !x.same_shape(hi)) throw std::invalid_argument("clamp: bound shape mismatch");
    Tensor out = Tensor::uninitialized(x.rows(), x.cols());
    Tensor inside(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = x[i];
        if (v < lo[i]) {
            out[i] = lo[i];
        } else if (v > hi[i]) {
            out[i] = hi[i];
        } else {
            out[i] = v;
            inside[i] = 1.0;
        }
    }
    if (straight_through) {
        return detail::make_result(
            std::move(out), {a}, [](const Var& g, const Var&) { return std::vector<Var>{g}; }, "clamp_st");
    }
    return detail::make_result(
        std::move(out), {a}, [inside](const Var& g, const Var&) { return std::vector<Var>{mul_const(g, inside)}; },
        "clamp");
}

/// Gradients of a scalar output with respect to `wrt`. Inputs the output
/// does not depend on get zero gradients. With create_graph the returned
/// gradients are themselves differentiable.
inline std::vector<Var> grad(const Var& output, const std::vector<Var>& wrt, bool create_graph = false) {
    if (output.size() != 1) throw std::invalid_argument("grad: output must be scalar");
    std::vector<Var> result(wrt.size());
    if (!output.requires_grad()) {
        for (std::size_t i = 0; i < wrt.size(); ++i) result[i] = constant(Tensor(wrt[i].rows(), wrt[i].cols()));
        return result;
    }

    // Iterative post-order DFS over nodes that require grad. Only nodes from
    // which some wrt node is reachable take part in the backward sweep.
    std::unordered_map<Node*, bool> relevant;
    for (const auto& w : wrt) {
        if (w.defined()) relevant[w.node()] = true;
    }
    std::vector<Node*> order;
    std::unordered_map<Node*, bool> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{output.node(), 0}};
    visited[output.node()] = true;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].node();
            if (child && child->requires_grad && !visited.contains(child)) {
                visited[child] = true;
                stack.emplace_back(child, 0);
            }
        } else {
            bool rel = relevant.contains(node);
            for (const auto& in : node->inputs) {
                auto it = relevant.find(in.node());
                rel = rel || (it != relevant.end() && it->second);
            }
            if (rel) {
                relevant[node] = true;
                order.push_back(node);
            }
            stack.pop_back();
        }
    }

    std::unordered_map<Node*, Var> grads;
    std::unordered_map<Node*, std::shared_ptr<Node>> owners;
    {
        std::optional<NoGradGuard> guard;
        if (!create_graph) guard.emplace();
        grads[output.node()] = constant(Tensor::scalar(1.0));
        owners[output.node()] = output.shared();
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            auto g_it = grads.find(node);
            if (g_it == grads.end() || !node->backward) continue;
            const Var g = g_it->second;
            Var self(owners.at(node));
            auto input_grads = node->backward(g, self);
            for (std::size_t i = 0; i < node->inputs.size(); ++i) {
                const Var& in = node->inputs[i];
                if (!in.requires_grad() || !input_grads[i].defined() || !relevant.contains(in.node())) continue;
                owners.emplace(in.node(), in.shared());
                auto [pos, inserted] = grads.try_emplace(in.node(), input_grads[i]);
                if (!inserted) pos->second = add(pos->second, input_grads[i]);
            }
        }
    }

    for (std::size_t i = 0; i < wrt.size(); ++i) {
        auto it = grads.find(wrt[i].node());
        if (it != grads.end()) {
            result[i] = it->second;
        } else {
            result[i] = constant(Tensor(wrt[i].rows(), wrt[i].cols()));
        }
    }
    return result;
}

}  // namespace mama::ad
