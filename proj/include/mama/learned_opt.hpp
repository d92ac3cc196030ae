#pragma once

// Coordinate-wise two-layer LSTM attack optimizer. Every input coordinate is
// an independent row through the same cell, so the parameter count does not
// depend on the image size. Each coordinate sees its gradient value (and, by
// default, the sign of it) and emits an update direction in (-1, 1).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mama/autodiff.hpp"
#include "mama/core.hpp"
#include "mama/io.hpp"

namespace mama::learned {

enum class InputMode { RawAndSign, RawOnly };

inline std::string to_string(InputMode m) { return m == InputMode::RawAndSign ? "raw+sign" : "raw"; }

inline InputMode parse_input_mode(const std::string& s) {
    if (s == "raw+sign") return InputMode::RawAndSign;
    if (s == "raw") return InputMode::RawOnly;
    throw ConfigError("unknown optimizer input mode '" + s + "'");
}

inline constexpr std::size_t kHidden = 20;
inline constexpr std::size_t kLayers = 2;
inline constexpr std::size_t kGates = 4 * kHidden;

struct OptimizerParams {
    InputMode input_mode = InputMode::RawAndSign;
    /// l0.w_input, l0.w_hidden, l0.bias, l1.w_input, l1.w_hidden, l1.bias, head.weight, head.bias
    std::vector<ad::Var> tensors;

    [[nodiscard]] std::size_t input_channels() const { return input_mode == InputMode::RawAndSign ? 2 : 1; }

    static const std::vector<std::string>& names() {
        static const std::vector<std::string> n{"l0.w_input", "l0.w_hidden", "l0.bias",     "l1.w_input",
                                                "l1.w_hidden", "l1.bias",    "head.weight", "head.bias"};
        return n;
    }

    /// LSTM weights uniform in +-1/sqrt(hidden); the output head uniform in
    /// +-head_scale so a fresh optimizer takes near-zero steps.
    static OptimizerParams initialize(std::uint64_t seed, InputMode mode = InputMode::RawAndSign,
                                      double head_scale = 1e-2) {
        std::mt19937_64 rng(seed);
        const double bound = 1.0 / std::sqrt(static_cast<double>(kHidden));
        auto uniform = [&](std::size_t r, std::size_t c, double b) {
            std::uniform_real_distribution<double> d(-b, b);
            Tensor t(r, c);
            for (auto& v : t.data()) v = b > 0.0 ? d(rng) : 0.0;
            return t;
        };
        OptimizerParams p;
        p.input_mode = mode;
        const std::size_t in = p.input_channels();
        p.tensors = {ad::constant(uniform(in, kGates, bound)),      ad::constant(uniform(kHidden, kGates, bound)),
                     ad::constant(uniform(1, kGates, bound)),       ad::constant(uniform(kHidden, kGates, bound)),
                     ad::constant(uniform(kHidden, kGates, bound)), ad::constant(uniform(1, kGates, bound)),
                     ad::constant(uniform(kHidden, 1, head_scale)), ad::constant(Tensor(1, 1))};
        return p;
    }

    [[nodiscard]] OptimizerParams with_tensors(std::vector<ad::Var> t) const {
        if (t.size() != tensors.size()) throw ConfigError("optimizer params: tensor count mismatch");
        OptimizerParams p;
        p.input_mode = input_mode;
        p.tensors = std::move(t);
        return p;
    }

    [[nodiscard]] OptimizerParams trainable() const {
        std::vector<ad::Var> t;
        for (const auto& v : tensors) t.push_back(ad::parameter(v.value()));
        return with_tensors(std::move(t));
    }

    [[nodiscard]] OptimizerParams frozen() const {
        std::vector<ad::Var> t;
        for (const auto& v : tensors) t.push_back(ad::constant(v.value()));
        return with_tensors(std::move(t));
    }

    [[nodiscard]] std::vector<Tensor> values() const {
        std::vector<Tensor> out;
        for (const auto& v : tensors) out.push_back(v.value());
        return out;
    }

    [[nodiscard]] std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& v : tensors) n += v.size();
        return n;
    }

    [[nodiscard]] bool all_finite() const {
        for (const auto& v : tensors) {
            if (!v.value().all_finite()) return false;
        }
        return true;
    }

    [[nodiscard]] std::string architecture() const {
        return "coordinatewise-lstm:layers=" + std::to_string(kLayers) + ":hidden=" + std::to_string(kHidden) +
               ":input=" + to_string(input_mode) + ":head=tanh";
    }

    bool operator==(const OptimizerParams& o) const { return input_mode == o.input_mode && values() == o.values(); }
};

/// Per-coordinate hidden and cell vectors for both layers, one row per
/// coordinate (batch * D rows).
struct RecurrentState {
    std::vector<ad::Var> hidden;
    std::vector<ad::Var> cell;

    static RecurrentState zeros(std::size_t rows) {
        RecurrentState s;
        for (std::size_t l = 0; l < kLayers; ++l) {
            s.hidden.push_back(ad::constant(Tensor(rows, kHidden)));
            s.cell.push_back(ad::constant(Tensor(rows, kHidden)));
        }
        return s;
    }

    [[nodiscard]] std::size_t rows() const { return hidden.empty() ? 0 : hidden[0].rows(); }

    [[nodiscard]] RecurrentState detached() const {
        RecurrentState s;
        for (const auto& v : hidden) s.hidden.push_back(ad::detach(v));
        for (const auto& v : cell) s.cell.push_back(ad::detach(v));
        return s;
    }
};

struct StepOutput {
    ad::Var direction;  // N x D, each entry in (-1, 1)
    RecurrentState next;
};

namespace detail {

inline double sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

/// Reference cell built from primitive ops.
inline ad::Var lstm_cell_composite(const ad::Var& gates, const ad::Var& cell) {
    auto in_gate = ad::sigmoid(ad::cols(gates, 0, kHidden));
    auto forget_gate = ad::sigmoid(ad::cols(gates, kHidden, kHidden));
    auto candidate = ad::tanh(ad::cols(gates, 2 * kHidden, kHidden));
    auto out_gate = ad::sigmoid(ad::cols(gates, 3 * kHidden, kHidden));
    auto c = ad::add(ad::mul(forget_gate, cell), ad::mul(in_gate, candidate));
    auto h = ad::mul(out_gate, ad::tanh(c));
    return ad::hconcat(h, c);
}

/// Backward of the cell in differentiable ops.
inline std::vector<ad::Var> lstm_cell_backward(const ad::Var& gates, const ad::Var& cell, const ad::Var& upstream) {
    auto i = ad::sigmoid(ad::cols(gates, 0, kHidden));
    auto f = ad::sigmoid(ad::cols(gates, kHidden, kHidden));
    auto g = ad::tanh(ad::cols(gates, 2 * kHidden, kHidden));
    auto o = ad::sigmoid(ad::cols(gates, 3 * kHidden, kHidden));
    auto tc = ad::tanh(ad::add(ad::mul(f, cell), ad::mul(i, g)));
    auto gh = ad::cols(upstream, 0, kHidden);
    auto gc = ad::cols(upstream, kHidden, kHidden);
    auto one_minus = [](const ad::Var& v) { return ad::add_scalar(ad::neg(v), 1.0); };
    auto dcn = ad::add(gc, ad::mul(gh, ad::mul(o, one_minus(ad::mul(tc, tc)))));
    auto da_i = ad::mul(dcn, ad::mul(g, ad::mul(i, one_minus(i))));
    auto da_f = ad::mul(dcn, ad::mul(cell, ad::mul(f, one_minus(f))));
    auto da_g = ad::mul(dcn, ad::mul(i, one_minus(ad::mul(g, g))));
    auto da_o = ad::mul(gh, ad::mul(tc, ad::mul(o, one_minus(o))));
    auto da = ad::hconcat(ad::hconcat(da_i, da_f), ad::hconcat(da_g, da_o));
    return {da, ad::mul(dcn, f)};
}

/// gates (R x 4H, order i f g o), cell (R x H) -> [h | c] (R x 2H).
inline ad::Var lstm_cell(const ad::Var& gates, const ad::Var& cell) {
    const std::size_t rows = gates.rows();
    if (gates.cols() != kGates || cell.rows() != rows || cell.cols() != kHidden) {
        throw std::invalid_argument("lstm_cell: bad shapes " + gates.value().shape_string() + ", " +
                                    cell.value().shape_string());
    }
    const auto& a = gates.value();
    const auto& cp = cell.value();
    const bool record = ad::grad_enabled() && (gates.requires_grad() || cell.requires_grad());
    Tensor out = Tensor::uninitialized(rows, 2 * kHidden);
    // i, f, g, o, tanh(c) per row, kept for the backward pass
    auto act = std::make_shared<Tensor>(record ? Tensor::uninitialized(rows, 5 * kHidden) : Tensor());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* ar = a.data().data() + r * kGates;
        const double* cr = cp.data().data() + r * kHidden;
        double* o = out.data().data() + r * 2 * kHidden;
        double* s = record ? act->data().data() + r * 5 * kHidden : nullptr;
        for (std::size_t j = 0; j < kHidden; ++j) {
            const double i = sigmoid(ar[j]);
            const double f = sigmoid(ar[kHidden + j]);
            const double g = std::tanh(ar[2 * kHidden + j]);
            const double og = sigmoid(ar[3 * kHidden + j]);
            const double c = f * cr[j] + i * g;
            const double tc = std::tanh(c);
            o[kHidden + j] = c;
            o[j] = og * tc;
            if (s) {
                s[j] = i;
                s[kHidden + j] = f;
                s[2 * kHidden + j] = g;
                s[3 * kHidden + j] = og;
                s[4 * kHidden + j] = tc;
            }
        }
    }
    return ad::detail::make_result(
        std::move(out), {gates, cell},
        [gates, cell, act](const ad::Var& upstream, const ad::Var&) {
            if (ad::grad_enabled()) return lstm_cell_backward(gates, cell, upstream);
            const auto& cp = cell.value();
            const auto& up = upstream.value();
            const std::size_t rows = cp.rows();
            Tensor da = Tensor::uninitialized(rows, kGates);
            Tensor dc = Tensor::uninitialized(rows, kHidden);
            for (std::size_t r = 0; r < rows; ++r) {
                const double* s = act->data().data() + r * 5 * kHidden;
                const double* cr = cp.data().data() + r * kHidden;
                const double* ur = up.data().data() + r * 2 * kHidden;
                double* dar = da.data().data() + r * kGates;
                double* dcr = dc.data().data() + r * kHidden;
                for (std::size_t j = 0; j < kHidden; ++j) {
                    const double i = s[j];
                    const double f = s[kHidden + j];
                    const double g = s[2 * kHidden + j];
                    const double og = s[3 * kHidden + j];
                    const double tc = s[4 * kHidden + j];
                    const double gh = ur[j];
                    const double dcn = ur[kHidden + j] + gh * og * (1.0 - tc * tc);
                    dar[j] = dcn * g * i * (1.0 - i);
                    dar[kHidden + j] = dcn * cr[j] * f * (1.0 - f);
                    dar[2 * kHidden + j] = dcn * i * (1.0 - g * g);
                    dar[3 * kHidden + j] = gh * tc * og * (1.0 - og);
                    dcr[j] = dcn * f;
                }
            }
            return std::vector<ad::Var>{ad::constant(std::move(da)), ad::constant(std::move(dc))};
        },
        "lstm_cell");
}

}  // namespace detail

/// One step of the recurrent optimizer on a batch of gradients (N x D).
inline StepOutput rnn_step(const OptimizerParams& params, const ad::Var& grad, const RecurrentState& state) {
    const std::size_t n = grad.rows();
    const std::size_t d = grad.cols();
    const std::size_t rows = n * d;
    if (state.rows() != rows) {
        throw ConfigError("rnn_step: state has " + std::to_string(state.rows()) + " coordinates, gradient has " +
                          std::to_string(rows));
    }
    const auto& g = grad.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
        if (!std::isfinite(g[i])) throw NonFiniteError("rnn_step: non-finite gradient", 0, i / d);
    }

    ad::Var input = ad::reshape(grad, rows, 1);
    if (params.input_mode == InputMode::RawAndSign) input = ad::hconcat(input, ad::sign(input));

    const auto& t = params.tensors;
    StepOutput out;
    ad::Var layer_in = input;
    for (std::size_t l = 0; l < kLayers; ++l) {
        const auto& w_in = t[3 * l];
        const auto& w_hid = t[3 * l + 1];
        const auto& bias = t[3 * l + 2];
        auto gates = ad::add_row(ad::add(ad::matmul(layer_in, w_in), ad::matmul(state.hidden[l], w_hid)), bias);
        auto packed = detail::lstm_cell(gates, state.cell[l]);
        auto hidden = ad::cols(packed, 0, kHidden);
        auto cell = ad::cols(packed, kHidden, kHidden);
        out.next.hidden.push_back(hidden);
        out.next.cell.push_back(cell);
        layer_in = hidden;
    }
    auto head = ad::tanh(ad::add_row(ad::matmul(layer_in, t[6]), t[7]));
    out.direction = ad::reshape(head, n, d);
    return out;
}

/// x_next = project(x + step_size * g). Returns the direction as well so the
/// caller can form the prior penalty.
struct LearnedStep {
    ad::Var x_next;
    ad::Var direction;
    RecurrentState next;
};

inline LearnedStep learned_attack_step(const OptimizerParams& params, const ad::Var& x, const Tensor& origin,
                                       const ad::Var& grad, const RecurrentState& state, const AttackBudget& budget,
                                       ProjectionGradient mode) {
    auto step = rnn_step(params, grad, state);
    auto moved = ad::add(x, ad::scale(step.direction, budget.step_size));
    return {project(moved, origin, budget, mode), step.direction, std::move(step.next)};
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kVersionTag = "mama-0.1.0";

inline io::Container to_container(const OptimizerParams& params, const nlohmann::json& extra = {}) {
    io::Container c;
    c.metadata = {{"kind", "optimizer"},
                  {"architecture", params.architecture()},
                  {"input_mode", to_string(params.input_mode)},
                  {"version", kVersionTag},
                  {"training_config_hash", ""}};
    if (extra.is_object()) {
        for (const auto& [k, v] : extra.items()) c.metadata[k] = v;
    }
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        c.arrays.push_back({OptimizerParams::names()[i], params.tensors[i].value()});
    }
    return c;
}

inline OptimizerParams from_container(const io::Container& c) {
    if (c.metadata.value("kind", "") != "optimizer") throw ConfigError("checkpoint is not an optimizer checkpoint");
    OptimizerParams p;
    p.input_mode = parse_input_mode(c.metadata.at("input_mode").get<std::string>());
    for (const auto& name : OptimizerParams::names()) p.tensors.push_back(ad::constant(c.at(name)));
    const auto expected = OptimizerParams::initialize(0, p.input_mode);
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
        if (!p.tensors[i].value().same_shape(expected.tensors[i].value())) {
            throw ConfigError("optimizer checkpoint: array '" + OptimizerParams::names()[i] + "' has wrong shape");
        }
    }
    return p;
}

inline void save_checkpoint(const std::filesystem::path& path, const OptimizerParams& params,
                            const nlohmann::json& extra = {}) {
    io::save(path, to_container(params, extra));
}

inline OptimizerParams load_checkpoint(const std::filesystem::path& path) { return from_container(io::load(path)); }

}  // namespace mama::learned
