#pragma once

// First-order parameter updates on lists of tensors. `ascend` flips the sign
// so the same code serves loss minimization (defenses) and objective
// maximization (attack optimizers).

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mama/core.hpp"
#include "mama/tensor.hpp"

namespace mama::optim {

enum class Kind { Sgd, Adam };

inline std::string to_string(Kind k) { return k == Kind::Sgd ? "sgd" : "adam"; }

inline Kind parse_kind(const std::string& s) {
    if (s == "sgd") return Kind::Sgd;
    if (s == "adam") return Kind::Adam;
    throw ConfigError("unknown trainer '" + s + "' (expected sgd or adam)");
}

class Optimizer {
public:
    Optimizer(Kind kind, double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : kind_(kind), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
    }

    /// values[i] += sign * step(grads[i]), sign = +1 when ascending.
    void step(std::vector<Tensor>& values, const std::vector<Tensor>& grads, bool ascend) {
        if (values.size() != grads.size()) throw std::invalid_argument("optimizer: gradient count mismatch");
        const double sign = ascend ? 1.0 : -1.0;
        ++t_;
        if (kind_ == Kind::Sgd) {
            for (std::size_t i = 0; i < values.size(); ++i) {
                for (std::size_t j = 0; j < values[i].size(); ++j) values[i][j] += sign * lr_ * grads[i][j];
            }
            return;
        }
        if (m_.empty()) {
            for (const auto& g : grads) {
                m_.emplace_back(g.rows(), g.cols());
                v_.emplace_back(g.rows(), g.cols());
            }
        }
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < values.size(); ++i) {
            for (std::size_t j = 0; j < values[i].size(); ++j) {
                const double g = grads[i][j];
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
                values[i][j] += sign * lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
            }
        }
    }

    [[nodiscard]] Kind kind() const { return kind_; }
    [[nodiscard]] double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    Kind kind_;
    double lr_;
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace mama::optim
