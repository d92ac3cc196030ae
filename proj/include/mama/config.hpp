#pragma once

// JSON configuration for budgets, trainers and training jobs. Every key is
// optional; missing keys take the defaults below.
//
//   budget:  norm "linf", epsilon 0.15, step_size epsilon/4, iterations 20, restarts 1
//   bma:     step_weights 1.0, prior_weights 0.1, unroll_truncation T, batch_size 32,
//            trainer "adam", trainer_learning_rate 0.003, max_iterations 300, loss "cw",
//            start "uniform", projection_gradient "straight-through",
//            differentiate_input_gradient false, seed 0, eval_every 0, eval_count 500,
//            init_seed 11, input_mode "raw+sign", head_scale 0.01
//   mama:    meta_test_count 1, beta 0.0001, gamma 0.001, mu 1.0, first_order false, outer "sgd"
//
// step_weights and prior_weights accept a number (repeated T times) or a
// list of length T.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mama/core.hpp"
#include "mama/io.hpp"
#include "mama/learned_opt.hpp"
#include "mama/training.hpp"

namespace mama::config {

using json = nlohmann::json;

inline constexpr double kDefaultEpsilon = 0.15;

inline json read_json(const std::filesystem::path& path) {
    std::string text;
    try {
        text = io::read_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
}

/// Wraps nlohmann type errors as configuration errors.
template <typename F>
auto guarded(const std::string& what, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const json::exception& e) {
        throw ConfigError(what + ": " + e.what());
    }
}

inline AttackBudget parse_budget(const json& j) {
    return guarded("budget", [&] {
        AttackBudget b;
        b.norm = parse_norm(j.value("norm", std::string("linf")));
        b.epsilon = j.value("epsilon", kDefaultEpsilon);
        b.step_size = j.value("step_size", b.epsilon > 0.0 ? b.epsilon / 4.0 : 0.01);
        b.iterations = j.value("iterations", std::size_t{20});
        b.restarts = j.value("restarts", std::size_t{1});
        b.validate();
        return b;
    });
}

inline json to_json(const AttackBudget& b) {
    return {{"norm", to_string(b.norm)},
            {"epsilon", b.epsilon},
            {"step_size", b.step_size},
            {"iterations", b.iterations},
            {"restarts", b.restarts}};
}

inline std::vector<double> per_step(const json& j, const char* key, double fallback, std::size_t t_steps) {
    if (!j.contains(key)) return std::vector<double>(t_steps, fallback);
    const auto& v = j.at(key);
    if (v.is_number()) return std::vector<double>(t_steps, v.get<double>());
    auto list = v.get<std::vector<double>>();
    if (list.size() != t_steps) {
        throw ConfigError(std::string(key) + ": expected " + std::to_string(t_steps) + " values, got " +
                          std::to_string(list.size()));
    }
    return list;
}

struct OptimizerInit {
    std::uint64_t seed = 11;
    learned::InputMode input_mode = learned::InputMode::RawAndSign;
    double head_scale = 1e-2;

    [[nodiscard]] learned::OptimizerParams make() const {
        return learned::OptimizerParams::initialize(seed, input_mode, head_scale);
    }
};

inline training::BMAConfig parse_bma(const json& j, std::size_t t_steps) {
    return guarded("bma", [&] {
        auto c = training::BMAConfig::defaults(t_steps);
        c.step_weights = per_step(j, "step_weights", 1.0, t_steps);
        c.prior_weights = per_step(j, "prior_weights", 0.1, t_steps);
        c.unroll_truncation = j.value("unroll_truncation", t_steps);
        c.batch_size = j.value("batch_size", std::size_t{32});
        c.trainer = optim::parse_kind(j.value("trainer", std::string("adam")));
        c.trainer_learning_rate = j.value("trainer_learning_rate", 3e-3);
        c.max_iterations = j.value("max_iterations", std::size_t{300});
        c.loss = parse_loss(j.value("loss", std::string("cw")));
        const auto start = j.value("start", std::string("uniform"));
        if (start == "uniform") {
            c.start = training::StartPoint::Uniform;
        } else if (start == "clean") {
            c.start = training::StartPoint::Clean;
        } else {
            throw ConfigError("bma.start must be uniform or clean");
        }
        const auto pg = j.value("projection_gradient", std::string("straight-through"));
        if (pg == "straight-through") {
            c.projection_gradient = ProjectionGradient::StraightThrough;
        } else if (pg == "exact") {
            c.projection_gradient = ProjectionGradient::Exact;
        } else {
            throw ConfigError("bma.projection_gradient must be straight-through or exact");
        }
        c.differentiate_input_gradient = j.value("differentiate_input_gradient", false);
        c.seed = j.value("seed", std::uint64_t{0});
        c.eval_every = j.value("eval_every", std::size_t{0});
        if (j.contains("divergence_checkpoint")) c.divergence_checkpoint = j.at("divergence_checkpoint").get<std::string>();
        return c;
    });
}

inline json to_json(const training::BMAConfig& c) {
    return {{"step_weights", c.step_weights},
            {"prior_weights", c.prior_weights},
            {"unroll_truncation", c.unroll_truncation},
            {"batch_size", c.batch_size},
            {"trainer", optim::to_string(c.trainer)},
            {"trainer_learning_rate", c.trainer_learning_rate},
            {"max_iterations", c.max_iterations},
            {"loss", to_string(c.loss)},
            {"start", c.start == training::StartPoint::Uniform ? "uniform" : "clean"},
            {"projection_gradient",
             c.projection_gradient == ProjectionGradient::StraightThrough ? "straight-through" : "exact"},
            {"differentiate_input_gradient", c.differentiate_input_gradient},
            {"seed", c.seed},
            {"eval_every", c.eval_every}};
}

inline OptimizerInit parse_optimizer_init(const json& j) {
    return guarded("bma", [&] {
        OptimizerInit o;
        o.seed = j.value("init_seed", o.seed);
        o.input_mode = learned::parse_input_mode(j.value("input_mode", std::string("raw+sign")));
        o.head_scale = j.value("head_scale", o.head_scale);
        return o;
    });
}

inline training::MAMAConfig parse_mama(const json& j, const training::BMAConfig& bma) {
    return guarded("mama", [&] {
        training::MAMAConfig c;
        c.bma = bma;
        c.meta_test_count = j.value("meta_test_count", std::size_t{1});
        c.beta = j.value("beta", 1e-4);
        c.gamma = j.value("gamma", 1e-3);
        c.mu = j.value("mu", 1.0);
        c.first_order = j.value("first_order", false);
        c.outer = optim::parse_kind(j.value("outer", std::string("sgd")));
        return c;
    });
}

inline json to_json(const training::MAMAConfig& c) {
    return {{"meta_test_count", c.meta_test_count}, {"beta", c.beta},   {"gamma", c.gamma},
            {"mu", c.mu},                           {"first_order", c.first_order},
            {"outer", optim::to_string(c.outer)}};
}

/// SHA-256 of the canonical (sorted-key) dump.
inline std::string hash_of(const json& j) { return io::sha256_hex(j.dump()); }

}  // namespace mama::config
