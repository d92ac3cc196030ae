#pragma once

// Training the recurrent attack optimizer.
//
// BMA: gradient ascent on the unrolled trajectory objective
//   J = mean_batch sum_{t=1..T} [ w_t L(f(x_t), y) - lambda_t ||g_{t-1} - sign(grad_{t-1})||^2 ]
// where g_{t-1} is the direction that produced x_t from x_{t-1} and
// grad_{t-1} the loss gradient at x_{t-1}. The projection is differentiated
// straight-through.
//
// MAMA: each iteration splits the defense pool into meta-train and meta-test
// parts, takes an inner ascent step phi' = phi + beta dJ_train/dphi and
// updates phi += gamma d/dphi [J_train(phi) + mu J_test(phi')], differentiating
// through the inner step.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mama/attacks.hpp"
#include "mama/autodiff.hpp"
#include "mama/core.hpp"
#include "mama/data.hpp"
#include "mama/io.hpp"
#include "mama/learned_opt.hpp"
#include "mama/optim.hpp"
#include "mama/seeding.hpp"

namespace mama::training {

using json = nlohmann::json;
using LogSink = std::function<void(const std::string&)>;

enum class StartPoint { Clean, Uniform };

struct BMAConfig {
    std::vector<double> step_weights;   // w_t, length T
    std::vector<double> prior_weights;  // lambda_t, length T
    std::size_t unroll_truncation = 0;  // 0 means T (full unroll)
    std::size_t batch_size = 32;
    double trainer_learning_rate = 1e-3;
    optim::Kind trainer = optim::Kind::Adam;
    std::size_t max_iterations = 100;
    LossKind loss = LossKind::cw();
    StartPoint start = StartPoint::Uniform;
    ProjectionGradient projection_gradient = ProjectionGradient::StraightThrough;
    /// Keep the loss gradient fed to the optimizer differentiable w.r.t. the
    /// iterate. Off by default: for piecewise-linear defenses under the margin
    /// loss the extra term is zero almost everywhere.
    bool differentiate_input_gradient = false;
    std::uint64_t seed = 0;
    /// Record robust accuracy on the evaluation set every this many
    /// iterations (0: never).
    std::size_t eval_every = 0;
    /// Written with the last finite parameters if training diverges.
    std::filesystem::path divergence_checkpoint;

    static BMAConfig defaults(std::size_t iterations_t) {
        BMAConfig c;
        c.step_weights.assign(iterations_t, 1.0);
        c.prior_weights.assign(iterations_t, 0.1);
        c.unroll_truncation = iterations_t;
        return c;
    }

    [[nodiscard]] std::size_t truncation(std::size_t t_steps) const {
        return unroll_truncation == 0 ? t_steps : unroll_truncation;
    }

    void validate(const AttackBudget& budget) const {
        budget.validate();
        const auto t_steps = budget.iterations;
        if (step_weights.size() != t_steps || prior_weights.size() != t_steps) {
            throw ConfigError("bma: step_weights and prior_weights must have length T=" + std::to_string(t_steps));
        }
        for (double w : step_weights) {
            if (!(w >= 0.0)) throw ConfigError("bma: step weights must be >= 0");
        }
        for (double l : prior_weights) {
            if (!(l >= 0.0)) throw ConfigError("bma: prior weights must be >= 0");
        }
        const auto k = truncation(t_steps);
        if (k < 1 || k > t_steps) throw ConfigError("bma: unroll_truncation must be in [1, T]");
        if (batch_size < 1) throw ConfigError("bma: batch_size must be >= 1");
        if (!(trainer_learning_rate >= 0.0)) throw ConfigError("bma: trainer_learning_rate must be >= 0");
    }
};

struct MAMAConfig {
    BMAConfig bma;
    std::size_t meta_test_count = 1;  // n
    double beta = 1e-4;
    double gamma = 1e-3;
    double mu = 1.0;
    bool first_order = false;
    optim::Kind outer = optim::Kind::Sgd;

    void validate(const AttackBudget& budget, std::size_t pool_size) const {
        bma.validate(budget);
        if (pool_size < 1) throw ConfigError("mama: empty defense pool");
        if (meta_test_count >= pool_size) {
            throw ConfigError("mama: meta_test_count must be < pool size (" + std::to_string(pool_size) + ")");
        }
        if (!(beta > 0.0) || !(gamma > 0.0)) throw ConfigError("mama: beta and gamma must be > 0");
        if (!(mu >= 0.0)) throw ConfigError("mama: mu must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Objective

/// A batch of attack problems against one defense.
struct Batch {
    Tensor images;
    std::vector<std::size_t> labels;
    std::vector<std::uint64_t> seeds;  // per row, for the random start

    static Batch from(const data::Dataset& d, std::uint64_t seed) {
        Batch b{d.images, d.labels, std::vector<std::uint64_t>(d.size())};
        for (std::size_t i = 0; i < d.size(); ++i) b.seeds[i] = derive_seed(seed, {i});
        return b;
    }
};

struct UnrollTrace {
    std::vector<Tensor> iterates;          // x_0 .. x_T
    std::vector<double> mean_losses;       // batch-mean loss at x_1 .. x_T
    std::vector<double> mean_penalties;    // batch-mean prior penalty for t = 1 .. T
};

/// The BMA objective of `params` on one defense and batch. `trace`, when
/// given, receives the forward values.
inline ad::Var bma_objective(const learned::OptimizerParams& params, const Classifier& f, const Batch& batch,
                             const AttackBudget& budget, const BMAConfig& cfg, const LossKind& kind,
                             UnrollTrace* trace = nullptr) {
    cfg.validate(budget);
    const std::size_t n = batch.images.rows();
    if (n == 0) throw ConfigError("bma_objective: empty batch");
    if (batch.labels.size() != n || batch.seeds.size() != n) throw ConfigError("bma_objective: batch size mismatch");
    if (batch.images.cols() != f.input_dim()) throw ConfigError("bma_objective: image width does not match defense");

    const Tensor& origin = batch.images;
    Tensor start = cfg.start == StartPoint::Uniform ? attacks::uniform_start(origin, budget, batch.seeds) : origin;
    ad::Var x = ad::constant(start);
    auto state = learned::RecurrentState::zeros(n * origin.cols());
    auto current = loss_and_gradient(f, kind, x, batch.labels, cfg.differentiate_input_gradient, 0);
    const std::size_t k = cfg.truncation(budget.iterations);
    const double inv_n = 1.0 / static_cast<double>(n);
    if (trace) trace->iterates.push_back(start);

    ad::Var total;
    for (std::size_t t = 1; t <= budget.iterations; ++t) {
        ad::Var g_in = cfg.differentiate_input_gradient ? current.gradient : ad::detach(current.gradient);
        const Tensor prior = tensor_ops::sign(current.gradient.value());
        auto step = learned::learned_attack_step(params, x, origin, g_in, state, budget, cfg.projection_gradient);
        x = step.x_next;
        state = std::move(step.next);
        current = loss_and_gradient(f, kind, x, batch.labels, cfg.differentiate_input_gradient, t);
        for (std::size_t r = 0; r < n; ++r) {
            if (!std::isfinite(current.losses.value()[r])) throw NonFiniteError("bma_objective: non-finite loss", t, r);
        }
        auto gain = ad::scale(ad::sum(current.losses), cfg.step_weights[t - 1] * inv_n);
        auto penalty = ad::sum(ad::square(ad::sub(step.direction, ad::constant(prior))));
        auto term = ad::sub(gain, ad::scale(penalty, cfg.prior_weights[t - 1] * inv_n));
        total = total.defined() ? ad::add(total, term) : term;
        if (trace) {
            trace->iterates.push_back(x.value());
            trace->mean_losses.push_back(ad::sum(current.losses).item() * inv_n);
            trace->mean_penalties.push_back(penalty.item() * inv_n);
        }
        if (t % k == 0 && t < budget.iterations) {
            // truncated backpropagation: cut the graph between segments
            x = ad::detach(x);
            state = state.detached();
            current.gradient = ad::detach(current.gradient);
        }
    }
    if (!std::isfinite(total.item())) throw NonFiniteError("bma_objective: non-finite objective", budget.iterations, 0);
    return total;
}

/// Mean of per-defense objectives.
inline ad::Var mean_objective(const learned::OptimizerParams& params, const std::vector<const Classifier*>& defenses,
                              const std::vector<Batch>& batches, const AttackBudget& budget, const BMAConfig& cfg) {
    if (defenses.empty() || defenses.size() != batches.size()) {
        throw ConfigError("objective: need one batch per defense");
    }
    ad::Var total;
    for (std::size_t i = 0; i < defenses.size(); ++i) {
        auto j = bma_objective(params, *defenses[i], batches[i], budget, cfg, cfg.loss);
        total = total.defined() ? ad::add(total, j) : j;
    }
    return ad::scale(total, 1.0 / static_cast<double>(defenses.size()));
}

inline std::vector<Tensor> values_of(const std::vector<ad::Var>& vars) {
    std::vector<Tensor> out;
    out.reserve(vars.size());
    for (const auto& v : vars) out.push_back(v.value());
    return out;
}

inline bool all_finite(const std::vector<Tensor>& ts) {
    return std::all_of(ts.begin(), ts.end(), [](const Tensor& t) { return t.all_finite(); });
}

inline learned::OptimizerParams from_values(const learned::OptimizerParams& like, const std::vector<Tensor>& values) {
    std::vector<ad::Var> t;
    for (const auto& v : values) t.push_back(ad::constant(v));
    return like.with_tensors(std::move(t));
}

// ---------------------------------------------------------------------------
// BMA

/// One ascent step on explicit batches. Returns the objective before the
/// update; `params` is replaced by the updated parameters.
inline double bma_step(learned::OptimizerParams& params, const std::vector<const Classifier*>& defenses,
                       const std::vector<Batch>& batches, const AttackBudget& budget, const BMAConfig& cfg,
                       optim::Optimizer& trainer) {
    const auto live = params.trainable();
    auto j = mean_objective(live, defenses, batches, budget, cfg);
    auto grads = values_of(ad::grad(j, live.tensors));
    if (!all_finite(grads)) throw NonFiniteError("bma: non-finite parameter gradient", budget.iterations, 0);
    auto values = live.values();
    trainer.step(values, grads, true);
    params = from_values(params, values);
    return j.item();
}

struct CurvePoint {
    std::size_t iteration = 0;
    double objective = 0.0;
    std::optional<double> robust_accuracy;  // percent, on the evaluation set
    double wall_seconds = 0.0;
};

inline void to_json(json& j, const CurvePoint& p) {
    j = {{"iteration", p.iteration}, {"objective", p.objective}, {"wall_seconds", p.wall_seconds}};
    j["robust_accuracy"] = p.robust_accuracy ? json(*p.robust_accuracy) : json(nullptr);
}

inline void from_json(const json& j, CurvePoint& p) {
    p.iteration = j.at("iteration").get<std::size_t>();
    // NaN objectives (the pre-training point) serialize as null
    const auto& o = j.at("objective");
    p.objective = o.is_null() ? std::numeric_limits<double>::quiet_NaN() : o.get<double>();
    p.wall_seconds = j.value("wall_seconds", 0.0);
    if (j.contains("robust_accuracy") && !j.at("robust_accuracy").is_null()) {
        p.robust_accuracy = j.at("robust_accuracy").get<double>();
    }
}

struct EvalSet {
    const Classifier* defense = nullptr;
    data::Dataset data;
    std::uint64_t seed = 0;
};

/// Robust accuracy (percent) of a defense against the learned optimizer.
inline double learned_robust_accuracy(const learned::OptimizerParams& params, const Classifier& f,
                                      const data::Dataset& d, const AttackBudget& budget, const LossKind& kind,
                                      std::uint64_t seed, std::size_t chunk = 256) {
    attacks::Learned rule{std::make_shared<const learned::OptimizerParams>(params.frozen())};
    std::size_t robust = 0;
    for (std::size_t start = 0; start < d.size(); start += chunk) {
        const std::size_t end = std::min(d.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto part = d.subset(idx);
        std::vector<std::uint64_t> seeds(part.size());
        for (std::size_t i = 0; i < part.size(); ++i) seeds[i] = derive_seed(seed, {start + i});
        attacks::Objective obj{kind, part.labels, {}};
        auto out = attacks::run_attack_batch(f, part.images, obj, budget, rule, attacks::UniformRandom{}, seeds);
        for (char s : out.success) robust += s ? 0 : 1;
    }
    return d.size() == 0 ? 0.0 : 100.0 * static_cast<double>(robust) / static_cast<double>(d.size());
}

struct TrainResult {
    learned::OptimizerParams params;
    std::vector<CurvePoint> curve;
};

namespace detail {

[[noreturn]] inline void diverged(const learned::OptimizerParams& last_finite, const std::filesystem::path& ckpt,
                                  std::size_t iteration, const std::string& why) {
    std::string msg = "training diverged at iteration " + std::to_string(iteration) + ": " + why;
    if (!ckpt.empty()) {
        learned::save_checkpoint(ckpt, last_finite, {{"diverged_at", iteration}});
        msg += "; last finite parameters written to " + ckpt.string();
    }
    throw RuntimeError(msg);
}

inline std::vector<Batch> draw_batches(const data::Dataset& d, std::size_t count, std::size_t batch_size,
                                       std::mt19937_64& rng) {
    std::vector<Batch> out;
    for (std::size_t i = 0; i < count; ++i) {
        const auto sample = d.sample(batch_size, rng);
        out.push_back(Batch::from(sample, rng()));
    }
    return out;
}

}  // namespace detail

/// BMA training on one defense, or on several as an ensemble (one fresh
/// batch per defense per iteration, objectives averaged).
inline TrainResult train_bma(const learned::OptimizerParams& initial, const std::vector<const Classifier*>& defenses,
                             const data::Dataset& dataset, const AttackBudget& budget, const BMAConfig& cfg,
                             const std::optional<EvalSet>& eval = std::nullopt, const LogSink& log = {}) {
    cfg.validate(budget);
    if (dataset.size() == 0) throw ConfigError("train_bma: empty dataset");
    if (defenses.empty()) throw ConfigError("train_bma: no defenses");
    std::mt19937_64 rng(derive_seed(cfg.seed, {0x626d61ULL}));
    optim::Optimizer trainer(cfg.trainer, cfg.trainer_learning_rate);
    TrainResult result{initial.frozen(), {}};
    const auto t0 = std::chrono::steady_clock::now();
    auto record = [&](std::size_t it, double objective) {
        CurvePoint p{it, objective, std::nullopt,
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
        if (eval && cfg.eval_every > 0 && (it % cfg.eval_every == 0 || it == cfg.max_iterations)) {
            p.robust_accuracy = learned_robust_accuracy(result.params, *eval->defense, eval->data, budget, cfg.loss,
                                                        eval->seed);
        }
        result.curve.push_back(p);
        if (log && (p.robust_accuracy || it % 10 == 0)) {
            std::string line = "bma iter " + std::to_string(it) + " objective " + std::to_string(objective);
            if (p.robust_accuracy) line += " robust " + std::to_string(*p.robust_accuracy) + "%";
            log(line);
        }
    };
    if (eval && cfg.eval_every > 0) record(0, std::nan(""));
    for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
        const auto batches = detail::draw_batches(dataset, defenses.size(), cfg.batch_size, rng);
        auto next = result.params;
        double objective = 0.0;
        try {
            objective = bma_step(next, defenses, batches, budget, cfg, trainer);
        } catch (const NonFiniteError& e) {
            detail::diverged(result.params, cfg.divergence_checkpoint, it, e.what());
        }
        if (!std::isfinite(objective) || !next.all_finite()) {
            detail::diverged(result.params, cfg.divergence_checkpoint, it, "non-finite objective or parameters");
        }
        result.params = std::move(next);
        record(it, objective);
    }
    return result;
}

// ---------------------------------------------------------------------------
// MAMA

struct MetaSplit {
    std::vector<std::size_t> meta_train;
    std::vector<std::size_t> meta_test;
};

/// Uniformly random split of {0..N-1}: n indices for meta-test, the rest for
/// meta-train (both sorted).
inline MetaSplit random_split(std::size_t pool_size, std::size_t n, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(pool_size);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    MetaSplit s{{idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end()},
                {idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n)}};
    std::sort(s.meta_train.begin(), s.meta_train.end());
    std::sort(s.meta_test.begin(), s.meta_test.end());
    return s;
}

struct MetaStepResult {
    double meta_train_objective = 0.0;
    std::optional<double> meta_test_objective;
};

/// The combined meta-gradient d/dphi [J_train(phi) + mu J_test(phi + beta dJ_train/dphi)]
/// on explicit batches. Exposed separately for gradient checks.
struct MetaGradient {
    std::vector<Tensor> gradient;
    MetaStepResult values;
};

inline MetaGradient meta_gradient(const learned::OptimizerParams& params,
                                  const std::vector<const Classifier*>& train_defenses,
                                  const std::vector<Batch>& train_batches,
                                  const std::vector<const Classifier*>& test_defenses,
                                  const std::vector<Batch>& test_batches, const AttackBudget& budget,
                                  const MAMAConfig& cfg) {
    const auto live = params.trainable();
    auto j_train = mean_objective(live, train_defenses, train_batches, budget, cfg.bma);
    MetaGradient out;
    out.values.meta_train_objective = j_train.item();
    const bool meta_test = !test_defenses.empty() && cfg.mu > 0.0;
    if (!meta_test) {
        out.gradient = values_of(ad::grad(j_train, live.tensors));
        if (!test_defenses.empty()) {
            // mu = 0: the meta-test value is still reported
            std::vector<Tensor> stepped;
            for (std::size_t i = 0; i < out.gradient.size(); ++i) {
                stepped.push_back(tensor_ops::zip(live.tensors[i].value(), out.gradient[i],
                                                  [&](double p, double g) { return p + cfg.beta * g; }));
            }
            ad::NoGradGuard guard;
            out.values.meta_test_objective =
                mean_objective(from_values(params, stepped), test_defenses, test_batches, budget, cfg.bma).item();
        }
        return out;
    }
    auto inner = ad::grad(j_train, live.tensors, !cfg.first_order);
    std::vector<ad::Var> stepped;
    for (std::size_t i = 0; i < inner.size(); ++i) {
        stepped.push_back(ad::add(live.tensors[i], ad::scale(inner[i], cfg.beta)));
    }
    auto j_test = mean_objective(params.with_tensors(stepped), test_defenses, test_batches, budget, cfg.bma);
    out.values.meta_test_objective = j_test.item();
    auto total = ad::add(j_train, ad::scale(j_test, cfg.mu));
    out.gradient = values_of(ad::grad(total, live.tensors));
    return out;
}

/// One outer update on explicit batches.
inline MetaStepResult mama_step(learned::OptimizerParams& params, const std::vector<const Classifier*>& train_defenses,
                                const std::vector<Batch>& train_batches,
                                const std::vector<const Classifier*>& test_defenses,
                                const std::vector<Batch>& test_batches, const AttackBudget& budget,
                                const MAMAConfig& cfg, optim::Optimizer& outer) {
    auto mg = meta_gradient(params, train_defenses, train_batches, test_defenses, test_batches, budget, cfg);
    if (!all_finite(mg.gradient)) throw NonFiniteError("mama: non-finite meta-gradient", budget.iterations, 0);
    auto values = params.values();
    outer.step(values, mg.gradient, true);
    params = from_values(params, values);
    return mg.values;
}

struct IterationRecord {
    std::size_t iteration = 0;
    double meta_train_objective = 0.0;
    std::optional<double> meta_test_objective;
    double wall_seconds = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::string> meta_train;
    std::vector<std::string> meta_test;
};

inline void to_json(json& j, const IterationRecord& r) {
    j = {{"iteration", r.iteration},
         {"meta_train_objective", r.meta_train_objective},
         {"meta_test_objective", r.meta_test_objective ? json(*r.meta_test_objective) : json(nullptr)},
         {"wall_seconds", r.wall_seconds},
         {"seed", r.seed},
         {"meta_train", r.meta_train},
         {"meta_test", r.meta_test}};
}

inline void from_json(const json& j, IterationRecord& r) {
    r.iteration = j.at("iteration").get<std::size_t>();
    r.meta_train_objective = j.at("meta_train_objective").get<double>();
    if (!j.at("meta_test_objective").is_null()) r.meta_test_objective = j.at("meta_test_objective").get<double>();
    r.wall_seconds = j.at("wall_seconds").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.meta_train = j.value("meta_train", std::vector<std::string>{});
    r.meta_test = j.value("meta_test", std::vector<std::string>{});
}

/// Draws the split and batches for iteration `it`, then updates params.
inline IterationRecord mama_iteration(learned::OptimizerParams& params, const MAMAConfig& cfg,
                                      const std::vector<const Classifier*>& pool, const data::Dataset& dataset,
                                      const AttackBudget& budget, std::size_t it, optim::Optimizer& outer) {
    cfg.validate(budget, pool.size());
    const std::uint64_t seed = derive_seed(cfg.bma.seed, {0x6d616d61ULL, it});
    std::mt19937_64 rng(seed);
    const auto split = random_split(pool.size(), cfg.meta_test_count, rng);
    std::vector<const Classifier*> train_defs, test_defs;
    IterationRecord rec;
    rec.iteration = it;
    rec.seed = seed;
    for (auto i : split.meta_train) {
        train_defs.push_back(pool[i]);
        rec.meta_train.push_back(pool[i]->info().name);
    }
    for (auto i : split.meta_test) {
        test_defs.push_back(pool[i]);
        rec.meta_test.push_back(pool[i]->info().name);
    }
    const auto train_batches = detail::draw_batches(dataset, train_defs.size(), cfg.bma.batch_size, rng);
    const auto test_batches = detail::draw_batches(dataset, test_defs.size(), cfg.bma.batch_size, rng);
    const auto values = mama_step(params, train_defs, train_batches, test_defs, test_batches, budget, cfg, outer);
    rec.meta_train_objective = values.meta_train_objective;
    rec.meta_test_objective = values.meta_test_objective;
    return rec;
}

struct MamaResult {
    learned::OptimizerParams params;
    std::vector<IterationRecord> log;
    std::vector<CurvePoint> curve;
};

/// Runs max_iterations meta-iterations. Each record is also appended to
/// `jsonl` when that path is non-empty.
inline MamaResult train_mama(const learned::OptimizerParams& initial, const MAMAConfig& cfg,
                             const std::vector<const Classifier*>& pool, const data::Dataset& dataset,
                             const AttackBudget& budget, const std::filesystem::path& jsonl = {},
                             const std::optional<EvalSet>& eval = std::nullopt, const LogSink& log = {}) {
    cfg.validate(budget, pool.size());
    if (dataset.size() == 0) throw ConfigError("train_mama: empty dataset");
    MamaResult result{initial.frozen(), {}, {}};
    optim::Optimizer outer(cfg.outer, cfg.gamma);
    std::ofstream out;
    if (!jsonl.empty()) {
        if (jsonl.has_parent_path()) std::filesystem::create_directories(jsonl.parent_path());
        out.open(jsonl, std::ios::app);
        if (!out) throw RuntimeError("cannot open training log " + jsonl.string());
    }
    if (log && cfg.bma.truncation(budget.iterations) < budget.iterations) {
        log("truncated backpropagation: segment length " + std::to_string(cfg.bma.truncation(budget.iterations)));
    }
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t it = 1; it <= cfg.bma.max_iterations; ++it) {
        auto next = result.params;
        IterationRecord rec;
        try {
            rec = mama_iteration(next, cfg, pool, dataset, budget, it, outer);
        } catch (const NonFiniteError& e) {
            detail::diverged(result.params, cfg.bma.divergence_checkpoint, it, e.what());
        }
        if (!next.all_finite()) detail::diverged(result.params, cfg.bma.divergence_checkpoint, it, "non-finite parameters");
        result.params = std::move(next);
        rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (out) out << json(rec).dump() << "\n" << std::flush;
        if (eval && cfg.bma.eval_every > 0 && (it % cfg.bma.eval_every == 0 || it == cfg.bma.max_iterations)) {
            CurvePoint p{it, rec.meta_train_objective, std::nullopt, rec.wall_seconds};
            p.robust_accuracy = learned_robust_accuracy(result.params, *eval->defense, eval->data, budget,
                                                        cfg.bma.loss, eval->seed);
            result.curve.push_back(p);
        }
        if (log && it % 10 == 0) {
            log("mama iter " + std::to_string(it) + " meta-train " + std::to_string(rec.meta_train_objective) +
                (rec.meta_test_objective ? " meta-test " + std::to_string(*rec.meta_test_objective) : ""));
        }
        result.log.push_back(std::move(rec));
    }
    return result;
}

}  // namespace mama::training
