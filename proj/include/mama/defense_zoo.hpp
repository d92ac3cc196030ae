#pragma once

// Small defended classifiers: recipes, training (standard or PGD adversarial
// training), checkpoints with a JSON sidecar, and pool manifests.
//
// Checkpoint layout on disk:
//   <file>        container: network arrays + metadata (recipe, metrics)
//   <file>.json   sidecar: recipe, metrics, content hash of the arrays

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mama/attacks.hpp"
#include "mama/core.hpp"
#include "mama/data.hpp"
#include "mama/io.hpp"
#include "mama/nn.hpp"
#include "mama/optim.hpp"
#include "mama/seeding.hpp"

namespace mama::zoo {

using json = nlohmann::json;
using LogSink = std::function<void(const std::string&)>;

enum class TrainingKind { Standard, PgdAt };

inline std::string to_string(TrainingKind k) { return k == TrainingKind::Standard ? "standard" : "pgd_at"; }

struct DefenseRecipe {
    std::string name;
    std::string architecture;      // layer string, see nn::parse_architecture
    std::string architecture_tag;  // e.g. "mlp", "conv", "wide-conv"
    TrainingKind training = TrainingKind::Standard;
    double at_epsilon = 0.0;
    std::size_t at_steps = 0;
    double at_step_size = 0.0;
    data::DatasetSpec dataset;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    optim::Kind optimizer = optim::Kind::Adam;
    double learning_rate = 1e-3;
    std::size_t batch_size = 64;
    // reference robustness budget recorded in the checkpoint
    double reference_epsilon = 0.1;
    double reference_step_size = 0.01;
    std::size_t reference_iterations = 20;
    std::size_t eval_count = 1000;

    void validate() const {
        if (name.empty()) throw ConfigError("recipe: name is empty");
        nn::parse_architecture(architecture);
        if (training == TrainingKind::PgdAt) {
            if (!(at_epsilon > 0.0)) throw ConfigError("recipe '" + name + "': at_epsilon must be > 0");
            if (at_steps < 1) throw ConfigError("recipe '" + name + "': at_steps must be >= 1");
            if (!(at_step_size > 0.0)) throw ConfigError("recipe '" + name + "': at_step_size must be > 0");
        }
        if (epochs < 1) throw ConfigError("recipe '" + name + "': epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("recipe '" + name + "': batch_size must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("recipe '" + name + "': learning_rate must be > 0");
        AttackBudget{Norm::Linf, reference_epsilon, reference_step_size, reference_iterations, 1}.validate();
    }

    [[nodiscard]] AttackBudget reference_budget() const {
        return {Norm::Linf, reference_epsilon, reference_step_size, reference_iterations, 1};
    }
};

inline void to_json(json& j, const DefenseRecipe& r) {
    j = {{"name", r.name},
         {"architecture", r.architecture},
         {"architecture_tag", r.architecture_tag},
         {"training", {{"kind", to_string(r.training)}}},
         {"dataset", r.dataset},
         {"epochs", r.epochs},
         {"seed", r.seed},
         {"optimizer", {{"kind", optim::to_string(r.optimizer)}, {"learning_rate", r.learning_rate},
                        {"batch_size", r.batch_size}}},
         {"reference", {{"epsilon", r.reference_epsilon}, {"step_size", r.reference_step_size},
                        {"iterations", r.reference_iterations}, {"eval_count", r.eval_count}}}};
    if (r.training == TrainingKind::PgdAt) {
        j["training"]["epsilon"] = r.at_epsilon;
        j["training"]["steps"] = r.at_steps;
        j["training"]["step_size"] = r.at_step_size;
    }
}

inline void from_json(const json& j, DefenseRecipe& r) {
    r = DefenseRecipe{};
    r.name = j.at("name").get<std::string>();
    r.architecture = j.at("architecture").get<std::string>();
    r.architecture_tag = j.value("architecture_tag", r.architecture);
    if (j.contains("training")) {
        const auto& t = j.at("training");
        const auto kind = t.value("kind", std::string("standard"));
        if (kind == "standard") {
            r.training = TrainingKind::Standard;
        } else if (kind == "pgd_at") {
            r.training = TrainingKind::PgdAt;
            r.at_epsilon = t.at("epsilon").get<double>();
            r.at_steps = t.value("steps", std::size_t{7});
            r.at_step_size = t.value("step_size", 2.5 * r.at_epsilon / static_cast<double>(r.at_steps));
        } else {
            throw ConfigError("recipe: unknown training kind '" + kind + "'");
        }
    }
    if (j.contains("dataset")) r.dataset = j.at("dataset").get<data::DatasetSpec>();
    r.epochs = j.value("epochs", r.epochs);
    r.seed = j.value("seed", r.seed);
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        r.optimizer = optim::parse_kind(o.value("kind", std::string("adam")));
        r.learning_rate = o.value("learning_rate", r.learning_rate);
        r.batch_size = o.value("batch_size", r.batch_size);
    }
    if (j.contains("reference")) {
        const auto& o = j.at("reference");
        r.reference_epsilon = o.value("epsilon", r.reference_epsilon);
        r.reference_step_size = o.value("step_size", r.reference_epsilon / 10.0);
        r.reference_iterations = o.value("iterations", r.reference_iterations);
        r.eval_count = o.value("eval_count", r.eval_count);
    }
    r.validate();
}

struct DefenseMetrics {
    double clean_accuracy = 0.0;   // percent
    double robust_accuracy = 0.0;  // percent, PGD at the reference budget
    std::size_t eval_count = 0;
};

inline void to_json(json& j, const DefenseMetrics& m) {
    j = {{"clean_accuracy", m.clean_accuracy}, {"robust_accuracy", m.robust_accuracy}, {"eval_count", m.eval_count}};
}

inline void from_json(const json& j, DefenseMetrics& m) {
    m.clean_accuracy = j.at("clean_accuracy").get<double>();
    m.robust_accuracy = j.at("robust_accuracy").get<double>();
    m.eval_count = j.at("eval_count").get<std::size_t>();
}

struct DefenseCheckpoint {
    std::shared_ptr<const nn::Network> network;
    DefenseRecipe recipe;
    DefenseMetrics metrics;
    std::string hash;
};

/// Content hash of a network's parameters; used to check that attacks leave
/// defenses untouched.
inline std::string fingerprint(const nn::Network& net) { return io::content_hash(net.arrays()); }

// ---------------------------------------------------------------------------
// Evaluation helpers

inline double clean_accuracy(const Classifier& f, const data::Dataset& d, std::size_t chunk = 512) {
    if (d.size() == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < d.size(); start += chunk) {
        const std::size_t end = std::min(d.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto part = d.subset(idx);
        const auto z = f.logits(part.images);
        for (std::size_t r = 0; r < part.size(); ++r) correct += argmax(z.row_span(r)) == part.labels[r];
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(d.size());
}

/// Percent of rows still correctly classified after a restart-wrapped attack.
/// Row i uses seed derive_seed(seed, {i}).
inline double robust_accuracy(const Classifier& f, const data::Dataset& d, const AttackBudget& budget,
                              const attacks::UpdateRule& rule, const attacks::InitStrategy& init,
                              const LossKind& kind, std::uint64_t seed, std::size_t chunk = 256) {
    if (d.size() == 0) return 0.0;
    std::size_t robust = 0;
    for (std::size_t start = 0; start < d.size(); start += chunk) {
        const std::size_t end = std::min(d.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto part = d.subset(idx);
        std::vector<std::uint64_t> seeds(part.size());
        for (std::size_t i = 0; i < part.size(); ++i) seeds[i] = derive_seed(seed, {start + i});
        attacks::Objective obj{kind, part.labels, {}};
        auto out = attacks::run_with_restarts_batch(f, part.images, obj, budget, rule, init, seeds);
        for (char s : out.success) robust += s ? 0 : 1;
    }
    return 100.0 * static_cast<double>(robust) / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// Training

inline DefenseCheckpoint train_defense(const DefenseRecipe& recipe, const data::Split& split,
                                       const LogSink& log = {}) {
    recipe.validate();
    const auto& train = split.train;
    if (train.size() == 0 || split.test.size() == 0) throw ConfigError("train_defense: empty train or test split");
    auto net = std::make_shared<nn::Network>(recipe.name, train.shape, train.num_classes, recipe.architecture,
                                             derive_seed(recipe.seed, {0x696e6974ULL}), to_string(recipe.training));
    optim::Optimizer opt(recipe.optimizer, recipe.learning_rate);
    std::mt19937_64 rng(derive_seed(recipe.seed, {0x73687566ULL}));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    const AttackBudget at_budget{Norm::Linf, recipe.at_epsilon, recipe.at_step_size, std::max<std::size_t>(1, recipe.at_steps), 1};

    std::vector<Tensor> values;
    for (const auto& p : net->parameters()) values.push_back(p.value());
    std::size_t batch_counter = 0;
    double epoch_loss = 0.0;
    for (std::size_t epoch = 0; epoch < recipe.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += recipe.batch_size, ++batch_counter) {
            const std::size_t end = std::min(order.size(), start + recipe.batch_size);
            auto batch = train.subset({order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(end)});
            Tensor inputs = batch.images;
            if (recipe.training == TrainingKind::PgdAt) {
                net->set_parameters(values, false);
                std::vector<std::uint64_t> seeds(batch.size());
                for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = derive_seed(recipe.seed, {batch_counter, i});
                attacks::Objective obj{LossKind::ce(), batch.labels, {}};
                inputs = attacks::run_attack_batch(*net, batch.images, obj, at_budget, attacks::SignGD{},
                                                   attacks::UniformRandom{}, seeds)
                             .x_adv;
            }
            net->set_parameters(values, true);
            auto loss = ad::mean(batch_loss(LossKind::ce(), net->logits(ad::constant(inputs)), batch.labels));
            if (!std::isfinite(loss.item())) {
                throw RuntimeError("train_defense '" + recipe.name + "': loss diverged in epoch " +
                                   std::to_string(epoch) + " (previous epoch mean loss " +
                                   std::to_string(epoch_loss) + ")");
            }
            auto grads = ad::grad(loss, net->parameters());
            std::vector<Tensor> g;
            for (const auto& v : grads) g.push_back(v.value());
            opt.step(values, g, false);
            epoch_loss += loss.item();
            ++batches;
        }
        epoch_loss /= static_cast<double>(std::max<std::size_t>(1, batches));
        if (log) log(recipe.name + " epoch " + std::to_string(epoch + 1) + "/" + std::to_string(recipe.epochs) +
                     " loss " + std::to_string(epoch_loss));
    }
    net->set_parameters(values, false);

    DefenseCheckpoint ckpt;
    ckpt.recipe = recipe;
    const auto eval = split.test.head(recipe.eval_count);
    ckpt.metrics.eval_count = eval.size();
    ckpt.metrics.clean_accuracy = clean_accuracy(*net, eval);
    ckpt.metrics.robust_accuracy = robust_accuracy(*net, eval, recipe.reference_budget(), attacks::SignGD{},
                                                   attacks::UniformRandom{}, LossKind::ce(),
                                                   derive_seed(recipe.seed, {0x72656665ULL}));
    ckpt.hash = fingerprint(*net);
    ckpt.network = std::move(net);
    if (log) {
        log(recipe.name + " clean " + std::to_string(ckpt.metrics.clean_accuracy) + "% robust " +
            std::to_string(ckpt.metrics.robust_accuracy) + "%");
    }
    return ckpt;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) { return p.string() + ".json"; }

inline void save_defense(const std::filesystem::path& path, const DefenseCheckpoint& ckpt) {
    io::Container c;
    const auto& info = ckpt.network->info();
    c.metadata = {{"kind", "defense"},
                  {"name", info.name},
                  {"architecture", info.architecture},
                  {"num_classes", info.num_classes},
                  {"input_shape", {info.input.channels, info.input.height, info.input.width}},
                  {"recipe", ckpt.recipe},
                  {"metrics", ckpt.metrics}};
    c.arrays = ckpt.network->arrays();
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    io::save(path, c);
    json side = {{"checkpoint", path.filename().string()},
                 {"recipe", ckpt.recipe},
                 {"metrics", ckpt.metrics},
                 {"hash", ckpt.hash}};
    io::write_file_atomic(sidecar_path(path), side.dump(2) + "\n");
}

inline DefenseCheckpoint load_defense(const std::filesystem::path& path) {
    const auto side_file = sidecar_path(path);
    if (!std::filesystem::exists(side_file)) throw ConfigError("defense checkpoint has no sidecar: " + side_file.string());
    json side;
    try {
        side = json::parse(io::read_file(side_file));
    } catch (const json::exception& e) {
        throw ConfigError("bad sidecar " + side_file.string() + ": " + e.what());
    }
    const auto c = io::load(path);
    if (c.metadata.value("kind", "") != "defense") throw ConfigError(path.string() + " is not a defense checkpoint");
    const auto shape = c.metadata.at("input_shape").get<std::vector<std::size_t>>();
    DefenseCheckpoint ckpt;
    ckpt.recipe = c.metadata.at("recipe").get<DefenseRecipe>();
    ckpt.metrics = c.metadata.at("metrics").get<DefenseMetrics>();
    auto net = std::make_shared<nn::Network>(c.metadata.at("name").get<std::string>(),
                                             ImageShape{shape.at(0), shape.at(1), shape.at(2)},
                                             c.metadata.at("num_classes").get<std::size_t>(),
                                             c.metadata.at("architecture").get<std::string>(), 0,
                                             to_string(ckpt.recipe.training));
    net->load_arrays(c);
    ckpt.hash = fingerprint(*net);
    const auto expected = side.at("hash").get<std::string>();
    if (ckpt.hash != expected) {
        throw ConfigError("refusing to load " + path.string() + ": content hash " + ckpt.hash +
                          " does not match recorded " + expected);
    }
    ckpt.network = std::move(net);
    return ckpt;
}

// ---------------------------------------------------------------------------
// Pools

struct PoolMember {
    std::string role;  // "train", "test" or "any"
    DefenseCheckpoint checkpoint;

    [[nodiscard]] const std::string& name() const { return checkpoint.recipe.name; }
    [[nodiscard]] const nn::Network& network() const { return *checkpoint.network; }
};

struct Pool {
    std::vector<PoolMember> members;

    [[nodiscard]] std::size_t size() const { return members.size(); }
    [[nodiscard]] const PoolMember& at(const std::string& name) const {
        for (const auto& m : members) {
            if (m.name() == name) return m;
        }
        throw ConfigError("pool has no defense named '" + name + "'");
    }
    [[nodiscard]] std::vector<const Classifier*> classifiers() const {
        std::vector<const Classifier*> out;
        for (const auto& m : members) out.push_back(m.checkpoint.network.get());
        return out;
    }
    /// Every member except `name`.
    [[nodiscard]] Pool without(const std::string& name) const {
        Pool p;
        for (const auto& m : members) {
            if (m.name() != name) p.members.push_back(m);
        }
        if (p.size() == size()) throw ConfigError("pool has no defense named '" + name + "'");
        return p;
    }
};

/// Problems that make a pool unsuitable for meta-training; empty when fine.
inline std::vector<std::string> lint_pool(const Pool& pool) {
    std::vector<std::string> issues;
    std::set<std::string> tags;
    std::set<TrainingKind> kinds;
    for (const auto& m : pool.members) {
        tags.insert(m.checkpoint.recipe.architecture_tag);
        kinds.insert(m.checkpoint.recipe.training);
    }
    if (pool.size() < 2) issues.push_back("pool has fewer than 2 defenses");
    if (tags.size() < 2) issues.push_back("pool has fewer than 2 distinct architecture tags");
    if (kinds.size() < 2) issues.push_back("pool has fewer than 2 training kinds");
    return issues;
}

struct ManifestEntry {
    std::string name;
    std::string role = "any";
    std::filesystem::path checkpoint;
    std::optional<DefenseRecipe> recipe;
};

/// Manifest: {"defenses": [{"name", "checkpoint", "role"?, "recipe"?}]}. A
/// recipe may be inline or a path to a recipe file; relative paths resolve
/// against the manifest's directory.
inline std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("bad manifest " + path.string() + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw ConfigError(e.what());
    }
    const auto base = path.parent_path();
    auto resolve = [&](const std::string& p) { return std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base / p; };
    std::vector<ManifestEntry> out;
    try {
        for (const auto& d : j.at("defenses")) {
            ManifestEntry e;
            e.checkpoint = resolve(d.at("checkpoint").get<std::string>());
            e.role = d.value("role", e.role);
            if (e.role != "train" && e.role != "test" && e.role != "any") {
                throw ConfigError("manifest: role must be train, test or any");
            }
            if (d.contains("recipe")) {
                const auto& r = d.at("recipe");
                if (r.is_string()) {
                    e.recipe = json::parse(io::read_file(resolve(r.get<std::string>()))).get<DefenseRecipe>();
                } else {
                    e.recipe = r.get<DefenseRecipe>();
                }
            }
            e.name = d.value("name", e.recipe ? e.recipe->name : e.checkpoint.stem().string());
            out.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw ConfigError("bad manifest " + path.string() + ": " + e.what());
    }
    return out;
}

/// Loads every checkpoint, training (and saving) missing ones whose entry
/// carries a recipe.
inline Pool build_pool(const std::vector<ManifestEntry>& entries, const LogSink& log = {}) {
    if (entries.empty()) throw ConfigError("build_pool: empty manifest");
    Pool pool;
    std::set<std::string> names;
    for (const auto& e : entries) {
        DefenseCheckpoint ckpt;
        if (std::filesystem::exists(e.checkpoint)) {
            ckpt = load_defense(e.checkpoint);
        } else if (e.recipe) {
            if (log) log("training missing defense " + e.name);
            ckpt = train_defense(*e.recipe, data::load_split(e.recipe->dataset), log);
            save_defense(e.checkpoint, ckpt);
        } else {
            throw ConfigError("checkpoint " + e.checkpoint.string() + " is missing and no recipe was given");
        }
        if (ckpt.recipe.name != e.name || ckpt.network->info().name != e.name) {
            ckpt.recipe.name = e.name;
            auto renamed = std::make_shared<nn::Network>(*ckpt.network);
            renamed->mutable_info().name = e.name;
            ckpt.network = std::move(renamed);
        }
        if (!names.insert(e.name).second) throw ConfigError("manifest: duplicate defense name '" + e.name + "'");
        if (log) {
            log("pool member " + e.name + " role=" + e.role + " arch=" + ckpt.recipe.architecture_tag +
                " training=" + to_string(ckpt.recipe.training) + " hash=" + ckpt.hash.substr(0, 12));
        }
        pool.members.push_back({e.role, std::move(ckpt)});
    }
    return pool;
}

inline Pool build_pool(const std::filesystem::path& manifest, const LogSink& log = {}) {
    return build_pool(read_manifest(manifest), log);
}

}  // namespace mama::zoo
