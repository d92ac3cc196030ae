#pragma once

// Evaluation harness: attack campaigns over (defense x attack) grids,
// one-axis sweeps, and report emitters (aligned text tables, line-delimited
// JSON records, SVG line plots).
//
// Seeding: example i of a campaign against defense d uses
//   derive_seed(seed, {fnv1a64(d), i})
// and restart r of it uses restart_seed(that, r). The attack is deliberately
// not part of the derivation, so every attack sees the same starting points.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mama/attacks.hpp"
#include "mama/config.hpp"
#include "mama/data.hpp"
#include "mama/defense_zoo.hpp"
#include "mama/learned_opt.hpp"
#include "mama/seeding.hpp"
#include "mama/training.hpp"

namespace mama::bench {

using json = nlohmann::json;
using LogSink = std::function<void(const std::string&)>;

inline constexpr const char* kSchema = "mama.eval/1";
inline constexpr const char* kSelectionNote =
    "robust accuracy counts an example as broken if the max-loss iterate within the budget is misclassified";

// ---------------------------------------------------------------------------
// Attack specs

struct AttackSpec {
    std::string name;
    std::string rule = "signgd";  // signgd | momentum | nesterov | adam | learned
    std::string optimizer;        // checkpoint path for rule == learned
    double decay = 1.0;           // momentum / nesterov
    std::string init = "uniform"; // clean | uniform | odi
    std::size_t odi_steps = 2;
    std::string loss = "cw";      // ce | cw | dlr | mt (multi-targeted margin)
    AttackBudget budget;

    std::shared_ptr<const learned::OptimizerParams> params;  // resolved learned optimizer

    [[nodiscard]] attacks::UpdateRule update_rule() const {
        if (rule == "signgd") return attacks::SignGD{};
        if (rule == "momentum") return attacks::Momentum{decay};
        if (rule == "nesterov") return attacks::Nesterov{decay};
        if (rule == "adam") return attacks::AdamStep{};
        if (rule == "learned") {
            if (!params) throw ConfigError("attack '" + name + "': learned optimizer not loaded");
            return attacks::Learned{params};
        }
        throw ConfigError("attack '" + name + "': unknown rule '" + rule + "'");
    }

    [[nodiscard]] attacks::InitStrategy init_strategy() const {
        if (init == "clean") return attacks::CleanStart{};
        if (init == "uniform") return attacks::UniformRandom{};
        if (init == "odi") return attacks::Odi{odi_steps, std::nullopt};
        throw ConfigError("attack '" + name + "': unknown init '" + init + "'");
    }

    void validate() const {
        budget.validate();
        if (name.empty()) throw ConfigError("attack without a name");
        if (rule != "learned") (void)update_rule();
        (void)init_strategy();
        if (loss != "mt") parse_loss(loss);
        if (rule == "learned" && optimizer.empty() && !params) {
            throw ConfigError("attack '" + name + "': rule learned needs an optimizer checkpoint");
        }
        if (init == "odi" && odi_steps == 0) throw ConfigError("attack '" + name + "': odi_steps must be >= 1");
    }
};

inline json to_json(const AttackSpec& a) {
    json j = {{"name", a.name}, {"rule", a.rule}, {"init", a.init}, {"loss", a.loss},
              {"budget", config::to_json(a.budget)}};
    if (a.rule == "learned") j["optimizer"] = a.optimizer;
    if (a.rule == "momentum" || a.rule == "nesterov") j["decay"] = a.decay;
    if (a.init == "odi") j["odi_steps"] = a.odi_steps;
    return j;
}

inline AttackSpec parse_attack(const json& j, const AttackBudget& fallback, const std::filesystem::path& base) {
    return config::guarded("attack", [&] {
        AttackSpec a;
        a.rule = j.value("rule", a.rule);
        a.name = j.value("name", a.rule);
        a.optimizer = j.value("optimizer", std::string());
        if (!a.optimizer.empty() && std::filesystem::path(a.optimizer).is_relative()) {
            a.optimizer = (base / a.optimizer).string();
        }
        a.decay = j.value("decay", a.decay);
        a.init = j.value("init", a.init);
        a.odi_steps = j.value("odi_steps", a.odi_steps);
        a.loss = j.value("loss", a.loss);
        a.budget = j.contains("budget") ? config::parse_budget(j.at("budget")) : fallback;
        if (j.contains("restarts")) a.budget.restarts = j.at("restarts").get<std::size_t>();
        a.validate();
        return a;
    });
}

inline void load_optimizers(std::vector<AttackSpec>& specs) {
    std::map<std::string, std::shared_ptr<const learned::OptimizerParams>> cache;
    for (auto& a : specs) {
        if (a.rule != "learned" || a.params) continue;
        auto& p = cache[a.optimizer];
        if (!p) {
            try {
                p = std::make_shared<const learned::OptimizerParams>(learned::load_checkpoint(a.optimizer));
            } catch (const std::runtime_error& e) {
                throw ConfigError("attack '" + a.name + "': " + e.what());
            }
        }
        a.params = p;
    }
}

// ---------------------------------------------------------------------------
// Experiment config (shared by evaluate, sweep and train-optimizer)

struct ExperimentConfig {
    std::filesystem::path base_dir;
    std::filesystem::path pool_manifest;
    std::optional<data::DatasetSpec> dataset;
    AttackBudget budget;
    std::string defense;                 // BMA target
    std::vector<std::string> defenses;   // MAMA pool / evaluation filter
    training::BMAConfig bma;
    training::MAMAConfig mama;
    config::OptimizerInit optimizer_init;
    std::vector<AttackSpec> attacks;
    std::size_t sample_count = 1000;
    std::string split = "test";
    std::uint64_t seed = 0;
    std::size_t parallelism = 1;
    std::filesystem::path output_dir = "out";
    std::size_t eval_count = 500;
    // sweeps
    std::vector<double> sweep_values;
    std::vector<std::uint64_t> sweep_seeds{0};
    json raw;

    /// Hash of the raw config minus keys that cannot change results.
    [[nodiscard]] std::string hash() const {
        auto j = raw;
        if (j.is_object()) {
            j.erase("parallelism");
            j.erase("output_dir");
        }
        return config::hash_of(j);
    }
};

inline ExperimentConfig parse_experiment(const json& j, const std::filesystem::path& base_dir) {
    return config::guarded("config", [&] {
        ExperimentConfig c;
        c.raw = j;
        c.base_dir = base_dir;
        auto resolve = [&](const std::string& p) {
            return std::filesystem::path(p).is_absolute() ? std::filesystem::path(p) : base_dir / p;
        };
        if (j.contains("pool")) c.pool_manifest = resolve(j.at("pool").get<std::string>());
        if (j.contains("dataset")) c.dataset = j.at("dataset").get<data::DatasetSpec>();
        c.budget = config::parse_budget(j.value("budget", json::object()));
        c.defense = j.value("defense", std::string());
        c.defenses = j.value("defenses", std::vector<std::string>{});
        const auto bma_j = j.value("bma", json::object());
        c.bma = config::parse_bma(bma_j, c.budget.iterations);
        c.eval_count = bma_j.value("eval_count", c.eval_count);
        c.optimizer_init = config::parse_optimizer_init(bma_j);
        c.mama = config::parse_mama(j.value("mama", json::object()), c.bma);
        if (j.contains("attacks")) {
            for (const auto& a : j.at("attacks")) c.attacks.push_back(parse_attack(a, c.budget, base_dir));
            std::set<std::string> names;
            for (const auto& a : c.attacks) {
                if (!names.insert(a.name).second) throw ConfigError("duplicate attack name '" + a.name + "'");
            }
        }
        c.sample_count = j.value("sample_count", c.sample_count);
        c.split = j.value("split", c.split);
        if (c.split != "test" && c.split != "train") throw ConfigError("split must be test or train");
        c.seed = j.value("seed", c.seed);
        c.parallelism = std::max<std::size_t>(1, j.value("parallelism", c.parallelism));
        c.output_dir = resolve(j.value("output_dir", std::string("out")));
        if (j.contains("sweep")) {
            const auto& s = j.at("sweep");
            c.sweep_values = s.value("values", std::vector<double>{});
            c.sweep_seeds = s.value("seeds", c.sweep_seeds);
        }
        return c;
    });
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
    return parse_experiment(config::read_json(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// Reports

struct EvalCell {
    std::string defense;
    std::string attack;
    double robust_accuracy = 0.0;  // percent
    double clean_accuracy = 0.0;   // percent
    double mean_final_loss = 0.0;  // mean loss at the reported iterate
    double wall_seconds = 0.0;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::size_t samples = 0;
    std::string successes;  // '1' where the attack broke example i
    std::optional<std::string> error;

    bool operator==(const EvalCell&) const = default;
};

struct CurvePoint {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const CurvePoint&) const = default;
};

struct Curve {
    std::string axis;   // lambda | iterations | training-set-size | restarts | training
    std::string label;  // series name
    std::string x_label;
    std::string y_label;
    std::vector<CurvePoint> points;
    bool operator==(const Curve&) const = default;
};

struct EvalReport {
    std::string schema = kSchema;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::size_t parallelism = 1;
    std::string note = kSelectionNote;
    std::vector<EvalCell> cells;
    std::vector<Curve> curves;

    bool operator==(const EvalReport&) const = default;

    [[nodiscard]] const EvalCell& cell(const std::string& defense, const std::string& attack) const {
        for (const auto& c : cells) {
            if (c.defense == defense && c.attack == attack) return c;
        }
        throw ConfigError("report has no cell (" + defense + ", " + attack + ")");
    }
};

inline json to_json(const EvalCell& c) {
    json j = {{"record", "cell"},
              {"defense", c.defense},
              {"attack", c.attack},
              {"robust_accuracy", c.robust_accuracy},
              {"clean_accuracy", c.clean_accuracy},
              {"mean_final_loss", c.mean_final_loss},
              {"wall_seconds", c.wall_seconds},
              {"seed", c.seed},
              {"config_hash", c.config_hash},
              {"samples", c.samples},
              {"successes", c.successes}};
    j["error"] = c.error ? json(*c.error) : json(nullptr);
    return j;
}

inline json to_json(const Curve& c) {
    json pts = json::array();
    for (const auto& p : c.points) pts.push_back({p.x, p.y});
    return {{"record", "curve"}, {"axis", c.axis},       {"label", c.label},
            {"x_label", c.x_label}, {"y_label", c.y_label}, {"points", pts}};
}

/// Line-delimited records: one header, then cells, then curves.
inline std::string to_jsonl(const EvalReport& r) {
    std::ostringstream out;
    out << json{{"record", "header"},
                {"schema", r.schema},
                {"seed", r.seed},
                {"config_hash", r.config_hash},
                {"parallelism", r.parallelism},
                {"note", r.note}}
               .dump()
        << "\n";
    for (const auto& c : r.cells) out << to_json(c).dump() << "\n";
    for (const auto& c : r.curves) out << to_json(c).dump() << "\n";
    return out.str();
}

inline EvalReport parse_jsonl(const std::string& text) {
    EvalReport r;
    std::istringstream in(text);
    std::string line;
    bool header = false;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        config::guarded("report line " + std::to_string(lineno), [&] {
            const auto j = json::parse(line);
            const auto kind = j.at("record").get<std::string>();
            if (kind == "header") {
                r.schema = j.at("schema").get<std::string>();
                if (r.schema != kSchema) throw ConfigError("unsupported report schema '" + r.schema + "'");
                r.seed = j.at("seed").get<std::uint64_t>();
                r.config_hash = j.at("config_hash").get<std::string>();
                r.parallelism = j.value("parallelism", std::size_t{1});
                r.note = j.value("note", std::string());
                header = true;
            } else if (kind == "cell") {
                EvalCell c;
                c.defense = j.at("defense").get<std::string>();
                c.attack = j.at("attack").get<std::string>();
                c.robust_accuracy = j.at("robust_accuracy").get<double>();
                c.clean_accuracy = j.at("clean_accuracy").get<double>();
                c.mean_final_loss = j.at("mean_final_loss").get<double>();
                c.wall_seconds = j.at("wall_seconds").get<double>();
                c.seed = j.at("seed").get<std::uint64_t>();
                c.config_hash = j.at("config_hash").get<std::string>();
                c.samples = j.at("samples").get<std::size_t>();
                c.successes = j.at("successes").get<std::string>();
                if (!j.at("error").is_null()) c.error = j.at("error").get<std::string>();
                r.cells.push_back(std::move(c));
            } else if (kind == "curve") {
                Curve c;
                c.axis = j.at("axis").get<std::string>();
                c.label = j.at("label").get<std::string>();
                c.x_label = j.value("x_label", std::string());
                c.y_label = j.value("y_label", std::string());
                for (const auto& p : j.at("points")) c.points.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
                r.curves.push_back(std::move(c));
            } else {
                throw ConfigError("unknown record kind '" + kind + "'");
            }
            return 0;
        });
    }
    if (!header) throw ConfigError("report has no header record");
    return r;
}

inline void write_report(const std::filesystem::path& path, const EvalReport& r) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    io::write_file_atomic(path, to_jsonl(r));
}

inline EvalReport read_report(const std::filesystem::path& path) {
    try {
        return parse_jsonl(io::read_file(path));
    } catch (const ConfigError&) {
        throw;
    } catch (const std::runtime_error& e) {
        throw ConfigError(e.what());
    }
}

// ---------------------------------------------------------------------------
// Campaigns

/// Per-example seeds for one defense.
inline std::vector<std::uint64_t> example_seeds(std::uint64_t seed, const std::string& defense, std::size_t n) {
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = derive_seed(seed, {fnv1a64(defense), i});
    return s;
}

struct AttackRun {
    std::vector<char> success;
    std::vector<double> loss;
    std::vector<attacks::RestartOutcome> per_target;  // one entry, or K-1 for mt
};

/// Runs one attack spec over a batch of examples, in chunks.
inline AttackRun run_spec(const Classifier& f, const AttackSpec& spec, const data::Dataset& d,
                          std::span<const std::uint64_t> seeds, std::size_t chunk = 256) {
    AttackRun out;
    out.success.resize(d.size());
    out.loss.resize(d.size());
    const auto rule = spec.update_rule();
    const auto init = spec.init_strategy();
    for (std::size_t start = 0; start < d.size(); start += chunk) {
        const std::size_t end = std::min(d.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const auto part = d.subset(idx);
        const auto part_seeds = seeds.subspan(start, end - start);
        if (spec.loss == "mt") {
            auto mt = attacks::multi_targeted_batch(f, part.images, part.labels, spec.budget, rule, init, part_seeds);
            for (std::size_t i = 0; i < part.size(); ++i) {
                out.success[start + i] = mt.success[i];
                out.loss[start + i] = mt.best_loss[i];
            }
        } else {
            attacks::Objective obj{parse_loss(spec.loss), part.labels, {}};
            auto run = attacks::run_with_restarts_batch(f, part.images, obj, spec.budget, rule, init, part_seeds);
            for (std::size_t i = 0; i < part.size(); ++i) {
                out.success[start + i] = run.success[i];
                out.loss[start + i] = run.best_loss[i];
            }
            out.per_target.push_back(std::move(run));
        }
    }
    return out;
}

inline EvalCell evaluate_cell(const Classifier& f, const std::string& defense, const AttackSpec& spec,
                              const data::Dataset& d, std::uint64_t seed, const std::string& config_hash) {
    EvalCell cell;
    cell.defense = defense;
    cell.attack = spec.name;
    cell.seed = seed;
    cell.config_hash = config_hash;
    cell.samples = d.size();
    const auto t0 = std::chrono::steady_clock::now();
    try {
        cell.clean_accuracy = zoo::clean_accuracy(f, d);
        const auto seeds = example_seeds(seed, defense, d.size());
        auto run = run_spec(f, spec, d, seeds);
        std::size_t broken = 0;
        double loss = 0.0;
        cell.successes.resize(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            cell.successes[i] = run.success[i] ? '1' : '0';
            broken += run.success[i] ? 1 : 0;
            loss += run.loss[i];
        }
        cell.robust_accuracy =
            d.size() == 0 ? 0.0 : 100.0 * static_cast<double>(d.size() - broken) / static_cast<double>(d.size());
        cell.mean_final_loss = d.size() == 0 ? 0.0 : loss / static_cast<double>(d.size());
    } catch (const std::exception& e) {
        cell.error = e.what();
        cell.successes.clear();
    }
    cell.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return cell;
}

/// The evaluation subset: the first sample_count examples of the split.
inline data::Dataset campaign_data(const ExperimentConfig& cfg, const data::Split& split) {
    const auto& src = cfg.split == "test" ? split.test : split.train;
    if (cfg.sample_count > src.size()) {
        throw ConfigError("sample_count " + std::to_string(cfg.sample_count) + " exceeds split size " +
                          std::to_string(src.size()));
    }
    return src.head(cfg.sample_count);
}

inline std::vector<const zoo::PoolMember*> selected(const zoo::Pool& pool, const std::vector<std::string>& names) {
    std::vector<const zoo::PoolMember*> out;
    if (names.empty()) {
        for (const auto& m : pool.members) out.push_back(&m);
    } else {
        for (const auto& n : names) out.push_back(&pool.at(n));
    }
    return out;
}

/// Evaluates every attack against every selected defense on the same
/// examples. A failing cell records its error and the others proceed.
inline EvalReport run_campaign(const ExperimentConfig& cfg, const zoo::Pool& pool, const data::Split& split,
                               const LogSink& log = {}) {
    if (cfg.attacks.empty()) throw ConfigError("campaign has no attacks");
    auto specs = cfg.attacks;
    load_optimizers(specs);
    const auto d = campaign_data(cfg, split);
    const auto members = selected(pool, cfg.defenses);
    EvalReport report;
    report.seed = cfg.seed;
    report.config_hash = cfg.hash();
    report.parallelism = cfg.parallelism;

    struct Job {
        const zoo::PoolMember* member;
        const AttackSpec* spec;
    };
    std::vector<Job> jobs;
    std::map<std::string, std::string> before;
    for (const auto* m : members) {
        before[m->name()] = zoo::fingerprint(m->network());
        for (const auto& s : specs) jobs.push_back({m, &s});
    }
    std::vector<EvalCell> cells(jobs.size());
    auto work = [&](std::size_t i) {
        cells[i] = evaluate_cell(jobs[i].member->network(), jobs[i].member->name(), *jobs[i].spec, d, cfg.seed,
                                 report.config_hash);
    };
    if (cfg.parallelism <= 1) {
        for (std::size_t i = 0; i < jobs.size(); ++i) {
            work(i);
            if (log) {
                const auto& c = cells[i];
                log(c.defense + " / " + c.attack + ": " +
                    (c.error ? "error: " + *c.error : std::to_string(c.robust_accuracy) + "%"));
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> threads;
        for (std::size_t t = 0; t < cfg.parallelism; ++t) {
            threads.emplace_back([&] {
                for (std::size_t i = next++; i < jobs.size(); i = next++) work(i);
            });
        }
        for (auto& t : threads) t.join();
    }
    for (const auto* m : members) {
        if (zoo::fingerprint(m->network()) != before[m->name()]) {
            for (auto& c : cells) {
                if (c.defense == m->name()) c.error = "defense parameters changed during the campaign";
            }
        }
    }
    report.cells = std::move(cells);
    return report;
}

// ---------------------------------------------------------------------------
// Text tables

/// Defenses as rows (sorted by name), attacks as columns in first-seen
/// order; the smallest robust accuracy of each row is marked with '*'.
inline std::string table_text(const EvalReport& r) {
    std::vector<std::string> attacks_order;
    std::set<std::string> defenses;
    for (const auto& c : r.cells) {
        if (std::find(attacks_order.begin(), attacks_order.end(), c.attack) == attacks_order.end()) {
            attacks_order.push_back(c.attack);
        }
        defenses.insert(c.defense);
    }
    auto fmt = [](double v) {
        std::ostringstream s;
        s << std::fixed << std::setprecision(2) << v;
        return s.str();
    };
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> head{"defense", "clean"};
    head.insert(head.end(), attacks_order.begin(), attacks_order.end());
    rows.push_back(head);
    for (const auto& d : defenses) {
        std::vector<std::string> row{d, ""};
        double best = std::numeric_limits<double>::infinity();
        std::vector<std::optional<double>> vals;
        for (const auto& a : attacks_order) {
            std::optional<double> v;
            for (const auto& c : r.cells) {
                if (c.defense == d && c.attack == a) {
                    if (!c.error) v = c.robust_accuracy;
                    if (row[1].empty() && !c.error) row[1] = fmt(c.clean_accuracy);
                }
            }
            if (v) best = std::min(best, *v);
            vals.push_back(v);
        }
        for (const auto& v : vals) {
            if (!v) {
                row.push_back("error");
            } else {
                row.push_back(fmt(*v) + (*v == best ? "*" : " "));
            }
        }
        rows.push_back(row);
    }
    std::vector<std::size_t> width(head.size(), 0);
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    }
    std::ostringstream out;
    out << "# robust accuracy (%), '*' marks the strongest attack per defense\n";
    out << "# " << r.note << "\n";
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& row = rows[k];
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i == 0) {
                out << std::left << std::setw(static_cast<int>(width[i])) << row[i];
            } else {
                out << "  " << std::right << std::setw(static_cast<int>(width[i])) << row[i];
            }
        }
        out << "\n";
        if (k == 0) {
            std::size_t total = 0;
            for (auto w : width) total += w + 2;
            out << std::string(total - 2, '-') << "\n";
        }
    }
    for (const auto& c : r.cells) {
        if (c.error) out << "error (" << c.defense << ", " << c.attack << "): " << *c.error << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// SVG plots

inline std::string svg_escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
            case '<': o += "&lt;"; break;
            case '>': o += "&gt;"; break;
            case '&': o += "&amp;"; break;
            case '"': o += "&quot;"; break;
            default: o += c;
        }
    }
    return o;
}

/// One line chart with every curve of the given axis.
inline std::string plot_svg(const std::vector<const Curve*>& curves, const std::string& title) {
    const double w = 640, h = 420, ml = 60, mr = 170, mt = 40, mb = 50;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto* c : curves) {
        for (const auto& p : c->points) {
            if (!std::isfinite(p.x) || !std::isfinite(p.y)) continue;
            x0 = std::min(x0, p.x);
            x1 = std::max(x1, p.x);
            y0 = std::min(y0, p.y);
            y1 = std::max(y1, p.y);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto sx = [&](double x) { return ml + (x - x0) / (x1 - x0) * (w - ml - mr); };
    auto sy = [&](double y) { return h - mb - (y - y0) / (y1 - y0) * (h - mt - mb); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    std::ostringstream o;
    o << std::setprecision(6);
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << ml << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << svg_escape(title)
      << "</text>\n";
    o << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = x0 + (x1 - x0) * k / 4.0;
        const double yv = y0 + (y1 - y0) * k / 4.0;
        o << "<text x=\"" << sx(xv) << "\" y=\"" << h - mb + 16
          << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" << xv << "</text>\n";
        o << "<text x=\"" << ml - 6 << "\" y=\"" << sy(yv) + 3
          << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" << yv << "</text>\n";
    }
    if (!curves.empty()) {
        o << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12
          << "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">"
          << svg_escape(curves.front()->x_label) << "</text>\n";
        o << "<text x=\"14\" y=\"" << (mt + h - mb) / 2 << "\" font-family=\"sans-serif\" font-size=\"12\" "
          << "transform=\"rotate(-90 14 " << (mt + h - mb) / 2 << ")\" text-anchor=\"middle\">"
          << svg_escape(curves.front()->y_label) << "</text>\n";
    }
    for (std::size_t i = 0; i < curves.size(); ++i) {
        const auto* c = curves[i];
        const char* color = colors[i % 10];
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& p : c->points) {
            if (std::isfinite(p.x) && std::isfinite(p.y)) o << sx(p.x) << "," << sy(p.y) << " ";
        }
        o << "\"/>\n";
        const double ly = mt + 14 * static_cast<double>(i);
        o << "<line x1=\"" << w - mr + 10 << "\" y1=\"" << ly << "\" x2=\"" << w - mr + 28 << "\" y2=\"" << ly
          << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << w - mr + 32 << "\" y=\"" << ly + 4 << "\" font-family=\"sans-serif\" font-size=\"10\">"
          << svg_escape(c->label) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

/// Writes <dir>/<stem>-<axis>.svg for every axis present; returns the paths.
inline std::vector<std::filesystem::path> write_plots(const EvalReport& r, const std::filesystem::path& dir,
                                                      const std::string& stem) {
    std::map<std::string, std::vector<const Curve*>> by_axis;
    for (const auto& c : r.curves) by_axis[c.axis].push_back(&c);
    std::vector<std::filesystem::path> out;
    if (!by_axis.empty()) std::filesystem::create_directories(dir);
    for (const auto& [axis, curves] : by_axis) {
        const auto path = dir / (stem + "-" + axis + ".svg");
        io::write_file_atomic(path, plot_svg(curves, axis));
        out.push_back(path);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class Axis { Lambda, Iterations, TrainingSetSize, Restarts };

inline std::string to_string(Axis a) {
    switch (a) {
        case Axis::Lambda: return "lambda";
        case Axis::Iterations: return "iterations";
        case Axis::TrainingSetSize: return "training-set-size";
        case Axis::Restarts: return "restarts";
    }
    return "?";
}

inline Axis parse_axis(const std::string& s) {
    if (s == "lambda") return Axis::Lambda;
    if (s == "iterations" || s == "T") return Axis::Iterations;
    if (s == "training-set-size") return Axis::TrainingSetSize;
    if (s == "restarts") return Axis::Restarts;
    throw ConfigError("unknown sweep axis '" + s + "' (lambda, iterations, training-set-size, restarts)");
}

inline std::vector<std::size_t> positive_integers(const std::vector<double>& values, const std::string& axis) {
    std::vector<std::size_t> out;
    for (double v : values) {
        if (!(v >= 1.0) || v != std::floor(v)) throw ConfigError(axis + " sweep values must be positive integers");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

/// Robust accuracy at each horizon T (iterations axis) or restart count R
/// (restarts axis) from a single run at the largest value; best-iterate and
/// union semantics make each point equal to a dedicated run.
inline std::vector<Curve> evaluation_sweep(const ExperimentConfig& cfg, Axis axis, const zoo::Pool& pool,
                                           const data::Split& split, const LogSink& log = {}) {
    if (cfg.attacks.empty()) throw ConfigError("sweep: no attacks configured");
    const auto values = positive_integers(cfg.sweep_values, to_string(axis));
    if (values.empty()) throw ConfigError("sweep: no values");
    const auto top = *std::max_element(values.begin(), values.end());
    auto specs = cfg.attacks;
    load_optimizers(specs);
    const auto d = campaign_data(cfg, split);
    std::vector<Curve> curves;
    for (const auto* m : selected(pool, cfg.defenses)) {
        const auto seeds = example_seeds(cfg.seed, m->name(), d.size());
        for (auto spec : specs) {
            if (spec.loss == "mt") throw ConfigError("sweep: multi-targeted attacks are not supported");
            if (axis == Axis::Iterations) spec.budget.iterations = top;
            if (axis == Axis::Restarts) spec.budget.restarts = top;
            const auto run = run_spec(m->network(), spec, d, seeds);
            Curve c{to_string(axis), m->name() + "/" + spec.name,
                    axis == Axis::Iterations ? "attack iterations T" : "restarts R", "robust accuracy (%)", {}};
            for (auto v : values) {
                std::size_t broken = 0;
                std::size_t offset = 0;
                for (const auto& chunk : run.per_target) {
                    const auto rows = chunk.success.size();
                    for (std::size_t i = 0; i < rows; ++i) {
                        const bool s = axis == Axis::Iterations ? chunk.success_within(i, spec.budget.restarts, v)
                                                                : chunk.success_within(i, v, spec.budget.iterations);
                        broken += s ? 1 : 0;
                    }
                    offset += rows;
                }
                const double acc = 100.0 * static_cast<double>(offset - broken) / static_cast<double>(offset);
                c.points.push_back({static_cast<double>(v), acc});
            }
            if (log) log("sweep " + c.label + " done");
            curves.push_back(std::move(c));
        }
    }
    return curves;
}

struct TrainingSweepResult {
    std::vector<Curve> curves;
    std::vector<learned::OptimizerParams> optimizers;  // one per (value, seed), value-major
};

/// Lambda axis: training curves (iteration vs robust accuracy) per value and
/// seed. Training-set-size axis: final robust accuracy per size (values
/// above 1 are example counts, values in (0, 1] fractions of the split).
inline TrainingSweepResult training_sweep(const ExperimentConfig& cfg, Axis axis, const zoo::Pool& pool,
                                          const data::Split& split, const LogSink& log = {}) {
    if (cfg.defense.empty()) throw ConfigError("sweep: 'defense' (the training target) is required");
    if (cfg.sweep_values.empty()) throw ConfigError("sweep: no values");
    const auto& member = pool.at(cfg.defense);
    const Classifier* f = &member.network();
    const auto eval_data = split.test.head(cfg.eval_count);
    TrainingSweepResult out;
    std::map<double, Curve> size_curves;
    for (double v : cfg.sweep_values) {
        for (auto seed : cfg.sweep_seeds) {
            auto bma = cfg.bma;
            bma.seed = seed;
            data::Dataset train = split.train;
            std::string label;
            if (axis == Axis::Lambda) {
                if (!(v >= 0.0)) throw ConfigError("lambda values must be >= 0");
                bma.prior_weights.assign(cfg.budget.iterations, v);
                if (bma.eval_every == 0) bma.eval_every = std::max<std::size_t>(1, bma.max_iterations / 10);
                std::ostringstream s;
                s << "lambda=" << v << " seed=" << seed;
                label = s.str();
            } else {
                if (!(v > 0.0)) throw ConfigError("training-set-size values must be > 0");
                const auto n = v <= 1.0 ? static_cast<std::size_t>(std::llround(v * static_cast<double>(split.train.size())))
                                        : static_cast<std::size_t>(v);
                if (n == 0 || n > split.train.size()) throw ConfigError("training-set-size value out of range");
                train = split.train.head(n);
                label = "seed=" + std::to_string(seed);
            }
            auto init = cfg.optimizer_init;
            init.seed = derive_seed(init.seed, {seed});
            training::EvalSet es{f, eval_data, derive_seed(cfg.seed, {0x65766c31ULL})};
            auto result = training::train_bma(init.make(), {f}, train, cfg.budget, bma, es, log);
            if (axis == Axis::Lambda) {
                Curve c{"lambda", label, "training iteration", "robust accuracy (%)", {}};
                for (const auto& p : result.curve) {
                    if (p.robust_accuracy) c.points.push_back({static_cast<double>(p.iteration), *p.robust_accuracy});
                }
                out.curves.push_back(std::move(c));
            } else {
                auto& c = size_curves[static_cast<double>(seed)];
                c.axis = "training-set-size";
                c.label = label;
                c.x_label = "training examples";
                c.y_label = "robust accuracy (%)";
                const double acc = training::learned_robust_accuracy(result.params, *f, eval_data, cfg.budget,
                                                                     bma.loss, es.seed);
                c.points.push_back({static_cast<double>(train.size()), acc});
            }
            out.optimizers.push_back(std::move(result.params));
        }
    }
    for (auto& [_, c] : size_curves) out.curves.push_back(std::move(c));
    return out;
}

// ---------------------------------------------------------------------------
// Jobs

struct Workspace {
    zoo::Pool pool;
    data::Split split;
};

/// Builds the pool named by the config and loads its dataset (the config's
/// own dataset, else the first member's training dataset).
inline Workspace load_workspace(const ExperimentConfig& cfg, const LogSink& log = {}) {
    if (cfg.pool_manifest.empty()) throw ConfigError("config: 'pool' (a manifest path) is required");
    Workspace w;
    w.pool = zoo::build_pool(cfg.pool_manifest, log);
    const auto spec = cfg.dataset ? *cfg.dataset : w.pool.members.front().checkpoint.recipe.dataset;
    w.split = data::load_split(spec);
    for (const auto& m : w.pool.members) {
        const auto& info = m.network().info();
        if (info.input.size() != w.split.test.dim() || info.num_classes != w.split.test.num_classes) {
            throw ConfigError("defense '" + m.name() + "' does not match dataset " + spec.tag());
        }
    }
    return w;
}

enum class Mode { Bma, Mama };

inline Mode parse_mode(const std::string& s) {
    if (s == "bma") return Mode::Bma;
    if (s == "mama") return Mode::Mama;
    throw ConfigError("mode must be bma or mama");
}

/// Meta-training pool: the named defenses, else every member whose role is
/// not "test".
inline std::vector<const Classifier*> training_pool(const ExperimentConfig& cfg, const zoo::Pool& pool) {
    std::vector<const Classifier*> out;
    if (!cfg.defenses.empty()) {
        for (const auto& n : cfg.defenses) out.push_back(&pool.at(n).network());
    } else {
        for (const auto& m : pool.members) {
            if (m.role != "test") out.push_back(&m.network());
        }
    }
    if (out.empty()) throw ConfigError("no training defenses selected");
    return out;
}

struct TrainedOptimizer {
    learned::OptimizerParams params;
    std::vector<training::CurvePoint> curve;
    std::vector<training::IterationRecord> log;
};

/// BMA on cfg.defense (or the ensemble cfg.defenses), or MAMA over the
/// training pool. When out_dir is non-empty the checkpoint goes to
/// <out_dir>/<mode>.ckpt with a curve (BMA) or per-iteration log (MAMA).
inline TrainedOptimizer train_optimizer(const ExperimentConfig& cfg, Mode mode, const Workspace& w,
                                        const std::filesystem::path& out_dir = {}, const LogSink& log = {}) {
    std::optional<training::EvalSet> eval;
    if (!cfg.defense.empty() && cfg.bma.eval_every > 0) {
        eval = training::EvalSet{&w.pool.at(cfg.defense).network(), w.split.test.head(std::min(cfg.eval_count, w.split.test.size())),
                                 derive_seed(cfg.seed, {0x65766c31ULL})};
    }
    TrainedOptimizer out{cfg.optimizer_init.make(), {}, {}};
    const std::string stem = mode == Mode::Bma ? "bma" : "mama";
    if (mode == Mode::Bma) {
        std::vector<const Classifier*> defs;
        if (!cfg.defense.empty()) {
            defs.push_back(&w.pool.at(cfg.defense).network());
        } else if (!cfg.defenses.empty()) {
            for (const auto& n : cfg.defenses) defs.push_back(&w.pool.at(n).network());
        } else {
            throw ConfigError("bma: set 'defense' or 'defenses'");
        }
        auto r = training::train_bma(out.params, defs, w.split.train, cfg.budget, cfg.bma, eval, log);
        out.params = std::move(r.params);
        out.curve = std::move(r.curve);
    } else {
        const auto defs = training_pool(cfg, w.pool);
        const auto jsonl = out_dir.empty() ? std::filesystem::path() : out_dir / "mama-log.jsonl";
        if (!jsonl.empty() && std::filesystem::exists(jsonl)) std::filesystem::remove(jsonl);
        auto r = training::train_mama(out.params, cfg.mama, defs, w.split.train, cfg.budget, jsonl, eval, log);
        out.params = std::move(r.params);
        out.curve = std::move(r.curve);
        out.log = std::move(r.log);
    }
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        json extra = {{"mode", stem}, {"config_hash", cfg.hash()}, {"budget", config::to_json(cfg.budget)},
                      {"bma", config::to_json(cfg.bma)}};
        if (mode == Mode::Mama) extra["mama"] = config::to_json(cfg.mama);
        learned::save_checkpoint(out_dir / (stem + ".ckpt"), out.params, extra);
        if (!out.curve.empty()) {
            std::string text;
            for (const auto& p : out.curve) text += json(p).dump() + "\n";
            io::write_file_atomic(out_dir / (stem + "-curve.jsonl"), text);
        }
    }
    return out;
}

/// Runs a sweep and returns it as a report holding only curves.
inline EvalReport run_sweep(const ExperimentConfig& cfg, Axis axis, const Workspace& w, const LogSink& log = {}) {
    EvalReport r;
    r.seed = cfg.seed;
    r.config_hash = cfg.hash();
    r.parallelism = cfg.parallelism;
    if (axis == Axis::Iterations || axis == Axis::Restarts) {
        r.curves = evaluation_sweep(cfg, axis, w.pool, w.split, log);
    } else {
        r.curves = training_sweep(cfg, axis, w.pool, w.split, log).curves;
    }
    return r;
}

}  // namespace mama::bench
