// Command-line front end. Exit codes: 0 success, 1 configuration error,
// 2 runtime error.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "mama/bench.hpp"

namespace fs = std::filesystem;
using namespace mama;

namespace {

void log_line(const std::string& s) { std::cerr << s << "\n"; }

int train_defense_cmd(const fs::path& recipe_path, fs::path out) {
    const auto j = config::read_json(recipe_path);
    const auto recipe = config::guarded("recipe", [&] { return j.get<zoo::DefenseRecipe>(); });
    if (out.empty()) {
        out = j.contains("checkpoint") ? recipe_path.parent_path() / j.at("checkpoint").get<std::string>()
                                       : fs::path(recipe.name + ".ckpt");
    }
    const auto ckpt = zoo::train_defense(recipe, data::load_split(recipe.dataset), log_line);
    zoo::save_defense(out, ckpt);
    std::cout << recipe.name << ": clean " << ckpt.metrics.clean_accuracy << "% robust " << ckpt.metrics.robust_accuracy
              << "% (n=" << ckpt.metrics.eval_count << ") -> " << out.string() << "\n";
    return 0;
}

int build_pool_cmd(const fs::path& manifest) {
    const auto pool = zoo::build_pool(manifest, log_line);
    for (const auto& m : pool.members) {
        const auto& r = m.checkpoint.recipe;
        std::cout << m.name() << "  role=" << m.role << "  arch=" << r.architecture_tag
                  << "  training=" << zoo::to_string(r.training) << "  clean=" << m.checkpoint.metrics.clean_accuracy
                  << "  robust=" << m.checkpoint.metrics.robust_accuracy << "  hash=" << m.checkpoint.hash.substr(0, 12)
                  << "\n";
    }
    for (const auto& issue : zoo::lint_pool(pool)) std::cout << "warning: " << issue << "\n";
    return 0;
}

int train_optimizer_cmd(const std::string& mode, const fs::path& config_path, fs::path out) {
    const auto m = bench::parse_mode(mode);
    const auto cfg = bench::load_experiment(config_path);
    if (out.empty()) out = cfg.output_dir;
    const auto w = bench::load_workspace(cfg, log_line);
    const auto result = bench::train_optimizer(cfg, m, w, out, log_line);
    std::cout << "wrote " << (out / (mode + ".ckpt")).string() << "\n";
    if (!result.curve.empty() && result.curve.back().robust_accuracy) {
        std::cout << "final robust accuracy on " << cfg.defense << ": " << *result.curve.back().robust_accuracy
                  << "%\n";
    }
    return 0;
}

int evaluate_cmd(const fs::path& config_path, fs::path out) {
    const auto cfg = bench::load_experiment(config_path);
    if (out.empty()) out = cfg.output_dir / "eval.jsonl";
    const auto w = bench::load_workspace(cfg, log_line);
    const auto report = bench::run_campaign(cfg, w.pool, w.split, log_line);
    bench::write_report(out, report);
    std::cout << bench::table_text(report);
    std::cout << "wrote " << out.string() << "\n";
    for (const auto& c : report.cells) {
        if (c.error) return 2;
    }
    return 0;
}

int sweep_cmd(const std::string& axis, const fs::path& config_path, fs::path out) {
    const auto a = bench::parse_axis(axis);
    const auto cfg = bench::load_experiment(config_path);
    if (out.empty()) out = cfg.output_dir / ("sweep-" + bench::to_string(a) + ".jsonl");
    const auto w = bench::load_workspace(cfg, log_line);
    const auto report = bench::run_sweep(cfg, a, w, log_line);
    bench::write_report(out, report);
    for (const auto& p : bench::write_plots(report, out.parent_path(), out.stem().string())) {
        std::cout << "wrote " << p.string() << "\n";
    }
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int report_cmd(const fs::path& file, const std::string& format, const fs::path& out) {
    const auto report = bench::read_report(file);
    if (format == "table-text") {
        const auto text = bench::table_text(report);
        if (out.empty()) {
            std::cout << text;
        } else {
            io::write_file_atomic(out, text);
        }
    } else if (format == "structured") {
        const auto text = bench::to_jsonl(report);
        if (out.empty()) {
            std::cout << text;
        } else {
            io::write_file_atomic(out, text);
        }
    } else if (format == "plot") {
        if (report.curves.empty()) throw ConfigError("report has no curves to plot");
        const auto dir = out.empty() ? file.parent_path() : out;
        for (const auto& p : bench::write_plots(report, dir, file.stem().string())) {
            std::cout << "wrote " << p.string() << "\n";
        }
    } else {
        throw ConfigError("unknown format '" + format + "' (table-text, structured, plot)");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"learned attack optimizers: defenses, training, evaluation"};
    app.require_subcommand(1);

    std::string recipe, manifest, config, mode, axis, eval_file, format = "table-text";
    std::string out;

    auto* td = app.add_subcommand("train-defense", "train one defense from a recipe");
    td->add_option("recipe", recipe)->required();
    td->add_option("--out", out, "checkpoint path");

    auto* bp = app.add_subcommand("build-pool", "load or train every defense of a manifest");
    bp->add_option("manifest", manifest)->required();

    auto* to = app.add_subcommand("train-optimizer", "train a learned attack optimizer");
    to->add_option("--mode", mode)->required()->check(CLI::IsMember({"bma", "mama"}));
    to->add_option("config", config)->required();
    to->add_option("--out", out, "output directory");

    auto* ev = app.add_subcommand("evaluate", "run an attack campaign");
    ev->add_option("config", config)->required();
    ev->add_option("--out", out, "report path");

    auto* sw = app.add_subcommand("sweep", "vary one axis");
    sw->add_option("--axis", axis)->required()->check(
        CLI::IsMember({"lambda", "iterations", "T", "training-set-size", "restarts"}));
    sw->add_option("config", config)->required();
    sw->add_option("--out", out, "report path");

    auto* rp = app.add_subcommand("report", "render an evaluation file");
    rp->add_option("eval-file", eval_file)->required();
    rp->add_option("--format", format)->check(CLI::IsMember({"table-text", "structured", "plot"}));
    rp->add_option("--out", out, "output file (directory for plot)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (*td) return train_defense_cmd(recipe, out);
        if (*bp) return build_pool_cmd(manifest);
        if (*to) return train_optimizer_cmd(mode, config, out);
        if (*ev) return evaluate_cmd(config, out);
        if (*sw) return sweep_cmd(axis, config, out);
        if (*rp) return report_cmd(eval_file, format, out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
