// act: pretrain, adapt, evaluate and sweep from a JSON experiment config.
//
//   act --config cfg.json pretrain
//   act --config cfg.json adapt [--ckpt path]
//   act eval --ckpt path --data test.csv [--head c_t1|mean_of_heads] [--json]
//   act --config cfg.json sweep --data-seeds 0,1,2 --model-seeds 7 [--jobs 3]
//   act --config cfg.json --print-config
//
// Outputs go to <output_dir>/<run_id>/. Existing outputs are an error unless --force.
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "act/act.hpp"

namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::string config_path;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed, data_seed, model_seed;
    std::size_t jobs = 1;
    bool force = false;
    bool print_config = false;
};

act::ExperimentConfig effective_config(const Globals& g) {
    if (g.config_path.empty()) throw UsageError("--config is required");
    act::ExperimentConfig c;
    try {
        c = act::load_config(g.config_path);
    } catch (const act::ConfigError& e) {
        throw UsageError(e.what());
    } catch (const act::ParseError& e) {
        throw UsageError(e.what());
    }
    if (g.out) c.output_dir = *g.out;
    if (g.seed) {
        c.domain.seed = c.split_seed = c.model.init_seed = c.pretrain.seed = c.adapt.seed = *g.seed;
    }
    if (g.data_seed) c.split_seed = *g.data_seed;
    if (g.model_seed) c.model.init_seed = c.pretrain.seed = *g.model_seed;
    try {
        c.validate();
    } catch (const act::ContractViolation& e) {
        throw UsageError(std::string("invalid config: ") + e.what());
    }
    return c;
}

fs::path run_dir(const act::ExperimentConfig& c) { return fs::path(c.output_dir) / c.run_id; }

void claim_outputs(const fs::path& dir, const std::vector<std::string>& names, bool force) {
    for (const auto& n : names)
        if (fs::exists(dir / n) && !force)
            throw std::runtime_error("refusing to overwrite " + (dir / n).string() + " (use --force)");
    fs::create_directories(dir);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string fixed4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

int cmd_pretrain(const Globals& g) {
    const auto cfg = effective_config(g);
    const auto dir = run_dir(cfg);
    claim_outputs(dir, {"source.ckpt", "pretrain.log"}, g.force);

    const auto [source, target] = act::make_domain_pair(cfg.domain);
    const auto result = act::pretrain_source(source, cfg.model, cfg.pretrain);
    act::save_checkpoint(result.checkpoint, (dir / "source.ckpt").string());

    std::string log = "config_hash " + act::config_hash(cfg) + "\n";
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e)
        log += "epoch " + std::to_string(e) + " loss " + act::detail::format_double(result.epoch_loss[e]) + "\n";
    log += "train_accuracy " + act::detail::format_double(result.train_accuracy) + "\n";
    write_text(dir / "pretrain.log", log);
    std::cout << "train_accuracy=" << fixed4(result.train_accuracy) << " checkpoint=" << (dir / "source.ckpt").string()
              << "\n";
    return 0;
}

int cmd_adapt(const Globals& g, const std::string& ckpt_flag) {
    const auto cfg = effective_config(g);
    const auto dir = run_dir(cfg);
    const std::string ckpt = ckpt_flag.empty() ? (dir / "source.ckpt").string() : ckpt_flag;
    if (!fs::exists(ckpt)) throw std::runtime_error("checkpoint not found: " + ckpt);
    const auto source_ckpt = act::load_checkpoint(ckpt);
    if (!source_ckpt.spec.same_architecture(cfg.model))
        throw std::runtime_error("checkpoint " + ckpt + " does not match the configured model architecture");
    claim_outputs(dir, {"target.ckpt", "report.json", "trace.csv", "support.csv", "test.csv"}, g.force);

    const auto [source, target] = act::make_domain_pair(cfg.domain);
    const auto split = act::sample_support(target, cfg.n_way, cfg.k_shot, cfg.split_seed);
    auto [model, report] = act::adapt(source_ckpt, split, cfg.augment, cfg.adapt);
    report.provenance.config_hash = act::config_hash(cfg);
    report.provenance.checkpoints["source"] = ckpt;
    report.provenance.checkpoints["target"] = (dir / "target.ckpt").string();
    report.provenance.seeds["domain"] = cfg.domain.seed;

    act::save_checkpoint(model, (dir / "target.ckpt").string());
    act::save_dataset(split.support, (dir / "support.csv").string());
    act::save_dataset(split.test, (dir / "test.csv").string());
    write_text(dir / "report.json", act::report_json(report, cfg).dump(2) + "\n");
    std::ofstream trace(dir / "trace.csv", std::ios::binary);
    act::write_trace_csv(trace, report);
    if (!trace) throw std::runtime_error("write failed for trace.csv");

    std::cout << "no_adapt=" << fixed4(report.no_adapt.overall_accuracy)
              << " adapted=" << fixed4(report.adapted.overall_accuracy) << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& head, bool json) {
    const auto model = act::load_checkpoint(ckpt);
    const auto set = act::load_dataset(data);
    if (set.dim != model.spec.input_dim)
        throw std::runtime_error("dimension mismatch: " + data + " has " + std::to_string(set.dim) +
                                 " features, checkpoint expects " + std::to_string(model.spec.input_dim));
    const auto m = act::evaluate(model, set, head == "mean_of_heads" ? act::EvalHead::mean_of_heads
                                                                     : act::EvalHead::c_t1);
    if (json) {
        auto j = act::to_json(m);
        j["checkpoint"] = ckpt;
        j["data"] = data;
        j["samples"] = set.size();
        std::cout << j.dump() << "\n";
    } else {
        std::cout << "accuracy=" << fixed4(m.overall_accuracy) << " macro=" << fixed4(m.per_class_mean)
                  << " samples=" << set.size() << "\n";
    }
    return 0;
}

int cmd_sweep(const Globals& g, const std::vector<std::uint64_t>& data_seeds,
              const std::vector<std::uint64_t>& model_seeds) {
    const auto cfg = effective_config(g);
    if (data_seeds.empty() || model_seeds.empty()) throw UsageError("--data-seeds and --model-seeds must be nonempty");
    const auto dir = run_dir(cfg);
    claim_outputs(dir, {"sweep.csv", "cells"}, g.force);
    const auto setup = cfg.sweep_setup();

    auto cell_dir = [&](const act::SweepCell& c) {
        return dir / "cells" / ("d" + std::to_string(c.data_seed) + "_m" + std::to_string(c.model_seed));
    };
    const auto sweep = act::seed_sweep(setup, data_seeds, model_seeds, g.jobs, [&](const act::SweepCell& c) {
        const auto d = cell_dir(c);
        fs::create_directories(d);
        nlohmann::json j{{"status", c.ok ? "ok" : "failed"},
                         {"data_seed", c.data_seed},
                         {"model_seed", c.model_seed},
                         {"no_adapt_acc", c.no_adapt_accuracy},
                         {"adapted_acc", c.adapted_accuracy},
                         {"no_adapt_macro", c.no_adapt_macro},
                         {"adapted_macro", c.adapted_macro},
                         {"error", c.error}};
        write_text(d / "cell.json", j.dump(2) + "\n");
        std::cerr << "cell data_seed=" << c.data_seed << " model_seed=" << c.model_seed << " "
                  << (c.ok ? "adapted=" + fixed4(c.adapted_accuracy) : "failed: " + c.error) << "\n";
    });

    std::ofstream csv(dir / "sweep.csv", std::ios::binary);
    act::write_sweep_csv(csv, sweep, setup);
    if (!csv) throw std::runtime_error("write failed for sweep.csv");
    if (sweep.ok_cells == 0) {
        std::cerr << "act: every sweep cell failed\n";
        return 1;
    }
    std::cout << "cells=" << sweep.cells.size() << " ok=" << sweep.ok_cells
              << " mean_adapted=" << fixed4(sweep.mean_adapted) << " spread=" << fixed4(sweep.spread) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot source-free adaptation experiments"};
    app.require_subcommand(0, 1);
    Globals g;
    app.add_option("--config", g.config_path, "Experiment config (JSON)");
    app.add_option("--out", g.out, "Override output_dir");
    app.add_option("--seed", g.seed, "Override every seed in the config");
    app.add_option("--data-seed", g.data_seed, "Override the support-split seed");
    app.add_option("--model-seed", g.model_seed, "Override the init and pretraining seeds");
    app.add_option("--jobs", g.jobs, "Parallel sweep cells")->check(CLI::PositiveNumber);
    app.add_flag("--force", g.force, "Overwrite existing outputs");
    app.add_flag("--print-config", g.print_config, "Print the effective config and exit");

    auto* pretrain = app.add_subcommand("pretrain", "Train the source model");
    auto* adapt = app.add_subcommand("adapt", "Adapt a source checkpoint to the few-shot target");
    std::string adapt_ckpt;
    adapt->add_option("--ckpt", adapt_ckpt, "Source checkpoint (default: <run dir>/source.ckpt)");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string eval_ckpt, eval_data, eval_head = "c_t1";
    bool eval_json = false;
    eval->add_option("--ckpt", eval_ckpt, "Checkpoint")->required();
    eval->add_option("--data", eval_data, "Dataset CSV")->required();
    eval->add_option("--head", eval_head, "Prediction head")->check(CLI::IsMember({"c_t1", "mean_of_heads"}));
    eval->add_flag("--json", eval_json, "Print one JSON record");

    auto* sweep = app.add_subcommand("sweep", "Run a data-seed x model-seed sweep");
    std::vector<std::uint64_t> data_seeds, model_seeds;
    sweep->add_option("--data-seeds", data_seeds, "Comma-separated support-split seeds")->delimiter(',')->required();
    sweep->add_option("--model-seeds", model_seeds, "Comma-separated model seeds")->delimiter(',')->required();
    sweep->add_option("--jobs", g.jobs, "Parallel sweep cells")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (g.print_config) {
            std::cout << act::print_config(effective_config(g));
            return 0;
        }
        if (*pretrain) return cmd_pretrain(g);
        if (*adapt) return cmd_adapt(g, adapt_ckpt);
        if (*eval) return cmd_eval(eval_ckpt, eval_data, eval_head, eval_json);
        if (*sweep) return cmd_sweep(g, data_seeds, model_seeds);
        std::cerr << app.help();
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "act: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "act: " << e.what() << "\n";
        return 1;
    }
}
