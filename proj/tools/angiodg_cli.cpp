// angiodg: command-line driver for data synthesis, training, channel
// importance, fine-tuning and evaluation.
//
// Exit codes: 0 success, 1 other failure, 2 configuration or input-data error, 3 numeric failure.

#include "angiodg/errors.hpp"
#include "angiodg/kernels.hpp"
#include "angiodg/pipeline.hpp"
#include "angiodg/report.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace angiodg;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "JSON configuration file (defaults apply when omitted)");
    cmd->add_option("--seed", c.seed, "Overrides run.seed");
}

pipeline::PipelineConfig resolve(const Common& c) {
    pipeline::PipelineConfig cfg = c.config.empty() ? pipeline::default_config() : pipeline::load_config(c.config);
    if (c.seed) cfg.run.seed = *c.seed;
    return cfg;
}

void write_json(const nlohmann::json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

void write_text(const std::string& s, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << s;
}

data::Dataset load_split(const fs::path& dir, const pipeline::PipelineConfig& cfg) {
    return data::ingest_dataset(dir, cfg.preprocessing);
}

// test/ as the in-domain set plus every directory under ood/.
std::vector<data::Dataset> load_eval_sets(const fs::path& root, const pipeline::PipelineConfig& cfg,
                                          std::vector<bool>& in_domain) {
    std::vector<data::Dataset> sets;
    if (fs::is_directory(root / "test")) {
        sets.push_back(load_split(root / "test", cfg));
        sets.back().name = cfg.source.name;
        in_domain.push_back(true);
    }
    if (fs::is_directory(root / "ood")) {
        std::vector<fs::path> dirs;
        for (const auto& e : fs::directory_iterator(root / "ood")) {
            if (e.is_directory()) dirs.push_back(e.path());
        }
        std::sort(dirs.begin(), dirs.end());
        for (const auto& d : dirs) {
            sets.push_back(load_split(d, cfg));
            in_domain.push_back(false);
        }
    }
    if (sets.empty()) throw ConfigError("no test/ or ood/ datasets under " + root.string());
    return sets;
}

void save_generated(const pipeline::GeneratedData& g, const fs::path& out) {
    data::save_dataset(g.source.train, out / "train");
    data::save_dataset(g.source.val, out / "val");
    data::save_dataset(g.source.test, out / "test");
    for (const auto& d : g.ood) data::save_dataset(d, out / "ood" / d.name);
}

void save_tables(const std::vector<pipeline::EvaluationTable>& tables, const fs::path& out) {
    const std::string text = report::format_table(tables);
    std::cout << text;
    write_text(text, out / "results_table.txt");
    report::write_table_csv(tables, out / "results.csv");
}

int run(int argc, char** argv) {
    CLI::App app{"Single-source domain generalization for vessel segmentation"};
    app.require_subcommand(1);
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error");

    Common c;
    std::string out = "out", data_dir, checkpoint, importance_path, method = "angiodg", image;
    std::vector<std::string> results;
    bool baseline = false;
    std::size_t index = 0;

    auto* synth = app.add_subcommand("synth-data", "Generate source splits and out-of-domain sets");
    add_common(synth, c);
    synth->add_option("--out", out, "Output directory")->required();

    auto* train = app.add_subcommand("train", "Initial training on the source domain");
    add_common(train, c);
    train->add_option("--data", data_dir, "Directory with train/ and val/")->required();
    train->add_option("--out", out, "Output directory")->required();
    train->add_flag("--baseline", baseline, "Disable the whitening term");

    auto* imp = app.add_subcommand("importance", "Channel-drop sweep of the first layer");
    add_common(imp, c);
    imp->add_option("--checkpoint", checkpoint, "Initial checkpoint")->required();
    imp->add_option("--data", data_dir, "Directory with val/")->required();
    imp->add_option("--out", out, "Output directory")->required();

    auto* viz = app.add_subcommand("channel-viz", "Overlay high first-layer responses per channel");
    add_common(viz, c);
    viz->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
    viz->add_option("--data", data_dir, "Dataset directory (with images/ and masks/)");
    viz->add_option("--image", image, "Single grayscale image");
    viz->add_option("--index", index, "Sample index within --data");
    viz->add_option("--out", out, "Output directory")->required();

    auto* ft = app.add_subcommand("finetune", "Importance-weighted attention fine-tuning");
    add_common(ft, c);
    ft->add_option("--checkpoint", checkpoint, "Initial checkpoint")->required();
    ft->add_option("--importance", importance_path, "channel_importance.json")->required();
    ft->add_option("--data", data_dir, "Directory with train/ and val/")->required();
    ft->add_option("--out", out, "Output directory")->required();

    auto* ev = app.add_subcommand("evaluate", "Score a checkpoint on test/ and ood/*");
    add_common(ev, c);
    ev->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
    ev->add_option("--data", data_dir, "Data directory")->required();
    ev->add_option("--method", method, "Row label in the results table");
    ev->add_option("--out", out, "Output directory")->required();

    auto* rep = app.add_subcommand("report", "Combine evaluation results into one table and figures");
    add_common(rep, c);
    rep->add_option("--results", results, "evaluation_*.json files")->required();
    rep->add_option("--out", out, "Output directory")->required();

    auto* exp = app.add_subcommand("experiment", "Generate data, run baseline and full method, evaluate both");
    add_common(exp, c);
    exp->add_option("--out", out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    spdlog::set_level(spdlog::level::from_str(log_level));
    spdlog::debug("kernel ISA: {}", kernels::isa_name(kernels::active_isa()));

    const pipeline::PipelineConfig cfg = resolve(c);
    const fs::path out_dir(out);

    if (*synth) {
        const auto g = pipeline::generate_data(cfg, cfg.run.seed);
        save_generated(g, out_dir);
        write_json(pipeline::to_json(cfg), out_dir / "config.json");
        spdlog::info("wrote {} train / {} val / {} test and {} OOD sets to {}", g.source.train.size(),
                     g.source.val.size(), g.source.test.size(), g.ood.size(), out_dir.string());
    } else if (*train) {
        pipeline::RunConfig run = cfg.run;
        if (baseline) run.whitening = false;
        const auto tr = load_split(fs::path(data_dir) / "train", cfg);
        const auto va = load_split(fs::path(data_dir) / "val", cfg);
        const auto ckpt = pipeline::train_initial(run, cfg.net, tr, va);
        const std::string stem = baseline ? "baseline" : "initial";
        pipeline::save_checkpoint(ckpt, out_dir / (stem + ".ckpt.json"));
        report::write_history_csv(ckpt.history, out_dir / (stem + "_history.csv"));
        report::write_png(report::plot_history(ckpt.history), out_dir / (stem + "_history.png"));
        report::write_png(report::plot_beta_schedule(run.anneal_start, run.total_epochs), out_dir / "beta_schedule.png");
        spdlog::info("best epoch {} with validation Dice {:.4f}", ckpt.epoch, ckpt.best_val_dice);
    } else if (*imp) {
        const auto ckpt = pipeline::load_checkpoint(checkpoint);
        const auto va = load_split(fs::path(data_dir) / "val", cfg);
        const auto rep_ = pipeline::run_importance(ckpt, va, {cfg.run.zeta}, cfg.run.batch_size);
        importance::save_report(rep_, out_dir / "channel_importance.json");
        report::write_importance_csv(rep_, out_dir / "channel_drop_curves.csv");
        report::write_png(report::plot_importance(rep_), out_dir / "channel_drop_curves.png");
        spdlog::info("importance sweep: {} validation passes", rep_.evaluations);
    } else if (*viz) {
        const auto ckpt = pipeline::load_checkpoint(checkpoint);
        auto net = pipeline::restore(ckpt);
        cv::Mat img;
        if (!image.empty()) {
            img = cv::imread(image, cv::IMREAD_GRAYSCALE);
            if (img.empty()) throw ConfigError("cannot read image " + image);
        } else if (!data_dir.empty()) {
            const auto ds = load_split(data_dir, cfg);
            if (index >= ds.size()) throw ConfigError("--index out of range");
            img = ds.samples[index].image;
        } else {
            throw ConfigError("channel-viz needs --image or --data");
        }
        const auto overlays = report::channel_overlays(net, img);
        for (std::size_t i = 0; i < overlays.size(); ++i) {
            report::write_png(overlays[i], out_dir / fmt::format("channel_{:02d}.png", i));
        }
        report::write_png(report::tile(overlays, 4), out_dir / "channels.png");
    } else if (*ft) {
        const auto ckpt = pipeline::load_checkpoint(checkpoint);
        const auto rep_ = importance::load_report(importance_path);
        const auto tr = load_split(fs::path(data_dir) / "train", cfg);
        const auto va = load_split(fs::path(data_dir) / "val", cfg);
        pipeline::TrainHooks hooks;
        hooks.on_snapshot = [&](int epoch, const nlohmann::json& state) {
            write_json(state, out_dir / "snapshots" / fmt::format("epoch_{:03d}.json", epoch));
        };
        const auto res = pipeline::finetune(ckpt, rep_, cfg.run, tr, va, cfg.plateau, hooks);
        pipeline::save_checkpoint(res.selected, out_dir / "finetuned.ckpt.json");
        report::write_history_csv(res.selected.history, out_dir / "finetune_history.csv");
        spdlog::info("selected fine-tune epoch {}{} with validation Dice {:.4f}", res.selected.epoch,
                     res.decision.fallback ? " (no plateau, best Dice)" : "", res.selected.best_val_dice);
    } else if (*ev) {
        const auto ckpt = pipeline::load_checkpoint(checkpoint);
        auto net = pipeline::restore(ckpt);
        std::vector<bool> in_domain;
        const auto sets = load_eval_sets(data_dir, cfg, in_domain);
        std::vector<pipeline::NamedDataset> named;
        for (std::size_t i = 0; i < sets.size(); ++i) named.push_back({&sets[i], in_domain[i]});
        const auto table = pipeline::evaluate(net, method, named, cfg.run.batch_size);
        write_json(pipeline::to_json(table), out_dir / ("evaluation_" + method + ".json"));
        report::write_per_image_csv(table, out_dir / ("per_image_" + method + ".csv"));
        save_tables({table}, out_dir);
    } else if (*rep) {
        std::vector<pipeline::EvaluationTable> tables;
        for (const auto& r : results) {
            std::ifstream in(r);
            if (!in) throw ConfigError("cannot read " + r);
            try {
                tables.push_back(pipeline::evaluation_from_json(nlohmann::json::parse(in)));
            } catch (const nlohmann::json::parse_error& e) {
                throw ConfigError(r + ": " + e.what());
            }
        }
        save_tables(tables, out_dir);
        report::write_png(report::plot_beta_schedule(cfg.run.anneal_start, cfg.run.total_epochs),
                          out_dir / "beta_schedule.png");
    } else if (*exp) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto g = pipeline::generate_data(cfg, cfg.run.seed);
        const auto r = pipeline::run_experiment(cfg, g);
        write_json(pipeline::to_json(cfg), out_dir / "config.json");
        pipeline::save_checkpoint(r.baseline, out_dir / "baseline.ckpt.json");
        pipeline::save_checkpoint(r.initial, out_dir / "initial.ckpt.json");
        pipeline::save_checkpoint(r.finetuned.selected, out_dir / "finetuned.ckpt.json");
        importance::save_report(r.importance, out_dir / "channel_importance.json");
        report::write_importance_csv(r.importance, out_dir / "channel_drop_curves.csv");
        report::write_png(report::plot_importance(r.importance), out_dir / "channel_drop_curves.png");
        report::write_png(report::plot_beta_schedule(cfg.run.anneal_start, cfg.run.total_epochs),
                          out_dir / "beta_schedule.png");
        write_json(pipeline::to_json(r.baseline_table), out_dir / "evaluation_baseline.json");
        write_json(pipeline::to_json(r.angiodg_table), out_dir / "evaluation_angiodg.json");
        save_tables({r.baseline_table, r.angiodg_table}, out_dir);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        spdlog::info("experiment finished in {:.1f} s", secs);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        spdlog::error("configuration error: {}", e.what());
        return 2;
    } catch (const IngestionError& e) {
        spdlog::error("input data error: {}", e.what());
        return 2;
    } catch (const NumericError& e) {
        spdlog::error("numeric failure: {}", e.what());
        return 3;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
}
