// Command-line front end: import datasets, compute splits, train, evaluate,
// and run controlled side-by-side comparisons from TOML config files.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "lusc/experiment.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

lusc::ExperimentConfig load_config(const CommonArgs& args) {
    return lusc::ExperimentConfig::load(args.config_path, args.seed, args.out);
}

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
    auto* opt = cmd->add_option("--config", args.config_path, "Experiment config file (TOML)");
    if (config_required) opt->required();
    cmd->add_option("--seed", [&args](const std::vector<std::string>& v) {
        args.seed = std::stoull(v.at(0));
        return true;
    }, "Override split and train seeds");
    cmd->add_option("--out", [&args](const std::vector<std::string>& v) {
        args.out = v.at(0);
        return true;
    }, "Override the output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Land-use scene classification benchmark harness"};
    app.require_subcommand(1);

    CommonArgs import_args, split_args, train_args, eval_args, compare_args;
    std::string import_out, split_out, eval_checkpoint, eval_subset = "test";
    std::string blob_out = "blobs.lusc";
    std::uint64_t blob_seed = 7;
    std::size_t blob_per_class = 100, blob_size = 64;

    auto* cmd_import = app.add_subcommand("import", "Decode and pack a dataset archive");
    add_common(cmd_import, import_args);
    cmd_import->add_option("--archive-out", import_out, "Archive output path");

    auto* cmd_split = app.add_subcommand("split", "Compute and write the train/val/test split");
    add_common(cmd_split, split_args);
    cmd_split->add_option("--split-out", split_out, "Split JSON output path");

    auto* cmd_train = app.add_subcommand("train", "Train the configured model");
    add_common(cmd_train, train_args);

    auto* cmd_evaluate = app.add_subcommand("evaluate", "Evaluate a checkpoint on a subset");
    add_common(cmd_evaluate, eval_args);
    cmd_evaluate->add_option("--checkpoint", eval_checkpoint, "Checkpoint path")->required();
    cmd_evaluate->add_option("--subset", eval_subset, "val or test");

    auto* cmd_compare = app.add_subcommand("compare", "Train and evaluate both models side by side");
    add_common(cmd_compare, compare_args);

    auto* cmd_blobs = app.add_subcommand("make-blobs", "Write the synthetic blob archive");
    cmd_blobs->add_option("--out", blob_out, "Archive output path");
    cmd_blobs->add_option("--seed", blob_seed, "Generator seed");
    cmd_blobs->add_option("--per-class", blob_per_class, "Images per class");
    cmd_blobs->add_option("--size", blob_size, "Image height/width");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (cmd_import->parsed()) {
            auto cfg = load_config(import_args);
            std::string out = import_out.empty() ? cfg.output_dir + "/archive.lusc" : import_out;
            lusc::detail::ensure_dir(std::filesystem::path(out).parent_path().string().empty()
                                         ? "."
                                         : std::filesystem::path(out).parent_path().string());
            auto result = lusc::run_import(cfg, out);
            std::cout << "imported " << result.samples << " samples across " << result.classes
                      << " classes -> " << out << "\nfingerprint " << result.fingerprint << "\n";
        } else if (cmd_split->parsed()) {
            auto cfg = load_config(split_args);
            auto archive = lusc::resolve_dataset(cfg.dataset);
            auto spec = lusc::split(archive, cfg.split.ratios, cfg.split.seed);
            std::string out = split_out.empty() ? cfg.output_dir + "/split.json" : split_out;
            lusc::detail::ensure_dir(cfg.output_dir);
            lusc::write_split_json(spec, archive, out, cfg.config_hash);
            std::cout << "split " << archive.count() << " samples: " << spec.train.size()
                      << " train / " << spec.val.size() << " val / " << spec.test.size()
                      << " test -> " << out << "\n";
        } else if (cmd_train->parsed()) {
            auto cfg = load_config(train_args);
            auto outputs = lusc::run_train(cfg);
            std::cout << "trained " << cfg.model.type << " for " << outputs.log.epochs.size()
                      << " epochs; val accuracy "
                      << outputs.val_report.summary.accuracy << "\ncheckpoint "
                      << outputs.checkpoint_path << "\n";
        } else if (cmd_evaluate->parsed()) {
            auto cfg = load_config(eval_args);
            auto report = lusc::run_evaluate(cfg, eval_checkpoint, eval_subset);
            std::cout << "evaluated " << eval_subset << ": accuracy "
                      << report.summary.accuracy << ", macro f1 " << report.summary.macro_f1
                      << "\n";
        } else if (cmd_compare->parsed()) {
            auto cfg = load_config(compare_args);
            auto result = lusc::run_compare(cfg);
            for (const auto& m : result.models) {
                std::cout << m.name << ": accuracy " << m.test_report.summary.accuracy
                          << ", macro f1 " << m.test_report.summary.macro_f1 << ", train "
                          << m.train_wall_seconds << "s\n";
            }
            std::cout << "artifacts in " << cfg.output_dir << "\n";
        } else if (cmd_blobs->parsed()) {
            auto archive = lusc::make_blob_archive(blob_seed, blob_per_class, blob_size);
            lusc::pack_archive(archive, blob_out);
            std::cout << "wrote " << archive.count() << " blob samples -> " << blob_out << "\n";
        }
    } catch (const lusc::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const lusc::DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return 3;
    } catch (const lusc::ArtifactMismatchError& e) {
        std::cerr << "artifact mismatch: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
