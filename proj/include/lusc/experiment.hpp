#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "lusc/config.hpp"
#include "lusc/metrics.hpp"
#include "lusc/train.hpp"

namespace lusc {

inline std::unique_ptr<Model<float>> build_model(const std::string& type,
                                                 const ModelSection& section) {
    if (type == "alexnet") {
        section.alexnet.validate();
        return std::make_unique<AlexNet<float>>(section.alexnet, section.init_seed);
    }
    if (type == "vit") {
        section.vit.validate();
        return std::make_unique<ViT<float>>(section.vit, section.init_seed);
    }
    throw ConfigError("model.type: must be \"alexnet\" or \"vit\", got '" + type + "'");
}

// Resolves the dataset section to an in-memory archive.
inline DatasetArchive resolve_dataset(const DatasetSection& d) {
    if (!d.synthetic.empty())
        return make_blob_archive(d.synthetic_seed, d.synthetic_per_class, d.synthetic_size);
    if (!d.archive.empty()) return load_archive(d.archive);
    return import_dataset(d.root, d.target_h, d.target_w, d.class_filter);
}

struct ImportResult {
    std::size_t samples = 0;
    std::size_t classes = 0;
    std::string fingerprint;
};

inline ImportResult run_import(const ExperimentConfig& cfg, const std::string& out_path) {
    DatasetArchive archive = resolve_dataset(cfg.dataset);
    pack_archive(archive, out_path);
    return {archive.count(), archive.class_names.size(), hex_digest(Digest(archive.fingerprint))};
}

inline void write_split_json(const SplitSpec& spec, const DatasetArchive& archive,
                             const std::string& path, const std::string& config_hash) {
    nlohmann::ordered_json j;
    j["config_hash"] = config_hash;
    j["seed"] = spec.seed;
    j["ratios"] = spec.ratios;
    j["classes"] = archive.class_names;
    j["train"] = spec.train;
    j["val"] = spec.val;
    j["test"] = spec.test;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << j.dump(2) << "\n";
}

struct TrainOutputs {
    TrainLog log;
    EvaluationReport val_report;
    double train_wall_seconds = 0.0;
    std::string checkpoint_path;
};

namespace detail {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory: " + dir);
}

inline TrainOutputs train_one(Model<float>& model, const DatasetArchive& archive,
                              const SplitSpec& spec, const ExperimentConfig& cfg,
                              const std::string& out_dir) {
    ensure_dir(out_dir);
    auto start = std::chrono::steady_clock::now();
    TrainOutputs outputs;
    outputs.log = fit(model, archive, spec, cfg.train, cfg.augment);
    outputs.train_wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    outputs.checkpoint_path = out_dir + "/checkpoint.luck";
    save_checkpoint(model, nullptr, outputs.checkpoint_path);
    write_train_log_csv(outputs.log, out_dir + "/learning_curve.csv", cfg.config_hash);
    outputs.val_report = evaluate(model, archive, spec.val, cfg.train.batch_size);
    outputs.val_report.config_hash = cfg.config_hash;
    outputs.val_report.split_seed = spec.seed;
    {
        std::ofstream out(out_dir + "/val_report.json", std::ios::trunc);
        out << report_to_json(outputs.val_report).dump(2) << "\n";
    }
    write_confusion_csv(outputs.val_report, out_dir + "/val_confusion.csv");
    return outputs;
}

}  // namespace detail

// `train`: fit the configured model, write checkpoint + learning curve +
// validation report into the output directory.
inline TrainOutputs run_train(const ExperimentConfig& cfg) {
    if (cfg.model.type.empty()) throw ConfigError("model.type: missing required field");
    DatasetArchive archive = resolve_dataset(cfg.dataset);
    standardize(archive);
    SplitSpec spec = split(archive, cfg.split.ratios, cfg.split.seed);
    auto model = build_model(cfg.model.type, cfg.model);
    return detail::train_one(*model, archive, spec, cfg, cfg.output_dir);
}

// `evaluate`: load a checkpoint and report metrics on the chosen subset.
inline EvaluationReport run_evaluate(const ExperimentConfig& cfg,
                                     const std::string& checkpoint_path,
                                     const std::string& subset) {
    if (subset != "val" && subset != "test")
        throw ConfigError("evaluate.subset: must be \"val\" or \"test\"");
    if (cfg.model.type.empty()) throw ConfigError("model.type: missing required field");
    DatasetArchive archive = resolve_dataset(cfg.dataset);
    standardize(archive);
    SplitSpec spec = split(archive, cfg.split.ratios, cfg.split.seed);
    auto model = build_model(cfg.model.type, cfg.model);
    load_checkpoint(checkpoint_path, *model);

    const auto& indices = subset == "val" ? spec.val : spec.test;
    // Leakage guard: the evaluated subset must be disjoint from training.
    std::unordered_set<std::size_t> train_set(spec.train.begin(), spec.train.end());
    for (auto i : indices) {
        if (train_set.count(i))
            throw Error("evaluate: subset index " + std::to_string(i) + " overlaps train split");
    }

    EvaluationReport report = evaluate(*model, archive, indices, cfg.train.batch_size);
    report.config_hash = cfg.config_hash;
    report.split_seed = spec.seed;
    detail::ensure_dir(cfg.output_dir);
    {
        std::ofstream out(cfg.output_dir + "/" + subset + "_report.json", std::ios::trunc);
        out << report_to_json(report).dump(2) << "\n";
    }
    write_confusion_csv(report, cfg.output_dir + "/" + subset + "_confusion.csv");
    return report;
}

struct CompareModelResult {
    std::string name;
    EvaluationReport test_report;
    TrainLog log;
    double train_wall_seconds = 0.0;
};

struct CompareResult {
    std::vector<CompareModelResult> models;
    std::uint64_t split_seed = 0;
    std::string config_hash;
};

// `compare`: run every configured model over the identical archive, split,
// seeds, augmentation and train settings, sequentially, then emit the
// side-by-side artifacts.
inline CompareResult run_compare(const ExperimentConfig& cfg) {
    std::vector<std::string> names = cfg.compare_models;
    if (names.empty()) names = {"alexnet", "vit"};
    DatasetArchive archive = resolve_dataset(cfg.dataset);
    standardize(archive);
    SplitSpec spec = split(archive, cfg.split.ratios, cfg.split.seed);

    CompareResult result;
    result.split_seed = spec.seed;
    result.config_hash = cfg.config_hash;
    detail::ensure_dir(cfg.output_dir);

    for (const auto& name : names) {
        auto model = build_model(name, cfg.model);
        std::string model_dir = cfg.output_dir + "/" + name;
        TrainOutputs outputs = detail::train_one(*model, archive, spec, cfg, model_dir);
        CompareModelResult r;
        r.name = name;
        r.log = std::move(outputs.log);
        r.train_wall_seconds = outputs.train_wall_seconds;
        r.test_report = evaluate(*model, archive, spec.test, cfg.train.batch_size);
        r.test_report.config_hash = cfg.config_hash;
        r.test_report.split_seed = spec.seed;
        {
            std::ofstream out(model_dir + "/test_report.json", std::ios::trunc);
            out << report_to_json(r.test_report).dump(2) << "\n";
        }
        write_confusion_csv(r.test_report, model_dir + "/test_confusion.csv");
        result.models.push_back(std::move(r));
    }

    // comparison.json: macro metrics + wall seconds per model.
    nlohmann::ordered_json full;
    full["config_hash"] = cfg.config_hash;
    full["split_seed"] = spec.seed;
    for (const auto& m : result.models) {
        full["models"][m.name] = {{"accuracy", m.test_report.summary.accuracy},
                                  {"precision", m.test_report.summary.macro_precision},
                                  {"recall", m.test_report.summary.macro_recall},
                                  {"f1", m.test_report.summary.macro_f1},
                                  {"train_wall_seconds", m.train_wall_seconds}};
        std::vector<std::string> hashes;
        for (const auto& e : m.log.epochs) hashes.push_back(e.label_stream_hash);
        full["epoch_label_hashes"][m.name] = hashes;
    }
    {
        std::ofstream out(cfg.output_dir + "/comparison.json", std::ios::trunc);
        out << full.dump(2) << "\n";
    }

    // metrics.json: the deterministic subset (no wall-clock fields), suitable
    // for byte-for-byte reproducibility checks.
    nlohmann::ordered_json deterministic = full;
    for (auto& [name, entry] : deterministic["models"].items()) entry.erase("train_wall_seconds");
    {
        std::ofstream out(cfg.output_dir + "/metrics.json", std::ios::trunc);
        out << deterministic.dump(2) << "\n";
    }

    {
        std::ofstream out(cfg.output_dir + "/comparison.csv", std::ios::trunc);
        out << "# config_hash=" << cfg.config_hash << "\n";
        out << "model,accuracy,precision,recall,f1,train_wall_seconds\n";
        char buf[256];
        for (const auto& m : result.models) {
            std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g,%.9g,%.6f\n", m.name.c_str(),
                          m.test_report.summary.accuracy, m.test_report.summary.macro_precision,
                          m.test_report.summary.macro_recall, m.test_report.summary.macro_f1,
                          m.train_wall_seconds);
            out << buf;
        }
    }
    return result;
}

}  // namespace lusc
