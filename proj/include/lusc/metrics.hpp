#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lusc/dataset.hpp"
#include "lusc/model.hpp"
#include "lusc/ops.hpp"

namespace lusc {

// K x K counts; rows are true classes, columns are predictions.
struct ConfusionMatrix {
    std::size_t k = 0;
    std::vector<std::int64_t> counts;
    std::vector<std::string> class_names;

    std::int64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * k + pred]; }
    std::int64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * k + pred]; }

    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }

    std::int64_t trace() const {
        std::int64_t t = 0;
        for (std::size_t i = 0; i < k; ++i) t += at(i, i);
        return t;
    }
};

inline ConfusionMatrix confusion(const std::vector<std::uint16_t>& predictions,
                                 const std::vector<std::uint16_t>& labels, std::size_t k,
                                 std::vector<std::string> class_names = {}) {
    if (predictions.size() != labels.size()) {
        throw ValueError("confusion: " + std::to_string(predictions.size()) +
                         " predictions vs " + std::to_string(labels.size()) + " labels");
    }
    ConfusionMatrix cm;
    cm.k = k;
    cm.counts.assign(k * k, 0);
    cm.class_names = std::move(class_names);
    if (cm.class_names.empty())
        for (std::size_t i = 0; i < k; ++i) cm.class_names.push_back("class" + std::to_string(i));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= k || predictions[i] >= k)
            throw ValueError("confusion: index out of range at sample " + std::to_string(i));
        ++cm.at(labels[i], predictions[i]);
    }
    return cm;
}

struct ClassMetrics {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::int64_t support = 0;
    bool zero_division = false;  // an empty denominator was hit
};

struct MetricSummary {
    std::vector<ClassMetrics> per_class;
    double accuracy = 0.0;        // trace / total
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    double micro_precision = 0.0;  // equals accuracy for single-label data
    double micro_recall = 0.0;
};

// One-vs-rest per class: TP = cm[c][c], FP = column sum minus TP,
// FN = row sum minus TP. Precision/recall with an empty denominator are 0 and
// flagged. Macro values are unweighted class means.
inline MetricSummary metrics(const ConfusionMatrix& cm) {
    std::int64_t total = cm.total();
    if (total <= 0) throw ValueError("metrics: empty confusion matrix");
    MetricSummary s;
    double psum = 0, rsum = 0, fsum = 0;
    std::int64_t tp_total = 0, fp_total = 0, fn_total = 0;
    for (std::size_t c = 0; c < cm.k; ++c) {
        std::int64_t tp = cm.at(c, c), fp = 0, fn = 0;
        for (std::size_t t = 0; t < cm.k; ++t)
            if (t != c) fp += cm.at(t, c);
        for (std::size_t p = 0; p < cm.k; ++p)
            if (p != c) fn += cm.at(c, p);
        ClassMetrics m;
        m.support = tp + fn;
        if (tp + fp > 0) m.precision = static_cast<double>(tp) / (tp + fp);
        else m.zero_division = true;
        if (tp + fn > 0) m.recall = static_cast<double>(tp) / (tp + fn);
        else m.zero_division = true;
        if (m.precision + m.recall > 0.0)
            m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
        psum += m.precision;
        rsum += m.recall;
        fsum += m.f1;
        tp_total += tp;
        fp_total += fp;
        fn_total += fn;
        s.per_class.push_back(m);
    }
    s.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(total);
    s.macro_precision = psum / static_cast<double>(cm.k);
    s.macro_recall = rsum / static_cast<double>(cm.k);
    s.macro_f1 = fsum / static_cast<double>(cm.k);
    s.micro_precision = tp_total + fp_total > 0
                            ? static_cast<double>(tp_total) / (tp_total + fp_total) : 0.0;
    s.micro_recall = tp_total + fn_total > 0
                         ? static_cast<double>(tp_total) / (tp_total + fn_total) : 0.0;
    return s;
}

struct EvaluationReport {
    ConfusionMatrix cm;
    MetricSummary summary;
    double eval_wall_seconds = 0.0;
    std::string config_hash;
    std::uint64_t split_seed = 0;
};

// Eval-mode predictions over `indices` (argmax, lowest index wins ties),
// then confusion + metrics. Wall time covers the full loop including
// batching, not the archive load.
inline EvaluationReport evaluate(Model<float>& model, const DatasetArchive& archive,
                                 const std::vector<std::size_t>& indices,
                                 std::size_t batch_size) {
    if (indices.empty()) throw ValueError("evaluate: empty index list");
    auto start = std::chrono::steady_clock::now();
    NoGradScope no_grad;
    BatchStream stream(archive, indices, batch_size, 0, nullptr, model.input_size(), false);
    std::vector<std::uint16_t> predictions, labels;
    predictions.reserve(indices.size());
    labels.reserve(indices.size());
    Batch batch;
    while (stream.next(batch)) {
        auto logits = model.forward(batch.images, RunMode::kEval, nullptr);
        for (std::size_t i = 0; i < batch.labels.size(); ++i) {
            predictions.push_back(static_cast<std::uint16_t>(argmax_row(logits, i)));
            labels.push_back(batch.labels[i]);
        }
    }
    EvaluationReport report;
    report.cm = confusion(predictions, labels, model.num_classes(), archive.class_names);
    report.summary = metrics(report.cm);
    report.eval_wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

// JSON schema:
// {"config_hash", "split_seed", "classes", "confusion", "per_class",
//  "macro", "eval_wall_seconds"}
inline nlohmann::ordered_json report_to_json(const EvaluationReport& r,
                                             bool include_wall_seconds = true) {
    nlohmann::ordered_json j;
    j["config_hash"] = r.config_hash;
    j["split_seed"] = r.split_seed;
    j["classes"] = r.cm.class_names;
    std::vector<std::vector<std::int64_t>> rows;
    for (std::size_t t = 0; t < r.cm.k; ++t) {
        std::vector<std::int64_t> row;
        for (std::size_t p = 0; p < r.cm.k; ++p) row.push_back(r.cm.at(t, p));
        rows.push_back(std::move(row));
    }
    j["confusion"] = rows;
    nlohmann::ordered_json per_class;
    std::vector<std::string> degenerate;
    for (std::size_t c = 0; c < r.cm.k; ++c) {
        const auto& m = r.summary.per_class[c];
        per_class[r.cm.class_names[c]] = {{"precision", m.precision},
                                          {"recall", m.recall},
                                          {"f1", m.f1},
                                          {"support", m.support}};
        if (m.zero_division) degenerate.push_back(r.cm.class_names[c]);
    }
    j["per_class"] = per_class;
    j["macro"] = {{"accuracy", r.summary.accuracy},
                  {"precision", r.summary.macro_precision},
                  {"recall", r.summary.macro_recall},
                  {"f1", r.summary.macro_f1}};
    if (!degenerate.empty()) j["zero_division_classes"] = degenerate;
    if (include_wall_seconds) j["eval_wall_seconds"] = r.eval_wall_seconds;
    return j;
}

// Confusion matrix CSV with class-name header row and column.
inline void write_confusion_csv(const EvaluationReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    if (!r.config_hash.empty()) out << "# config_hash=" << r.config_hash << "\n";
    out << "true\\pred";
    for (const auto& name : r.cm.class_names) out << "," << name;
    out << "\n";
    for (std::size_t t = 0; t < r.cm.k; ++t) {
        out << r.cm.class_names[t];
        for (std::size_t p = 0; p < r.cm.k; ++p) out << "," << r.cm.at(t, p);
        out << "\n";
    }
    if (!out) throw IoError("write failure: " + path);
}

}  // namespace lusc
