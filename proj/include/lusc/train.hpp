#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "lusc/dataset.hpp"
#include "lusc/model.hpp"
#include "lusc/ops.hpp"
#include "lusc/optim.hpp"
#include "lusc/sha256.hpp"

namespace lusc {

// Mean categorical cross-entropy over the batch, computed in fused
// log-sum-exp form: L = (1/B) sum_i [ logsumexp(z_i) - z_i[y_i] ].
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, const std::vector<std::uint16_t>& labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    std::size_t b = logits.dim(0), k = logits.dim(1);
    for (auto y : labels) {
        if (y >= k)
            throw ValueError("cross_entropy: label " + std::to_string(y) +
                             " out of range for " + std::to_string(k) + " classes");
    }
    const auto& z = logits.data();
    auto probs = std::make_shared<std::vector<S>>(b * k);  // softmax rows, kept for backward
    S total = S(0);
    for (std::size_t i = 0; i < b; ++i) {
        const S* row = z.data() + i * k;
        S mx = row[0];
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        S denom = S(0);
        for (std::size_t j = 0; j < k; ++j) {
            S e = std::exp(row[j] - mx);
            (*probs)[i * k + j] = e;
            denom += e;
        }
        S inv = S(1) / denom;
        for (std::size_t j = 0; j < k; ++j) (*probs)[i * k + j] *= inv;
        total += mx + std::log(denom) - row[labels[i]];
    }
    total /= static_cast<S>(b);
    auto labels_copy = std::make_shared<std::vector<std::uint16_t>>(labels);
    return detail::make_op<S>({1}, {total}, {logits}, [b, k, probs, labels_copy](Node<S>& n) {
        auto& pl = n.parents[0];
        if (!detail::can_accumulate(pl)) return;
        S g = n.grad[0] / static_cast<S>(b);
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < k; ++j) {
                S delta = (j == (*labels_copy)[i]) ? S(1) : S(0);
                pl->grad[i * k + j] += g * ((*probs)[i * k + j] - delta);
            }
        }
    });
}

enum class OptimizerKind { kSgd, kAdam };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::kAdam;
    double learning_rate = 1e-3;
    double weight_decay = 1e-4;
    AdamConfig adam;
    std::size_t batch_size = 32;
    int max_epochs = 30;
    int early_stop_patience = 10;
    LrSchedule schedule{LrScheduleKind::kStep, 0.1, 20};
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate: must be > 0");
        if (weight_decay < 0.0) throw ConfigError("train.weight_decay: must be >= 0");
        if (batch_size == 0) throw ConfigError("train.batch_size: must be >= 1");
        if (max_epochs < 0) throw ConfigError("train.max_epochs: must be >= 0");
        if (early_stop_patience < 1) throw ConfigError("train.early_stop_patience: must be >= 1");
    }
};

struct EpochRecord {
    int epoch = 0;  // 1-based
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double learning_rate = 0.0;
    double wall_seconds = 0.0;
    std::string label_stream_hash;  // hash of the epoch's emitted label sequence
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
};

// Best-val-loss tracker with a patience window.
class EarlyStopper {
public:
    explicit EarlyStopper(int patience) : patience_(patience) {}

    // Returns true when training should stop after this epoch.
    bool observe(int epoch, double val_loss) {
        if (val_loss < best_loss_) {
            best_loss_ = val_loss;
            best_epoch_ = epoch;
            since_best_ = 0;
            return false;
        }
        ++since_best_;
        return since_best_ >= patience_;
    }

    bool has_best() const { return best_epoch_ != 0; }
    int best_epoch() const { return best_epoch_; }
    double best_loss() const { return best_loss_; }

private:
    int patience_;
    double best_loss_ = std::numeric_limits<double>::infinity();
    int best_epoch_ = 0;
    int since_best_ = 0;
};

// Test instrumentation: lets a harness substitute the monitored validation
// loss to script the early-stopping schedule.
struct FitHooks {
    std::function<double(int epoch, double real_val_loss)> monitored_val_loss;
};

namespace detail {

inline std::string hash_label_stream(const std::vector<std::uint32_t>& labels) {
    Sha256 h;
    h.update(labels.data(), labels.size() * sizeof(std::uint32_t));
    return hex_digest(h.finish());
}

// Eval-mode loss/accuracy over the given indices, batched sequentially.
inline std::pair<double, double> eval_loss_accuracy(Model<float>& model,
                                                    const DatasetArchive& archive,
                                                    const std::vector<std::size_t>& indices,
                                                    std::size_t batch_size) {
    NoGradScope no_grad;
    BatchStream stream(archive, indices, batch_size, 0, nullptr, model.input_size(), false);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    Batch batch;
    while (stream.next(batch)) {
        auto logits = model.forward(batch.images, RunMode::kEval, nullptr);
        auto loss = cross_entropy(logits, batch.labels);
        loss_sum += static_cast<double>(loss.item()) * batch.labels.size();
        for (std::size_t i = 0; i < batch.labels.size(); ++i)
            if (argmax_row(logits, i) == batch.labels[i]) ++correct;
        seen += batch.labels.size();
    }
    return {loss_sum / seen, static_cast<double>(correct) / seen};
}

}  // namespace detail

// Epoch loop: shuffle train split, forward/backward/update per batch, evaluate
// on the validation split, step the LR schedule, stop early on stalled
// validation loss. The best-validation-loss parameters are restored at the
// end, so the returned model is never worse than the best observed epoch.
inline TrainLog fit(Model<float>& model, const DatasetArchive& archive, const SplitSpec& split,
                    const TrainConfig& config, const AugmentationPolicy& policy,
                    const FitHooks* hooks = nullptr) {
    config.validate();
    policy.validate();
    TrainLog log;
    if (config.max_epochs == 0) return log;
    if (split.train.empty()) throw ValueError("fit: empty train split");
    if (split.val.empty()) throw ValueError("fit: empty validation split");

    Tape<float> tape;
    for (auto& p : model.parameters()) tape.watch(p.tensor);
    AdamState<float> adam_state;
    if (config.optimizer == OptimizerKind::kAdam)
        adam_state = AdamState<float>::init(model.parameters());
    Rng dropout_rng(mix_seed(config.seed, "dropout"));

    EarlyStopper stopper(config.early_stop_patience);
    std::vector<std::vector<float>> best_params;
    auto snapshot = [&]() {
        best_params.clear();
        for (const auto& p : model.parameters()) best_params.push_back(p.tensor.data());
    };

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        auto start = std::chrono::steady_clock::now();
        double lr = lr_at(config.learning_rate, config.schedule, epoch - 1, config.max_epochs);

        BatchStream stream(archive, split.train, config.batch_size,
                           mix_seed(config.seed, "shuffle", static_cast<std::uint64_t>(epoch)),
                           policy.identity() ? nullptr : &policy, model.input_size());
        std::vector<std::uint32_t> label_stream;
        double loss_sum = 0.0;
        std::size_t correct = 0, seen = 0;
        Batch batch;
        int batch_index = 0;
        while (stream.next(batch)) {
            auto logits = model.forward(batch.images, RunMode::kTrain, &dropout_rng);
            auto loss = cross_entropy(logits, batch.labels);
            if (!std::isfinite(loss.item())) {
                throw DivergenceError(epoch, batch_index,
                                      "fit: non-finite loss at epoch " + std::to_string(epoch) +
                                          ", batch " + std::to_string(batch_index));
            }
            auto grads = tape.backward(loss);
            if (config.optimizer == OptimizerKind::kAdam) {
                adam_step<float>(model.parameters(), grads, adam_state,
                                 static_cast<float>(lr), static_cast<float>(config.adam.beta1),
                                 static_cast<float>(config.adam.beta2),
                                 static_cast<float>(config.adam.eps),
                                 static_cast<float>(config.weight_decay));
            } else {
                sgd_step<float>(model.parameters(), grads, static_cast<float>(lr),
                                static_cast<float>(config.weight_decay));
            }
            loss_sum += static_cast<double>(loss.item()) * batch.labels.size();
            for (std::size_t i = 0; i < batch.labels.size(); ++i) {
                label_stream.push_back(batch.labels[i]);
                if (argmax_row(logits, i) == batch.labels[i]) ++correct;
            }
            seen += batch.labels.size();
            ++batch_index;
        }

        auto [val_loss, val_acc] = detail::eval_loss_accuracy(model, archive, split.val,
                                                              config.batch_size);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / seen;
        rec.train_accuracy = static_cast<double>(correct) / seen;
        rec.val_loss = val_loss;
        rec.val_accuracy = val_acc;
        rec.learning_rate = lr;
        rec.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        rec.label_stream_hash = detail::hash_label_stream(label_stream);
        log.epochs.push_back(rec);

        double monitored = hooks && hooks->monitored_val_loss
                               ? hooks->monitored_val_loss(epoch, val_loss)
                               : val_loss;
        bool is_best = monitored < stopper.best_loss();
        bool stop = stopper.observe(epoch, monitored);
        if (is_best) snapshot();
        if (stop) break;
    }

    if (!best_params.empty()) {
        auto& params = model.parameters();
        for (std::size_t i = 0; i < params.size(); ++i)
            params[i].tensor.mutable_data() = best_params[i];
    }
    return log;
}

// ---------------------------------------------------------------------------
// Checkpoint format, little-endian:
//   magic "LUCK" | version u32=1 | architecture fingerprint (32 bytes) |
//   parameter count u64 | f32 parameters in enumeration order |
//   state length u64 | optional optimizer state payload
// Adam state payload: kind u32=1 | step u64 | f32 m[] | f32 v[]
// ---------------------------------------------------------------------------

inline void save_checkpoint(const Model<float>& model, const AdamState<float>* state,
                            const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write("LUCK", 4);
    std::uint32_t version = 1;
    out.write(reinterpret_cast<const char*>(&version), 4);
    Digest fp = model.fingerprint();
    out.write(reinterpret_cast<const char*>(fp.data()), 32);
    std::uint64_t count = model.parameter_count();
    out.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& p : model.parameters()) {
        out.write(reinterpret_cast<const char*>(p.tensor.data().data()),
                  static_cast<std::streamsize>(p.tensor.size() * sizeof(float)));
    }
    std::uint64_t state_len = 0;
    if (state) state_len = 4 + 8 + 2 * count * sizeof(float);
    out.write(reinterpret_cast<const char*>(&state_len), 8);
    if (state) {
        std::uint32_t kind = 1;
        out.write(reinterpret_cast<const char*>(&kind), 4);
        out.write(reinterpret_cast<const char*>(&state->step), 8);
        for (const auto& m : state->m)
            out.write(reinterpret_cast<const char*>(m.data()),
                      static_cast<std::streamsize>(m.size() * sizeof(float)));
        for (const auto& v : state->v)
            out.write(reinterpret_cast<const char*>(v.data()),
                      static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failure: " + path);
}

// Loads parameters (and optimizer state when present and requested) into a
// model built from the expected architecture.
inline void load_checkpoint(const std::string& path, Model<float>& model,
                            AdamState<float>* state = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "LUCK", 4) != 0)
        throw IoError("bad checkpoint magic at byte offset 0: " + path);
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (!in || version != 1)
        throw IoError("unsupported checkpoint version at byte offset 4: " + path);
    Digest stored{};
    in.read(reinterpret_cast<char*>(stored.data()), 32);
    if (!in) throw IoError("checkpoint truncated at byte offset 8: " + path);
    Digest expected = model.fingerprint();
    if (stored != expected) {
        throw ArtifactMismatchError("checkpoint architecture fingerprint " + hex_digest(stored) +
                                    " does not match model fingerprint " + hex_digest(expected) +
                                    " (" + model.architecture() + ")");
    }
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 8);
    if (!in || count != model.parameter_count())
        throw IoError("checkpoint parameter count mismatch: " + path);
    for (auto& p : model.parameters()) {
        in.read(reinterpret_cast<char*>(p.tensor.mutable_data().data()),
                static_cast<std::streamsize>(p.tensor.size() * sizeof(float)));
        if (!in) throw IoError("checkpoint truncated reading parameters: " + path);
    }
    std::uint64_t state_len = 0;
    in.read(reinterpret_cast<char*>(&state_len), 8);
    if (!in) throw IoError("checkpoint truncated reading state length: " + path);
    if (state && state_len > 0) {
        std::uint32_t kind = 0;
        in.read(reinterpret_cast<char*>(&kind), 4);
        if (!in || kind != 1) throw IoError("unknown optimizer state kind: " + path);
        in.read(reinterpret_cast<char*>(&state->step), 8);
        state->m.clear();
        state->v.clear();
        for (const auto& p : model.parameters()) {
            std::vector<float> m(p.tensor.size());
            in.read(reinterpret_cast<char*>(m.data()),
                    static_cast<std::streamsize>(m.size() * sizeof(float)));
            state->m.push_back(std::move(m));
        }
        for (const auto& p : model.parameters()) {
            std::vector<float> v(p.tensor.size());
            in.read(reinterpret_cast<char*>(v.data()),
                    static_cast<std::streamsize>(v.size() * sizeof(float)));
            state->v.push_back(std::move(v));
        }
        if (!in) throw IoError("checkpoint truncated reading optimizer state: " + path);
    }
}

// CSV schema: epoch,train_loss,train_acc,val_loss,val_acc,lr,wall_seconds.
// A leading comment line carries the config hash for provenance.
inline void write_train_log_csv(const TrainLog& log, const std::string& path,
                                const std::string& config_hash) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
    out << "epoch,train_loss,train_acc,val_loss,val_acc,lr,wall_seconds\n";
    char buf[256];
    for (const auto& e : log.epochs) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.6f\n", e.epoch,
                      e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy,
                      e.learning_rate, e.wall_seconds);
        out << buf;
    }
    if (!out) throw IoError("write failure: " + path);
}

}  // namespace lusc
