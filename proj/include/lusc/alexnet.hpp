#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lusc/model.hpp"
#include "lusc/ops.hpp"

namespace lusc {

inline constexpr std::size_t kAlexNetInputSize = 227;

struct AlexNetConfig {
    std::size_t num_classes = 0;
    double dropout_rate = 0.5;
    // Uniform channel/neuron reduction for desk-scale variants; 1.0 is the
    // reference architecture.
    double width_scale = 1.0;

    void validate() const {
        if (num_classes < 2) throw ConfigError("model.alexnet.num_classes: must be >= 2");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("model.alexnet.dropout_rate: must be in [0,1)");
        if (!(width_scale > 0.0 && width_scale <= 1.0))
            throw ConfigError("model.alexnet.width_scale: must be in (0,1]");
        for (std::size_t base : {std::size_t(96), std::size_t(256), std::size_t(384), std::size_t(4096)}) {
            if (std::llround(width_scale * static_cast<double>(base)) < 1)
                throw ConfigError("model.alexnet.width_scale: scaled width of " +
                                  std::to_string(base) + " rounds below 1");
        }
    }

    std::size_t scaled(std::size_t base) const {
        return static_cast<std::size_t>(std::llround(width_scale * static_cast<double>(base)));
    }
};

// The eight-layer stack: five convolutions (three max pools interleaved) and
// three fully connected layers, ReLU after every conv and hidden FC.
template <class S>
class AlexNet : public Model<S> {
public:
    AlexNet(const AlexNetConfig& config, std::uint64_t init_seed) : config_(config) {
        config.validate();
        Rng rng(init_seed);
        std::size_t c1 = config.scaled(96), c2 = config.scaled(256), c3 = config.scaled(384),
                    c4 = config.scaled(384), c5 = config.scaled(256), f = config.scaled(4096);
        add_conv("conv1", 11, 3, c1, rng);
        add_conv("conv2", 5, c1, c2, rng);
        add_conv("conv3", 3, c2, c3, rng);
        add_conv("conv4", 3, c3, c4, rng);
        add_conv("conv5", 3, c4, c5, rng);
        std::size_t flat = 6 * 6 * c5;
        add_fc("fc6", flat, f, rng);
        add_fc("fc7", f, f, rng);
        add_fc("fc8", f, config.num_classes, rng);
    }

    const AlexNetConfig& config() const { return config_; }

    // Output shape of every layer for a 227x227x3 input, by shape algebra
    // alone (no parameters touched).
    static std::vector<std::pair<std::string, Shape>> layer_trace(const AlexNetConfig& config) {
        config.validate();
        std::vector<std::pair<std::string, Shape>> trace;
        std::size_t h = kAlexNetInputSize, w = kAlexNetInputSize;
        trace.emplace_back("input", Shape{h, w, 3});
        auto conv = [&](const char* name, std::size_t k, std::size_t s, std::size_t p,
                        std::size_t ch) {
            h = conv_out_extent(h, k, s, p);
            w = conv_out_extent(w, k, s, p);
            trace.emplace_back(name, Shape{h, w, ch});
        };
        auto pool = [&](const char* name, std::size_t ch) {
            h = (h - 3) / 2 + 1;
            w = (w - 3) / 2 + 1;
            trace.emplace_back(name, Shape{h, w, ch});
        };
        conv("conv1", 11, 4, 0, config.scaled(96));
        pool("pool1", config.scaled(96));
        conv("conv2", 5, 1, 2, config.scaled(256));
        pool("pool2", config.scaled(256));
        conv("conv3", 3, 1, 1, config.scaled(384));
        conv("conv4", 3, 1, 1, config.scaled(384));
        conv("conv5", 3, 1, 1, config.scaled(256));
        pool("pool5", config.scaled(256));
        trace.emplace_back("fc6", Shape{config.scaled(4096)});
        trace.emplace_back("fc7", Shape{config.scaled(4096)});
        trace.emplace_back("fc8", Shape{config.num_classes});
        return trace;
    }

    Tensor<S> forward(const Tensor<S>& batch, RunMode mode, Rng* dropout_rng) override {
        if (batch.rank() != 4 || batch.dim(1) != kAlexNetInputSize ||
            batch.dim(2) != kAlexNetInputSize || batch.dim(3) != 3) {
            throw ShapeError("alexnet: expected batch [Bx227x227x3], got " +
                             shape_str(batch.shape()));
        }
        std::size_t b = batch.dim(0);
        std::vector<Tensor<S>> rows;
        rows.reserve(b);
        std::size_t ssize = batch.size() / b;
        for (std::size_t i = 0; i < b; ++i) {
            auto sample = Tensor<S>::from_data(
                {kAlexNetInputSize, kAlexNetInputSize, 3},
                std::vector<S>(batch.data().begin() + i * ssize,
                               batch.data().begin() + (i + 1) * ssize));
            rows.push_back(forward_sample(sample, mode, dropout_rng));
        }
        return b == 1 ? rows[0] : concat_rows(rows);
    }

    // Single image [227x227x3] -> logits [1 x K].
    Tensor<S> forward_sample(const Tensor<S>& image, RunMode mode, Rng* dropout_rng) {
        if (mode == RunMode::kTrain && config_.dropout_rate > 0.0 && dropout_rng == nullptr)
            throw ValueError("alexnet: train-mode forward needs a dropout rng");
        auto x = conv2d(image, param("conv1.weight"), param("conv1.bias"), 4, 0);
        x = relu(x);
        x = maxpool2d(x, 3, 2);
        x = conv2d(x, param("conv2.weight"), param("conv2.bias"), 1, 2);
        x = relu(x);
        x = maxpool2d(x, 3, 2);
        x = conv2d(x, param("conv3.weight"), param("conv3.bias"), 1, 1);
        x = relu(x);
        x = conv2d(x, param("conv4.weight"), param("conv4.bias"), 1, 1);
        x = relu(x);
        x = conv2d(x, param("conv5.weight"), param("conv5.bias"), 1, 1);
        x = relu(x);
        x = maxpool2d(x, 3, 2);
        x = reshape(x, {std::size_t(1), x.size()});
        x = add_rowvec(matmul(x, param("fc6.weight")), param("fc6.bias"));
        x = relu(x);
        x = drop(x, mode, dropout_rng);
        x = add_rowvec(matmul(x, param("fc7.weight")), param("fc7.bias"));
        x = relu(x);
        x = drop(x, mode, dropout_rng);
        return add_rowvec(matmul(x, param("fc8.weight")), param("fc8.bias"));
    }

    std::vector<NamedParam<S>>& parameters() override { return params_; }
    const std::vector<NamedParam<S>>& parameters() const override { return params_; }

    std::pair<std::size_t, std::size_t> input_size() const override {
        return {kAlexNetInputSize, kAlexNetInputSize};
    }

    std::size_t num_classes() const override { return config_.num_classes; }

    std::string architecture() const override {
        std::ostringstream os;
        os << "alexnet;input=227x227x3"
           << ";conv=" << config_.scaled(96) << "," << config_.scaled(256) << ","
           << config_.scaled(384) << "," << config_.scaled(384) << "," << config_.scaled(256)
           << ";fc=" << config_.scaled(4096) << ";classes=" << config_.num_classes;
        return os.str();
    }

private:
    void add_conv(const std::string& name, std::size_t k, std::size_t cin, std::size_t cout,
                  Rng& rng) {
        params_.push_back({name + ".weight",
                           detail::he_uniform<S>({k, k, cin, cout}, k * k * cin, rng)});
        params_.push_back({name + ".bias", Tensor<S>::zeros({cout})});
    }

    void add_fc(const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
        params_.push_back({name + ".weight", detail::he_uniform<S>({in, out}, in, rng)});
        params_.push_back({name + ".bias", Tensor<S>::zeros({out})});
    }

    const Tensor<S>& param(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.tensor;
        throw Error("alexnet: unknown parameter " + name);
    }

    Tensor<S> drop(const Tensor<S>& x, RunMode mode, Rng* rng) {
        if (config_.dropout_rate == 0.0 || mode == RunMode::kEval) return x;
        return dropout(x, config_.dropout_rate, mode, *rng);
    }

    AlexNetConfig config_;
    std::vector<NamedParam<S>> params_;
};

}  // namespace lusc
