#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lusc/model.hpp"
#include "lusc/ops.hpp"
#include "lusc/rng.hpp"
#include "lusc/tensor.hpp"

namespace lusc::testing {

template <class S>
Tensor<S> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<S> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<S>(rng.uniform(lo, hi));
    return Tensor<S>::from_data(std::move(shape), std::move(data));
}

// Central-difference gradient check. `lossfn` must rebuild the scalar loss
// from the current leaf values and be deterministic. Coordinates are sampled
// per leaf; the returned value is the worst per-coordinate error, where a
// coordinate's error is 0 if |fd - analytic| < abs_floor and the relative
// difference otherwise.
template <class S, class F>
double gradcheck(F&& lossfn, std::vector<Tensor<S>> leaves, int coords_per_leaf,
                 std::uint64_t seed, double step = 1e-5, double abs_floor = 1e-8) {
    Tape<S> tape;
    for (auto& leaf : leaves) tape.watch(leaf);
    auto loss = lossfn();
    auto grads = tape.backward(loss);

    Rng pick(seed);
    double worst = 0.0;
    for (auto& leaf : leaves) {
        auto analytic = grads.grad(leaf);
        std::size_t n = leaf.size();
        for (int c = 0; c < coords_per_leaf; ++c) {
            std::size_t i = static_cast<std::size_t>(pick.uniform_int(n));
            double x0 = leaf.mutable_data()[i];
            double h = step * std::max(1.0, std::abs(x0));
            double lp, lm;
            {
                NoGradScope no_grad;
                leaf.mutable_data()[i] = static_cast<S>(x0 + h);
                lp = static_cast<double>(lossfn().item());
                leaf.mutable_data()[i] = static_cast<S>(x0 - h);
                lm = static_cast<double>(lossfn().item());
                leaf.mutable_data()[i] = static_cast<S>(x0);
            }
            double fd = (lp - lm) / (2.0 * h);
            double g = static_cast<double>(analytic.at(i));
            double diff = std::abs(fd - g);
            double err = diff < abs_floor ? 0.0 : diff / std::max(std::abs(fd), std::abs(g));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Samples `num_coords` (parameter, element) coordinates across all leaves and
// checks them against one analytic backward pass. Used for whole-model checks
// where per-leaf sampling would be wastefully dense.
template <class S, class F>
double gradcheck_sampled(F&& lossfn, std::vector<Tensor<S>> leaves, int num_coords,
                         std::uint64_t seed, double step = 1e-5, double abs_floor = 1e-8) {
    Tape<S> tape;
    for (auto& leaf : leaves) tape.watch(leaf);
    auto loss = lossfn();
    auto grads = tape.backward(loss);

    std::size_t total = 0;
    for (const auto& leaf : leaves) total += leaf.size();
    Rng pick(seed);
    double worst = 0.0;
    for (int c = 0; c < num_coords; ++c) {
        std::size_t flat = static_cast<std::size_t>(pick.uniform_int(total));
        std::size_t li = 0;
        while (flat >= leaves[li].size()) flat -= leaves[li++].size();
        auto& leaf = leaves[li];
        double x0 = leaf.mutable_data()[flat];
        double h = step * std::max(1.0, std::abs(x0));
        double lp, lm;
        {
            NoGradScope no_grad;
            leaf.mutable_data()[flat] = static_cast<S>(x0 + h);
            lp = static_cast<double>(lossfn().item());
            leaf.mutable_data()[flat] = static_cast<S>(x0 - h);
            lm = static_cast<double>(lossfn().item());
            leaf.mutable_data()[flat] = static_cast<S>(x0);
        }
        double fd = (lp - lm) / (2.0 * h);
        double g = static_cast<double>(grads.grad(leaf).at(flat));
        double diff = std::abs(fd - g);
        double err = diff < abs_floor ? 0.0 : diff / std::max(std::abs(fd), std::abs(g));
        worst = std::max(worst, err);
    }
    return worst;
}

// One-layer softmax-regression baseline: flatten -> FC(K). Verifies that a
// dataset is linearly separable before any deep-model gate applies.
class LinearProbe : public Model<float> {
public:
    LinearProbe(std::size_t h, std::size_t w, std::size_t k, std::uint64_t seed)
        : h_(h), w_(w), k_(k) {
        Rng rng(seed);
        std::size_t in = h * w * 3;
        params_.push_back({"weight", detail::he_uniform<float>({in, k}, in, rng)});
        params_.push_back({"bias", Tensor<float>::zeros({k})});
    }

    Tensor<float> forward(const Tensor<float>& batch, RunMode, Rng*) override {
        std::size_t b = batch.dim(0);
        auto flat = reshape(batch, {b, batch.size() / b});
        return add_rowvec(matmul(flat, params_[0].tensor), params_[1].tensor);
    }

    std::vector<NamedParam<float>>& parameters() override { return params_; }
    const std::vector<NamedParam<float>>& parameters() const override { return params_; }
    std::pair<std::size_t, std::size_t> input_size() const override { return {h_, w_}; }
    std::size_t num_classes() const override { return k_; }
    std::string architecture() const override {
        return "linear;input=" + std::to_string(h_) + "x" + std::to_string(w_) +
               "x3;classes=" + std::to_string(k_);
    }

private:
    std::size_t h_, w_, k_;
    std::vector<NamedParam<float>> params_;
};

// Unique scratch directory under the system temp root; removed on destruction.
class TempDir {
public:
    TempDir() {
        auto base = std::filesystem::temp_directory_path();
        std::string tmpl = (base / "lusc_test_XXXXXX").string();
        std::vector<char> buf(tmpl.begin(), tmpl.end());
        buf.push_back('\0');
        if (!mkdtemp(buf.data())) throw std::runtime_error("mkdtemp failed");
        path_ = buf.data();
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::string& path() const { return path_; }
    std::string file(const std::string& name) const { return path_ + "/" + name; }

private:
    std::string path_;
};

}  // namespace lusc::testing
