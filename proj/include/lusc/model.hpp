#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "lusc/rng.hpp"
#include "lusc/sha256.hpp"
#include "lusc/tensor.hpp"

namespace lusc {

template <class S>
struct NamedParam {
    std::string name;
    Tensor<S> tensor;
};

// Ordered stack of parameterized layers with a batched forward contract.
// A built model is immutable during forward; the optimizer mutates parameter
// values only between steps.
template <class S>
class Model {
public:
    virtual ~Model() = default;

    // batch is [B x H x W x C]; returns logits [B x K]. `dropout_rng` may be
    // null in eval mode or when the dropout rate is zero.
    virtual Tensor<S> forward(const Tensor<S>& batch, RunMode mode, Rng* dropout_rng) = 0;

    // Stable enumeration order; checkpoints serialize in exactly this order.
    virtual std::vector<NamedParam<S>>& parameters() = 0;
    virtual const std::vector<NamedParam<S>>& parameters() const = 0;

    virtual std::pair<std::size_t, std::size_t> input_size() const = 0;
    virtual std::size_t num_classes() const = 0;

    // Canonical architecture descriptor; its hash gates checkpoint loading.
    virtual std::string architecture() const = 0;

    Digest fingerprint() const { return sha256(architecture()); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.tensor.size();
        return n;
    }
};

namespace detail {

template <class S>
Tensor<S> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<S> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<S>(rng.uniform(-bound, bound));
    return Tensor<S>::from_data(std::move(shape), std::move(data));
}

template <class S>
Tensor<S> gaussian(Shape shape, double stdev, Rng& rng) {
    std::vector<S> data(shape_numel(shape));
    for (auto& v : data) v = static_cast<S>(rng.normal(0.0, stdev));
    return Tensor<S>::from_data(std::move(shape), std::move(data));
}

}  // namespace detail

}  // namespace lusc
