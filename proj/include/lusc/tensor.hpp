#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lusc/error.hpp"

namespace lusc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

enum class RunMode { kTrain, kEval };

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the current thread while alive.
class NoGradScope {
public:
    NoGradScope() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradScope() { detail::grad_mode_flag() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    bool prev_;
};

// One value in the computation graph. Op results hold their operands and a
// backward rule; leaves (parameters) hold neither.
template <class S>
struct Node {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // materialized only during backward
    bool requires_grad = false;
    bool tracked = false;  // true if the node participates in some recorded graph
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backward;
};

// Dense row-major tensor over float or double. Copying a Tensor copies a
// handle; op results are never mutated after creation.
template <class S>
class Tensor {
public:
    using Scalar = S;

    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {});
    }

    static Tensor full(Shape shape, S v) {
        std::size_t n = shape_numel(shape);
        Tensor t = from_data(std::move(shape), std::vector<S>(n, v));
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<S> data) {
        auto node = std::make_shared<Node<S>>();
        std::size_t n = shape_numel(shape);
        if (data.empty()) data.assign(n, S(0));
        if (data.size() != n) {
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        node->shape = std::move(shape);
        node->value = std::move(data);
        return Tensor(std::move(node));
    }

    static Tensor scalar(S v) { return from_data({1}, {v}); }

    bool valid() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t size() const { return node_->value.size(); }

    const std::vector<S>& data() const& { return node_->value; }
    // Calling data() on a temporary returns a copy; the node would otherwise
    // die before the caller could iterate it.
    std::vector<S> data() const&& { return node_->value; }
    // In-place mutation is reserved for parameter updates between steps.
    std::vector<S>& mutable_data() { return node_->value; }

    S item() const {
        if (size() != 1) {
            throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
        }
        return node_->value[0];
    }

    S at(std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    bool tracked() const { return node_->requires_grad || node_->tracked; }

    const std::shared_ptr<Node<S>>& node() const { return node_; }

    explicit Tensor(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node<S>> node_;
};

namespace detail {

// Creates an op result. The backward rule and parent links are recorded only
// when grad mode is on and at least one operand is part of a graph.
template <class S>
Tensor<S> make_op(Shape shape, std::vector<S> value,
                  std::vector<Tensor<S>> parents,
                  std::function<void(Node<S>&)> backward) {
    auto node = std::make_shared<Node<S>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool track = false;
    if (grad_mode_flag()) {
        for (const auto& p : parents) {
            if (p.tracked()) {
                track = true;
                break;
            }
        }
    }
    if (track) {
        node->tracked = true;
        node->parents.reserve(parents.size());
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward = std::move(backward);
    }
    return Tensor<S>(std::move(node));
}

}  // namespace detail

// Gradients keyed by leaf node, produced by one backward pass.
template <class S>
class GradientMap {
public:
    void put(const Node<S>* key, Tensor<S> grad) { grads_.emplace(key, std::move(grad)); }

    bool contains(const Tensor<S>& leaf) const { return grads_.count(leaf.node().get()) != 0; }

    // Gradient of `leaf`; zeros if the leaf was not reachable from the loss.
    Tensor<S> grad(const Tensor<S>& leaf) const {
        auto it = grads_.find(leaf.node().get());
        if (it == grads_.end()) return Tensor<S>::zeros(leaf.shape());
        return it->second;
    }

private:
    std::unordered_map<const Node<S>*, Tensor<S>> grads_;
};

// Registry of the leaf (parameter) tensors one training step differentiates
// against, plus the reverse-mode driver.
template <class S>
class Tape {
public:
    Tensor<S>& watch(Tensor<S>& t) {
        t.set_requires_grad(true);
        leaves_.push_back(t);
        return t;
    }

    const std::vector<Tensor<S>>& leaves() const { return leaves_; }

    GradientMap<S> backward(const Tensor<S>& loss) const {
        if (loss.size() != 1) {
            throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        }
        // Depth-first postorder over the recorded graph: execution order is a
        // topological order, so the reverse visits each node exactly once with
        // all downstream gradients already accumulated.
        std::vector<Node<S>*> order;
        std::unordered_set<Node<S>*> seen;
        struct Frame {
            Node<S>* node;
            std::size_t next_parent;
        };
        std::vector<Frame> stack;
        Node<S>* root = loss.node().get();
        if (root->tracked || root->requires_grad) {
            stack.push_back({root, 0});
            seen.insert(root);
        }
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                Node<S>* p = f.node->parents[f.next_parent++].get();
                if ((p->tracked || p->requires_grad) && seen.insert(p).second) {
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
        for (Node<S>* n : order) n->grad.assign(n->value.size(), S(0));
        if (!order.empty()) {
            root->grad[0] = S(1);
            for (auto it = order.rbegin(); it != order.rend(); ++it) {
                Node<S>* n = *it;
                if (n->backward) n->backward(*n);
            }
        }
        GradientMap<S> grads;
        for (const auto& leaf : leaves_) {
            Node<S>* n = leaf.node().get();
            if (seen.count(n)) {
                grads.put(n, Tensor<S>::from_data(n->shape, n->grad));
            } else {
                grads.put(n, Tensor<S>::zeros(n->shape));
            }
        }
        return grads;
    }

private:
    std::vector<Tensor<S>> leaves_;
};

template <class S>
GradientMap<S> backward(const Tensor<S>& loss, const Tape<S>& tape) {
    return tape.backward(loss);
}

}  // namespace lusc
