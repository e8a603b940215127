#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ddad/error.hpp"

namespace ddad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

inline thread_local bool grad_enabled = true;

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until the first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into `inputs`.
    std::function<void(const Node&)> backward;

    std::span<T> ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

} // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

/// Dense row-major tensor taking part in reverse-mode differentiation.
///
/// A Tensor is a shared handle: copies alias the same storage and graph node,
/// like parameters held by both a network and its optimizer. Forward results
/// are never mutated after construction; only `grad` accumulates.
template <typename T>
class Tensor {
public:
    using value_type = T;
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<detail::Node<T>>()) {
        if (numel_of(shape) != data.size()) {
            throw ShapeError("tensor: shape " + ddad::to_string(shape) + " needs " +
                             std::to_string(numel_of(shape)) + " values, got " +
                             std::to_string(data.size()));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const std::size_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
    }

    /// Wraps an op result. Graph links are recorded only when some input
    /// requires grad and recording is enabled.
    static Tensor from_op(Shape shape, std::vector<T> data, const char* op,
                          std::vector<NodePtr> inputs,
                          std::function<void(const detail::Node<T>&)> backward) {
        Tensor out(std::move(shape), std::move(data));
        const bool needs = grad_enabled() &&
                           std::any_of(inputs.begin(), inputs.end(),
                                       [](const NodePtr& n) { return n && n->requires_grad; });
        if (needs) {
            out.node_->requires_grad = true;
            out.node_->op = op;
            out.node_->inputs = std::move(inputs);
            out.node_->backward = std::move(backward);
        }
        return out;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    /// Mutable access for leaves (parameter initialization and updates).
    std::span<T> mutable_data() { return node_->data; }
    T item() const {
        if (numel() != 1) throw ContractError("tensor: item() on non-scalar " + ddad::to_string(shape()));
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value) { node_->requires_grad = value; }
    bool is_leaf() const { return !node_->backward; }
    const char* op_name() const { return node_->op; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

    const NodePtr& node() const { return node_; }

    /// Accumulates d(this)/d(t) into every reachable tensor that requires grad.
    void backward() const;

private:
    NodePtr node_;
};

template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + ddad::to_string(shape()));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS; reversing it gives a topological order.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<const detail::Node<T>*> visited;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node<T>* child = node->inputs[next++].get();
            if (child && child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node<T>& node = **it;
        if (node.backward && !node.grad.empty()) node.backward(node);
    }
}

/// A named trainable tensor, e.g. "enc.conv1.weight".
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
};

} // namespace ddad
