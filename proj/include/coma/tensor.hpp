#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "coma/common.hpp"

namespace coma {

// Dense row-major tensor participating in a reverse-mode differentiation
// graph. The graph is the web of parent links hanging off each recorded
// tensor; backward() materializes a topological order from the loss and runs
// the recorded closures in reverse. Values are immutable after construction
// except for the trainer's designated in-place parameter updates.

template <typename T>
struct TensorImpl;

template <typename T>
using TensorPtr = std::shared_ptr<TensorImpl<T>>;

template <typename T>
struct TensorImpl {
    std::vector<std::size_t> shape;
    std::vector<T> value;
    std::vector<T> grad;  // sized lazily by backward(); persists on leaves
    bool requires_grad{false};
    const char* op{"leaf"};
    std::vector<TensorPtr<T>> parents;                 // empty for leaves
    std::function<void(TensorImpl<T>&)> backward_fn;  // accumulates into parents' grad
};

// count of gradient-graph records created on this thread; the evaluation
// branch must leave it unchanged
inline std::size_t& graph_record_count() {
    thread_local std::size_t count = 0;
    return count;
}

inline bool& grad_recording_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_recording_flag()) { grad_recording_flag() = false; }
    ~NoGradGuard() { grad_recording_flag() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

template <typename T>
struct Tensor {
    TensorPtr<T> impl;

    Tensor() = default;
    explicit Tensor(TensorPtr<T> p) : impl(std::move(p)) {}

    bool defined() const { return impl != nullptr; }
    const std::vector<std::size_t>& shape() const { return impl->shape; }
    std::size_t numel() const { return impl->value.size(); }
    std::size_t dim(std::size_t i) const { return impl->shape[i]; }
    std::size_t rank() const { return impl->shape.size(); }
    std::vector<T>& values() const { return impl->value; }
    std::vector<T>& grad() const { return impl->grad; }
    bool requires_grad() const { return impl && impl->requires_grad; }
    T item() const {
        if (numel() != 1) throw usage_error("item() requires a single-element tensor");
        return impl->value[0];
    }
};

template <typename T>
Tensor<T> from_values(std::vector<std::size_t> shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size())
        throw configuration_error("tensor: product(shape) != number of values");
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->value = std::move(values);
    return Tensor<T>{std::move(impl)};
}

template <typename T>
Tensor<T> full(std::vector<std::size_t> shape, T fill) {
    const std::size_t n = shape_numel(shape);
    return from_values<T>(std::move(shape), std::vector<T>(n, fill));
}

template <typename T>
Tensor<T> zeros(std::vector<std::size_t> shape) {
    return full<T>(std::move(shape), T(0));
}

// leaf with gradient storage; the optimizer owns its in-place updates
template <typename T>
Tensor<T> make_parameter(std::vector<std::size_t> shape, std::vector<T> values) {
    Tensor<T> t = from_values<T>(std::move(shape), std::move(values));
    t.impl->requires_grad = true;
    return t;
}

// Records an op result. When recording is off or no input needs gradients the
// result is a plain leaf and no graph record is allocated.
template <typename T>
Tensor<T> make_op(const char* op, std::vector<std::size_t> shape, std::vector<T> value,
                  std::vector<TensorPtr<T>> inputs,
                  std::function<void(TensorImpl<T>&)> backward_fn) {
    auto impl = std::make_shared<TensorImpl<T>>();
    impl->shape = std::move(shape);
    impl->value = std::move(value);
    if (impl->shape.empty() ? impl->value.size() != 1
                            : shape_numel(impl->shape) != impl->value.size())
        throw internal_error(std::string("make_op(") + op + "): shape/value mismatch");
    bool track = grad_recording_flag();
    if (track) {
        track = false;
        for (const auto& in : inputs)
            if (in && in->requires_grad) track = true;
    }
    if (track) {
        impl->requires_grad = true;
        impl->op = op;
        impl->parents = std::move(inputs);
        impl->backward_fn = std::move(backward_fn);
        ++graph_record_count();
    }
    return Tensor<T>{std::move(impl)};
}

// One sweep populates gradients for every tensor reachable from the loss.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw usage_error("backward: loss must be a scalar");
    if (!loss.impl->requires_grad)
        throw usage_error("backward: loss is not part of a recorded graph");

    // iterative post-order DFS; parents precede children in `order`
    std::vector<TensorImpl<T>*> order;
    std::unordered_set<TensorImpl<T>*> visited;
    struct Frame {
        TensorImpl<T>* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.impl.get(), 0});
    visited.insert(loss.impl.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorImpl<T>* p = f.node->parents[f.next_parent++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    for (auto* n : order) n->grad.assign(n->value.size(), T(0));
    loss.impl->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
    }
}

}  // namespace coma
