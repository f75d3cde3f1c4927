// Copyright (c) 2026 The bevlift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace bev {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;                 // allocated during backward when needed
    bool requires_grad = false;          // leaf flag (trainable parameter)
    bool needs_grad = false;             // requires_grad or depends on one
    std::string op;                      // producing op, for diagnostics
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;
};

/// Dense row-major tensor handle with reverse-mode autodiff.
///
/// Values are immutable after the forward pass; the tape (parents +
/// backward_fn) is built eagerly by the ops in ops.hpp and consumed by
/// backward(). Copying a TensorT copies the handle, not the buffer.
template <typename T>
class TensorT {
public:
    TensorT() = default;

    explicit TensorT(Shape shape, T fill = T(0)) : impl_(std::make_shared<TensorImpl<T>>()) {
        validate_shape(shape);
        impl_->shape = std::move(shape);
        impl_->data.assign(static_cast<std::size_t>(shape_numel(impl_->shape)), fill);
    }

    static TensorT from_data(Shape shape, std::vector<T> data) {
        validate_shape(shape);
        if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
            throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        TensorT t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(data);
        return t;
    }

    static TensorT scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }
    T* ptr() { return impl_->data.data(); }
    const T* ptr() const { return impl_->data.data(); }

    bool has_grad() const { return !impl_->grad.empty(); }
    std::vector<T>& grad() { return impl_->grad; }
    const std::vector<T>& grad() const { return impl_->grad; }

    bool requires_grad() const { return impl_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        if (impl_->parents.empty()) impl_->needs_grad = v;
        else if (v) impl_->needs_grad = true;
        return *this;
    }

    bool needs_grad() const { return impl_ && impl_->needs_grad; }
    const std::string& op() const { return impl_->op; }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("item(): tensor has shape " + shape_str(shape()));
        return impl_->data[0];
    }

    /// Flat row-major offset of a multi-index.
    std::int64_t offset(std::initializer_list<int> idx) const {
        std::int64_t off = 0;
        std::size_t k = 0;
        for (int i : idx) off = off * impl_->shape[k++] + i;
        return off;
    }
    T at(std::initializer_list<int> idx) const { return impl_->data[static_cast<std::size_t>(offset(idx))]; }
    T& at(std::initializer_list<int> idx) { return impl_->data[static_cast<std::size_t>(offset(idx))]; }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

private:
    static void validate_shape(const Shape& s) {
        for (int d : s)
            if (d <= 0) throw std::invalid_argument("tensor: non-positive extent in shape " + shape_str(s));
    }

    std::shared_ptr<TensorImpl<T>> impl_;
};

namespace autodiff {

/// Thread-local switch disabling tape construction (evaluation mode).
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Wires up a freshly computed op output: records parents and the backward
/// closure only when grad mode is on and some parent needs gradients.
template <typename T>
void attach(TensorT<T>& out, std::string op, std::vector<TensorT<T>> parents,
            std::function<void(TensorImpl<T>&)> backward_fn) {
    auto impl = out.impl();
    impl->op = std::move(op);
    if (!grad_enabled()) return;
    bool any = false;
    for (const auto& p : parents)
        if (p.needs_grad()) { any = true; break; }
    if (!any) return;
    impl->needs_grad = true;
    impl->parents.reserve(parents.size());
    for (auto& p : parents) impl->parents.push_back(p.impl());
    impl->backward_fn = std::move(backward_fn);
}

template <typename T>
void ensure_grad(TensorImpl<T>& node) {
    if (node.grad.size() != node.data.size()) node.grad.assign(node.data.size(), T(0));
}

} // namespace autodiff

/// Reverse-mode sweep from a scalar loss. Gradients of every tensor that is
/// reachable from the loss and needs them are zeroed, then populated exactly
/// once. Throws if the loss is not a finite scalar or if any backward step
/// produces a non-finite gradient (the offending op is named).
template <typename T>
void backward(const TensorT<T>& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!std::isfinite(static_cast<double>(loss.item())))
        throw std::runtime_error("backward: loss is not finite");
    if (!loss.needs_grad()) return;

    // Iterative post-order DFS -> topological order.
    std::vector<TensorImpl<T>*> topo;
    std::unordered_set<TensorImpl<T>*> visited;
    struct Frame {
        TensorImpl<T>* node;
        std::size_t next_child;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.impl().get(), 0});
    visited.insert(loss.impl().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child < f.node->parents.size()) {
            TensorImpl<T>* child = f.node->parents[f.next_child++].get();
            if (child->needs_grad && visited.insert(child).second) stack.push_back({child, 0});
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    for (auto* node : topo) {
        node->grad.assign(node->data.size(), T(0));
    }
    loss.impl()->grad[0] = T(1);

    // Reverse order: by the time a node is visited all of its consumers have
    // run, so its accumulated gradient is final and checked exactly once.
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorImpl<T>* node = *it;
        for (T g : node->grad) {
            if (!std::isfinite(static_cast<double>(g)))
                throw std::runtime_error("backward: non-finite gradient at op '" +
                                         (node->op.empty() ? std::string("leaf") : node->op) + "'");
        }
        if (node->backward_fn) node->backward_fn(*node);
    }
}

using Tensor = TensorT<float>;

/// Named model weight; frozen parameters (trainable=false) are never touched
/// by the optimizer.
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
};

inline std::int64_t count_trainable(const std::vector<Parameter>& params) {
    std::int64_t n = 0;
    for (const auto& p : params)
        if (p.trainable) n += p.value.numel();
    return n;
}

} // namespace bev
