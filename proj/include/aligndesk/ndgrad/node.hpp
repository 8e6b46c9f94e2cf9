// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode graph. A Node owns its value and (lazily) its adjoint; interior
// nodes keep their parents and a backward closure until backward() runs, after
// which the tape is released. Leaves that require gradients keep their
// adjoint until zero_grad().

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/array.hpp"

namespace aligndesk {

template <class T>
struct Node;

template <class T>
using VarT = std::shared_ptr<Node<T>>;

using Var = VarT<float>;
using VarD = VarT<double>;

namespace detail {
inline thread_local bool grad_mode_enabled = true;
}  // namespace detail

/// Disables graph recording on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_enabled) {
        detail::grad_mode_enabled = false;
    }
    ~NoGradGuard() { detail::grad_mode_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() noexcept { return detail::grad_mode_enabled; }

template <class T>
struct Node {
    using BackwardFn = std::function<void(Node&)>;

    BasicArray<T> value;
    bool requires_grad = false;
    bool leaf = true;

    std::vector<VarT<T>> parents;
    BackwardFn backward_fn;

    const Shape& shape() const noexcept { return value.shape(); }

    bool has_adjoint() const noexcept { return adjoint_ready_; }

    /// Adjoint buffer, zero-allocated on first use.
    BasicArray<T>& adjoint() {
        if (!adjoint_ready_) {
            adjoint_ = BasicArray<T>(value.shape());
            adjoint_ready_ = true;
        }
        return adjoint_;
    }

    /// Read-only view; zeros when nothing has been accumulated.
    BasicArray<T> adjoint_or_zero() const {
        return adjoint_ready_ ? adjoint_ : BasicArray<T>(value.shape());
    }

    void zero_adjoint() {
        adjoint_ = BasicArray<T>();
        adjoint_ready_ = false;
        populated = false;
    }

    // Set on requires_grad leaves by backward(); a second backward into the
    // same leaf before zero_adjoint() is a contract violation.
    bool populated = false;
    bool released = false;

private:
    BasicArray<T> adjoint_;
    bool adjoint_ready_ = false;
};

template <class T>
VarT<T> constant(BasicArray<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    return n;
}

template <class T>
VarT<T> parameter(BasicArray<T> value) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = true;
    return n;
}

/// Builds an interior node. The closure is kept only when some parent needs
/// gradients and recording is enabled.
template <class T>
VarT<T> make_result(BasicArray<T> value, std::vector<VarT<T>> parents,
                    typename Node<T>::BackwardFn fn, const char* op) {
    require_finite(value, op);
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->leaf = false;
    if (!grad_enabled()) return n;
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return n;
}

/// Reverse sweep from a scalar root. Every reachable requires_grad leaf ends
/// with a populated adjoint; interior nodes are released afterwards.
template <class T>
void backward(const VarT<T>& root) {
    if (!root) throw ContractError("backward on null node");
    if (root->released) {
        throw ContractError("backward called on an already released graph");
    }
    if (root->value.size() != 1) {
        throw ContractError("backward root must be scalar, got shape " +
                            to_string(root->shape()));
    }
    if (!root->requires_grad) return;

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node<T>* n : order) {
        if (n->leaf && n->populated) {
            throw ContractError(
                "leaf adjoint already populated; zero gradients before a second backward");
        }
    }

    root->adjoint().fill(T(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (!n->leaf && n->backward_fn) n->backward_fn(*n);
    }
    for (Node<T>* n : order) {
        if (n->leaf) {
            n->adjoint();
            require_finite(n->adjoint(), "backward");
            n->populated = true;
        } else {
            n->parents.clear();
            n->backward_fn = nullptr;
            n->zero_adjoint();
            n->released = true;
        }
    }
}

}  // namespace aligndesk
