#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "difftraj/core/tensor.hpp"

namespace difftraj::ad {

template <class T>
struct Node;

template <class T>
using Value = std::shared_ptr<Node<T>>;

/// One vertex of a dynamically built reverse-mode tape.
template <class T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;  // allocated on first use, same shape as val
    bool requires_grad = false;
    std::vector<Value<T>> parents;
    std::function<void(Node<T>&)> backward_fn;

    Tensor<T>& ensure_grad() {
        if (grad.numel() != val.numel()) grad = Tensor<T>(val.shape());
        return grad;
    }
    void zero_grad() {
        if (grad.numel() == val.numel())
            std::fill(grad.vec().begin(), grad.vec().end(), T(0));
    }
};

/// Graph recording switch. Inference paths disable it so ops skip parent
/// bookkeeping and closures entirely.
struct GradMode {
    static bool& enabled() {
        static thread_local bool e = true;
        return e;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
Value<T> make_leaf(Tensor<T> t, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(t);
    n->requires_grad = requires_grad;
    return n;
}

template <class T>
Value<T> constant(Tensor<T> t) {
    return make_leaf(std::move(t), false);
}

/// Builds an op node. Parents and the closure are only retained when some
/// parent requires a gradient and grad mode is on.
template <class T>
Value<T> make_node(Tensor<T> val, std::vector<Value<T>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
    auto n = std::make_shared<Node<T>>();
    n->val = std::move(val);
    bool rg = false;
    if (GradMode::enabled())
        for (const auto& p : parents) rg = rg || p->requires_grad;
    if (rg) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return n;
}

/// Reverse-mode sweep from a scalar root. Accumulates into leaf grads; call
/// zero_grad on parameters between steps.
template <class T>
void backward(const Value<T>& root) {
    if (root->val.numel() != 1)
        throw std::invalid_argument("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Post-order DFS over grad-requiring nodes; reversed it yields each node
    // before any of its parents.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace difftraj::ad
