#include "vitc/numerics/autograd.hpp"

#include <unordered_set>

namespace vitc::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

namespace detail {

void Node::accumulate(const Tensor& g) {
    if (grad.empty()) {
        grad = g;
    } else {
        grad.add_(g);
    }
}

void Node::accumulate(Tensor&& g) {
    if (grad.empty()) {
        grad = std::move(g);
    } else {
        grad.add_(g);
    }
}

}  // namespace detail

Var Var::parameter(Tensor value) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

Var Var::constant(Tensor value) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var Var::from_op(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(inputs.size());
            for (auto& in : inputs) n->parents.push_back(in.node_);
            n->backward = std::move(backward);
        }
    }
    return Var(std::move(n));
}

std::vector<Tensor> grad_of(const Var& loss, std::span<const Var> params) {
    if (!loss.defined()) throw std::invalid_argument("grad_of: undefined loss");
    if (loss.value().numel() != 1) {
        throw DimensionError("grad_of: loss must be a scalar, got " + shape_str(loss.shape()));
    }

    // Iterative post-order DFS over nodes that require grad.
    std::vector<detail::Node*> order;
    std::unordered_set<const detail::Node*> seen;
    if (loss.requires_grad()) {
        std::vector<std::pair<detail::Node*, size_t>> stack;
        stack.emplace_back(loss.node().get(), 0);
        seen.insert(loss.id());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                detail::Node* p = node->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    for (const auto& p : params) {
        if (!p.defined() || !seen.count(p.id())) {
            throw UnknownParameterError("grad_of: parameter of shape " +
                                        (p.defined() ? shape_str(p.shape()) : std::string("<undefined>")) +
                                        " is not on the tape of this loss");
        }
    }

    if (order.empty()) return {};
    for (auto* n : order) n->grad = Tensor();
    order.back()->grad = Tensor(loss.shape(), 1.0f);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }

    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
        auto node = p.node();
        grads.push_back(node->grad.empty() ? Tensor(p.shape()) : std::move(node->grad));
        node->grad = Tensor();
    }
    for (auto* n : order) n->grad = Tensor();
    return grads;
}

}  // namespace vitc::nn
