#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "vitc/numerics/tensor.hpp"

namespace vitc::nn {

namespace detail {

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation during a backward sweep
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node&)> backward;

    void accumulate(const Tensor& g);
    void accumulate(Tensor&& g);
};

}  // namespace detail

// Handle to a value on the differentiation tape. Leaves created with
// requires_grad act as parameters; every op result records its inputs when
// any input requires a gradient and recording is enabled.
class Var {
public:
    Var() = default;

    static Var parameter(Tensor value);
    static Var constant(Tensor value);

    const Tensor& value() const { return node_->value; }
    // In-place update of a leaf's value (optimizer steps, masking).
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const noexcept { return static_cast<bool>(node_); }
    const detail::Node* id() const noexcept { return node_.get(); }

    // Op construction; backward may be empty when no parent requires grad.
    static Var from_op(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> backward);

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::Node> node_;
};

// Gradients of a scalar loss with respect to each parameter, in order.
// Throws UnknownParameterError when a parameter is not reachable from loss.
std::vector<Tensor> grad_of(const Var& loss, std::span<const Var> params);

// Disables tape recording on this thread for the guard's lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

bool grad_enabled();

}  // namespace vitc::nn
