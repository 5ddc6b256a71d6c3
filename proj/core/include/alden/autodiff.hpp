#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "alden/tensor.hpp"

namespace alden::nn {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode tape. Interior nodes hold a backward
/// closure that pulls this node's gradient into its parents.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.empty() && value.numel() > 0) grad = Tensor(value.shape());
        return grad;
    }
};

/// Handle to a tape node. Copies alias the same node; graphs are built by
/// the free functions in ops.hpp and are freed when the last handle to a
/// subgraph root is dropped.
class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    /// Wrap a value that never participates in differentiation.
    static Var constant(Tensor value) { return Var(std::move(value), false); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    /// In-place access for optimizer updates. Leaf nodes only.
    Tensor& mutable_value();
    const Tensor& grad() const { return node_->grad; }
    Tensor& ensure_grad() { return node_->ensure_grad(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void zero_grad();

    /// Copy of the value as a fresh constant leaf (cuts the tape).
    Var detach() const;

    /// Reverse pass from a scalar root. Gradients accumulate into every
    /// reachable node with requires_grad until zero_grad is called.
    void backward() const;

    double scalar() const;

    Node* node() const { return node_.get(); }
    const NodePtr& ptr() const { return node_; }

    static Var from_node(NodePtr n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

private:
    NodePtr node_;
};

} // namespace alden::nn
