#include "alden/autodiff.hpp"

#include <stdexcept>
#include <unordered_set>

namespace alden::nn {

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor& Var::mutable_value() {
    if (node_->backward_fn) {
        throw std::logic_error("mutable_value: only leaf nodes may be updated in place");
    }
    return node_->value;
}

void Var::zero_grad() {
    if (node_) node_->grad = Tensor();
}

Var Var::detach() const {
    return Var(node_->value, false);
}

double Var::scalar() const {
    if (!node_ || node_->value.numel() != 1) {
        throw std::logic_error("scalar: tensor is not a single element");
    }
    return node_->value[0];
}

void Var::backward() const {
    if (!node_) throw std::logic_error("backward: undefined Var");
    if (node_->value.numel() != 1) {
        throw std::logic_error("backward: root must be a scalar, got shape " +
                               node_->value.shape_str());
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS over the grad-requiring subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* n;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({node_.get(), 0});
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.n->parents.size()) {
            Node* p = f.n->parents[f.next_parent++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

} // namespace alden::nn
