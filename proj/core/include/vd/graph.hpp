#pragma once

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "vd/tensor.hpp"

namespace vd {

using Var = int32_t;

// Reverse-mode autodiff tape. Records primitive ops in execution order;
// backward() walks the tape in reverse and accumulates gradients into the
// bound parameter tensors' grad buffers (adding, so repeated backward calls
// accumulate like Algorithm-style multi-flow updates expect).
//
// Single-threaded per instance. Parameter values are referenced, not copied,
// and must outlive the graph.
template <typename T>
class Graph {
public:
    using FwdFn = std::function<Tensor<T>(const Graph&, const std::vector<Var>&)>;
    using BwdFn = std::function<void(Graph&, Var)>;

    // Leaf holding a plain input value; no gradient is tracked.
    Var input(Tensor<T> value) {
        return emit_leaf(std::move(value), nullptr, nullptr, false);
    }

    // Leaf holding an input value whose gradient we want (for grad checks
    // of non-parameter inputs). Gradient is kept on the node; read with grad_of.
    Var input_grad(Tensor<T> value) {
        return emit_leaf(std::move(value), nullptr, nullptr, true);
    }

    // Leaf referencing an external tensor without tracking gradients; the
    // referenced value must outlive the graph. Used to bind frozen weights
    // during sampling without copying them.
    Var ref_input(const Tensor<T>& value) {
        return emit_leaf(Tensor<T>{}, &value, nullptr, false);
    }

    // Parameter leaf: value is referenced in place; after backward, the
    // node's gradient is added into sink->grad (allocated as zeros first).
    Var param(const Tensor<T>& value, Tensor<T>* sink) {
        return emit_leaf(Tensor<T>{}, &value, sink, true);
    }

    Var emit(std::vector<Var> inputs, Tensor<T> value, FwdFn fwd, BwdFn bwd) {
        bool rg = false;
        for (Var v : inputs) rg = rg || nodes_[v].requires_grad;
        Node n;
        n.owned = std::move(value);
        n.inputs = std::move(inputs);
        n.fwd = std::move(fwd);
        n.bwd = std::move(bwd);
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }

    const Tensor<T>& val(Var v) const {
        const Node& n = nodes_[v];
        return n.ref ? *n.ref : n.owned;
    }

    bool wants_grad(Var v) const { return nodes_[v].requires_grad; }

    // Gradient flowing into node v's output (valid inside bwd callbacks).
    const Tensor<T>& gout(Var v) const { return grads_[v]; }

    // Gradient accumulation buffer for node v; allocates zeros on first use.
    Tensor<T>& gbuf(Var v) {
        Node& n = nodes_[v];
        if (!touched_[v]) {
            grads_[v].shape = val(v).shape;
            grads_[v].data.assign(static_cast<size_t>(val(v).numel()), T(0));
            touched_[v] = true;
        }
        (void)n;
        return grads_[v];
    }

    // Gradient of a leaf created with input_grad/param, after backward.
    const Tensor<T>& grad_of(Var v) const { return grads_[v]; }

    // Backpropagate from a scalar loss; `seed` is d(total)/d(loss), letting
    // callers fold batch-mean factors into one backward call.
    void backward(Var loss, T seed = T(1)) {
        if (val(loss).numel() != 1)
            throw ShapeError("backward: loss must be scalar, got " + shape_str(val(loss).shape));
        grads_.assign(nodes_.size(), Tensor<T>{});
        touched_.assign(nodes_.size(), false);
        gbuf(loss).data[0] = seed;
        for (Var v = loss; v >= 0; --v) {
            Node& n = nodes_[v];
            if (!touched_[v] || !n.requires_grad) continue;
            if (n.bwd) n.bwd(*this, v);
        }
        // Deliver parameter grads. Unreached parameters still get a zeroed
        // grad buffer so "not on any path" reads as exact zeros.
        for (size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (!n.sink) continue;
            n.sink->ensure_grad();
            if (touched_[i]) {
                const auto& g = grads_[i].data;
                for (size_t k = 0; k < g.size(); ++k) n.sink->grad[k] += g[k];
            }
        }
    }

    // Recompute every non-leaf node from current leaf values, in recording
    // order. Same code path as recording, so outputs are bit-exact.
    void replay() {
        for (size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (n.fwd) n.owned = n.fwd(*this, n.inputs);
        }
    }

    size_t size() const { return nodes_.size(); }
    const std::vector<Var>& inputs_of(Var v) const { return nodes_[v].inputs; }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* ref = nullptr;
        Tensor<T>* sink = nullptr;
        std::vector<Var> inputs;
        FwdFn fwd;
        BwdFn bwd;
        bool requires_grad = false;
    };

    Var emit_leaf(Tensor<T> owned, const Tensor<T>* ref, Tensor<T>* sink, bool rg) {
        Node n;
        n.owned = std::move(owned);
        n.ref = ref;
        n.sink = sink;
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }

    std::deque<Node> nodes_;  // deque: node references stay valid as the tape grows
    std::vector<Tensor<T>> grads_;
    std::vector<bool> touched_;
};

}  // namespace vd
