#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "ccat/tensor.hpp"

namespace ccat {

// Reverse-mode tape. Forward calls append nodes (value + backward closure);
// backward() walks the tape in reverse and accumulates gradients. A fresh
// tape is built per training step.
template <typename T>
class TapeT {
public:
    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    int push_leaf(TensorT<T> v, bool requires_grad) {
        nodes_.push_back(Node{std::move(v), TensorT<T>{}, nullptr, requires_grad});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int push_op(TensorT<T> v, bool needs, std::function<void(TapeT<T>&)> back) {
        nodes_.push_back(Node{std::move(v), TensorT<T>{}, needs ? std::move(back) : nullptr, needs});
        return static_cast<int>(nodes_.size()) - 1;
    }

    const TensorT<T>& val(int id) const { return nodes_[static_cast<size_t>(id)].val; }
    TensorT<T>& val_mut(int id) { return nodes_[static_cast<size_t>(id)].val; }

    bool needs(int id) const { return nodes_[static_cast<size_t>(id)].needs; }

    // Gradient buffer, zero-initialized on first touch.
    TensorT<T>& grad_buf(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty() && n.val.numel() > 0) n.grad = TensorT<T>(n.val.shape);
        return n.grad;
    }

    // Gradient if any was accumulated, else nullptr.
    const TensorT<T>* grad_if(int id) const {
        const Node& n = nodes_[static_cast<size_t>(id)];
        return n.grad.data.empty() ? nullptr : &n.grad;
    }

    // Seeds d(node)/d(node) = 1 and propagates back through the tape.
    void backward(int id) {
        TensorT<T>& seed = grad_buf(id);
        for (auto& v : seed.data) v = T(1);
        for (int i = id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (n.back && !n.grad.data.empty()) n.back(*this);
        }
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        TensorT<T> val;
        TensorT<T> grad;
        std::function<void(TapeT<T>&)> back;
        bool needs = false;
    };
    std::vector<Node> nodes_;
};

// Lightweight handle; id < 0 means "no variable".
template <typename T>
struct VarT {
    TapeT<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const TensorT<T>& value() const { return tape->val(id); }
    bool needs() const { return tape->needs(id); }
};

template <typename T>
VarT<T> make_leaf(TapeT<T>& tape, TensorT<T> v, bool requires_grad) {
    return VarT<T>{&tape, tape.push_leaf(std::move(v), requires_grad)};
}

template <typename T>
VarT<T> make_constant(TapeT<T>& tape, TensorT<T> v) {
    return make_leaf(tape, std::move(v), false);
}

using TapeF = TapeT<float>;
using TapeD = TapeT<double>;
using VarF = VarT<float>;
using VarD = VarT<double>;

}  // namespace ccat
