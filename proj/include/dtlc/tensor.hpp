#pragma once

// Dense tensors with reverse-mode gradient tracking.
//
// A Tensor is a shared handle onto a graph node. Ops record their parents
// and a backward closure on the node they create; `backward` walks the
// graph in reverse topological order. Leaves (parameters) accumulate
// gradients across calls until `zero_grad`.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace dtlc {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

/// Shape mismatch. `axis` names the offending dimension.
class DimensionError : public std::invalid_argument {
public:
    DimensionError(std::string op, std::string axis, std::size_t expected, std::size_t actual)
        : std::invalid_argument(op + ": dimension mismatch on axis '" + axis + "' (expected " +
                                std::to_string(expected) + ", got " + std::to_string(actual) + ")"),
          op_(std::move(op)),
          axis_(std::move(axis)) {}

    DimensionError(std::string op, std::string axis, const std::string& message)
        : std::invalid_argument(op + ": " + message), op_(std::move(op)), axis_(std::move(axis)) {}

    const std::string& op() const noexcept { return op_; }
    const std::string& axis() const noexcept { return axis_; }

private:
    std::string op_;
    std::string axis_;
};

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty when absent
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::span<T> ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T{0});
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    using value_type = T;
    using Node = TensorNode<T>;

    Tensor() : node_(std::make_shared<Node>()) {}

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        if (shape_numel(shape) != data.size())
            throw DimensionError("Tensor", "data",
                                 "shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                                     " values but " + std::to_string(data.size()) + " were given");
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) { return Tensor({}, {value}, requires_grad); }

    /// Result of an op. Gradient tracking is inherited from the parents.
    static Tensor from_op(std::string op, Shape shape, std::vector<T> data, std::vector<Tensor> parents,
                          std::function<void(Node&)> backward_fn) {
        Tensor out(std::move(shape), std::move(data));
        out.node_->op = std::move(op);
        const bool tracked = std::any_of(parents.begin(), parents.end(),
                                         [](const Tensor& p) { return p.requires_grad(); });
        if (tracked) {
            out.node_->requires_grad = true;
            for (auto& p : parents) out.node_->parents.push_back(p.node_);
            out.node_->backward_fn = std::move(backward_fn);
        }
        return out;
    }

    const Shape& shape() const noexcept { return node_->shape; }
    std::size_t rank() const noexcept { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const noexcept { return node_->data.size(); }

    std::span<T> data() noexcept { return node_->data; }
    std::span<const T> data() const noexcept { return node_->data; }
    std::vector<T>& values() noexcept { return node_->data; }
    const std::vector<T>& values() const noexcept { return node_->data; }

    T item() const {
        if (numel() != 1) throw DimensionError("item", "numel", 1, numel());
        return node_->data[0];
    }

    bool requires_grad() const noexcept { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const noexcept { return node_->grad.size() == node_->data.size() && !node_->grad.empty(); }
    std::span<T> grad() noexcept { return node_->grad; }
    std::span<const T> grad() const noexcept { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    const std::string& op() const noexcept { return node_->op; }

    /// Copy of the values without graph history or gradient.
    Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

    /// Same storage, new shape. Gradient flows through unchanged.
    Tensor reshape(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw DimensionError("reshape", "numel", shape_numel(shape), numel());
        return from_op("reshape", std::move(shape), node_->data, {*this}, [](Node& self) {
            auto& parent = *self.parents[0];
            if (!parent.requires_grad) return;
            auto g = parent.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        });
    }

    bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }
    Node& node() noexcept { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Converts values between precisions; the result is a fresh leaf.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t, bool requires_grad = false) {
    std::vector<To> out(t.numel());
    std::transform(t.data().begin(), t.data().end(), out.begin(), [](From v) { return static_cast<To>(v); });
    return Tensor<To>(t.shape(), std::move(out), requires_grad);
}

/// Reverse-mode accumulation from a one-element loss.
///
/// Intermediate gradients are reset on every call; leaf gradients
/// accumulate, so calling twice without zeroing doubles them.
template <typename T>
void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) throw DimensionError("backward", "loss", "loss must be a scalar, got shape " + shape_str(loss.shape()));
    using Node = TensorNode<T>;

    // Iterative post-order DFS; parents visited in recorded order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(&loss.node(), 0);
    visited.insert(&loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* parent = node->parents[next++].get();
            if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* node : order) {
        if (!node->requires_grad) continue;
        if (node->backward_fn)
            node->grad.assign(node->data.size(), T{0});
        else
            node->ensure_grad();
    }
    if (!loss.requires_grad()) return;
    loss.node().grad[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
}

}  // namespace dtlc
