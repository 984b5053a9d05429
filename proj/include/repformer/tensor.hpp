#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "repformer/errors.hpp"

namespace repformer {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

inline Shape row_major_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

namespace detail {

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

// Name of an op whose backward rule is deliberately corrupted. Only the
// gradient checker's negative-control path sets this.
inline std::string& corrupted_backward_op() {
    static std::string name;
    return name;
}

inline bool& grad_recording() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// While alive, ops on this thread build no graph (inference mode).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_recording()) { detail::grad_recording() = false; }
    ~NoGradGuard() { detail::grad_recording() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Scales the incoming gradient of every op named `op` by 1.5 before its
/// backward rule runs. Pass an empty string to restore correct behaviour.
inline void corrupt_backward_for_testing(std::string op) {
    detail::corrupted_backward_op() = std::move(op);
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    std::uint64_t id = detail::next_node_id();
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

/// Dense row-major tensor. Copies share the underlying graph node, as with
/// handles in other autograd systems; `detach()` produces an independent copy.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        if (repformer::numel(shape) != data.size())
            throw ShapeMismatch("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + repformer::to_string(shape));
        node_->shape = std::move(shape);
        node_->value = std::move(data);
        node_->requires_grad = requires_grad;
    }

    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const auto n = repformer::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        const auto n = repformer::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    /// Size of dimension `axis`; negative axes count from the end.
    std::size_t dim(int axis) const { return node_->shape[normalize_axis(axis)]; }

    std::size_t normalize_axis(int axis) const {
        const int r = static_cast<int>(rank());
        const int a = axis < 0 ? axis + r : axis;
        if (a < 0 || a >= r)
            throw ShapeMismatch("axis " + std::to_string(axis) + " out of range for rank " +
                                std::to_string(r));
        return static_cast<std::size_t>(a);
    }

    std::span<const T> data() const { return node_->value; }
    // Mutation is only legal on tensors that are not part of a live graph
    // (parameters between steps, freshly built inputs).
    std::span<T> mutable_data() { return node_->value; }

    T at(std::size_t i) const { return node_->value.at(i); }

    T item() const {
        if (numel() != 1)
            throw NotScalar("item() on tensor of shape " + repformer::to_string(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    std::uint64_t node_id() const { return node_->id; }
    std::string_view op() const { return node_->op; }
    const std::shared_ptr<Node<T>>& node() const { return node_; }

    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    std::string to_string() const {
        std::ostringstream os;
        os << "Tensor" << repformer::to_string(shape()) << " {";
        for (std::size_t i = 0; i < numel() && i < 16; ++i) os << (i ? ", " : "") << node_->value[i];
        if (numel() > 16) os << ", ...";
        os << '}';
        return os.str();
    }

    void backward() const;

private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds the result node of an op. The backward rule and parent links are
/// only retained when some parent requires a gradient and recording is on.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents, std::string_view op,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool any = false;
    if (detail::grad_recording())
        for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        if (!detail::corrupted_backward_op().empty() && detail::corrupted_backward_op() == op) {
            node->backward = [inner = std::move(backward)](Node<T>& self) {
                auto saved = self.grad;
                for (auto& g : self.grad) g *= T(1.5);
                inner(self);
                self.grad = std::move(saved);
            };
        } else {
            node->backward = std::move(backward);
        }
    }
    return Tensor<T>(std::move(node));
}

/// Topologically ordered record of every op reachable from a root tensor.
/// Replaying it in reverse visits each recorded op exactly once.
template <typename T>
class GradTape {
public:
    explicit GradTape(const Tensor<T>& root) : root_(root.node()) {
        if (!root_->requires_grad) return;
        std::unordered_set<const Node<T>*> seen;
        std::vector<std::pair<Node<T>*, std::size_t>> stack{{root_.get(), 0}};
        seen.insert(root_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node<T>* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
                continue;
            }
            order_.push_back(node);
            stack.pop_back();
        }
    }

    /// All nodes in forward (topological) order, leaves included.
    const std::vector<Node<T>*>& nodes() const { return order_; }

    std::size_t op_count() const {
        std::size_t n = 0;
        for (auto* node : order_) n += node->backward ? 1 : 0;
        return n;
    }

    /// Seeds d(root)/d(root) = 1 and runs every backward rule in reverse order.
    /// `visit` (optional) is called once per op before its rule runs.
    void replay(const std::function<void(const Node<T>&)>& visit = {}) {
        if (order_.empty()) return;
        auto& g = root_->ensure_grad();
        for (auto& v : g) v += T(1);
        run(visit);
    }

    /// Vector-Jacobian product: seeds the root gradient with `seed` instead of ones.
    void replay(std::span<const T> seed, const std::function<void(const Node<T>&)>& visit = {}) {
        if (order_.empty()) return;
        if (seed.size() != root_->value.size()) throw ShapeMismatch("replay: seed size differs from root");
        auto& g = root_->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
        run(visit);
    }

private:
    void run(const std::function<void(const Node<T>&)>& visit) {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Node<T>* node = *it;
            if (!node->backward || node->grad.empty()) continue;
            if (visit) visit(*node);
            node->backward(*node);
        }
    }

    std::shared_ptr<Node<T>> root_;
    std::vector<Node<T>*> order_;
};

/// Accumulates d(loss)/dT into every reachable tensor that requires a gradient.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw NotScalar("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    GradTape<T>(loss).replay();
}

template <typename T>
void Tensor<T>::backward() const {
    repformer::backward(*this);
}

}  // namespace repformer
