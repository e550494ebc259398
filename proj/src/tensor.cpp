#include "afrd/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

AFRD_BEGIN_NAMESPACE

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

NodePtr new_node(Shape shape, std::vector<real> data, bool requires_grad) {
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == 0) throw DimensionError("tensor", "axis " + std::to_string(i), "zero-length dimension");
    }
    if (shape_numel(shape) != data.size()) {
        throw DimensionError("tensor", "numel",
                             "shape " + shape_str(shape) + " holds " +
                                 std::to_string(shape_numel(shape)) + " elements, data has " +
                                 std::to_string(data.size()));
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
    return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<real>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), real(0));
    return grad;
}

Tensor::Tensor(Shape shape, std::vector<real> data, bool requires_grad)
    : node_(new_node(std::move(shape), std::move(data), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<real>(n, real(0)), requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<real>(n, value), requires_grad);
}

Tensor Tensor::scalar(real value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<real>{value}, requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw DimensionError("dim", "axis " + std::to_string(axis),
                             "tensor has rank " + std::to_string(node_->shape.size()));
    }
    return node_->shape[axis];
}

real Tensor::item() const {
    if (numel() != 1) throw DimensionError("item", "numel", "expected a single element");
    return node_->data[0];
}

std::span<const real> Tensor::grad() const {
    if (node_->grad.empty()) throw GraphError("tensor has no gradient");
    return node_->grad;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data, false); }

Tensor make_result(const char* op, Shape shape, std::vector<real> data,
                   const std::vector<Tensor>& parents, std::function<void(Node&)> backward_fn) {
    bool track = false;
    if (t_grad_enabled) {
        for (const auto& p : parents) track = track || p.requires_grad();
    }
    auto node = new_node(std::move(shape), std::move(data), track);
    node->op = op;
    if (track) {
        node->parents.reserve(parents.size());
        for (const auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

Tensor make_result(const char* op, Shape shape, std::vector<real> data,
                   std::initializer_list<Tensor> parents, std::function<void(Node&)> backward_fn) {
    return make_result(op, std::move(shape), std::move(data), std::vector<Tensor>(parents),
                       std::move(backward_fn));
}

void backward(const Tensor& loss) {
    if (!loss.defined()) throw GraphError("backward: undefined tensor");
    if (loss.numel() != 1) {
        throw GraphError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    const NodePtr& root = loss.node();
    if (root->consumed) throw GraphError("backward: graph already consumed; rebuild the forward pass");
    if (!root->requires_grad) throw GraphError("backward: loss is detached from any trainable input");

    // Collect nodes reachable through requires_grad edges.
    // Owning handles: releasing history below may drop the last other reference.
    std::vector<NodePtr> order;
    std::vector<NodePtr> stack{root};
    std::unordered_set<Node*> seen;
    while (!stack.empty()) {
        NodePtr n = std::move(stack.back());
        stack.pop_back();
        if (!seen.insert(n.get()).second) continue;
        for (const auto& p : n->parents) {
            if (p->requires_grad) stack.push_back(p);
        }
        order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(), [](const NodePtr& a, const NodePtr& b) { return a->seq > b->seq; });

    root->grad_buffer()[0] += real(1);
    for (const auto& n : order) {
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // Release interior history; leaves keep their accumulated grads and
    // consumed interior nodes behave as constants from here on.
    for (const auto& n : order) {
        if (!n->parents.empty()) {
            n->parents.clear();
            n->backward_fn = nullptr;
            n->requires_grad = false;
            n->consumed = true;
        }
    }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

AFRD_END_NAMESPACE
