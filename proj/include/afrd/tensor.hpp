// Minimal reverse-mode autodiff tensor.
//
// A Tensor is a shared handle to a graph node holding a row-major buffer.
// Ops record their parents and a backward closure when any input requires a
// gradient and grad mode is enabled. Nodes carry a monotonically increasing
// sequence number, so creation order is a valid topological order and
// backward simply walks reachable nodes by descending sequence number.
#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "afrd/config.hpp"
#include "afrd/error.hpp"

AFRD_BEGIN_NAMESPACE

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool consumed = false;  // backward already ran through this node
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    bool is_leaf() const { return parents.empty() && !consumed; }
    std::vector<real>& grad_buffer();  // allocates zeros on demand
};

class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<real> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, real value, bool requires_grad = false);
    static Tensor scalar(real value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const real> data() const { return node_->data; }
    // Mutable access is meant for leaves (parameters, buffers, inputs).
    std::span<real> mutable_data() { return node_->data; }
    real item() const;
    real at(std::size_t flat_index) const { return node_->data[flat_index]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value) { node_->requires_grad = value; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const real> grad() const;
    void zero_grad() { node_->grad.clear(); }

    /// Copy of the values with no graph history.
    Tensor detach() const;
    Tensor clone() const { return detach(); }

    const NodePtr& node() const { return node_; }
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

private:
    NodePtr node_;
};

/// Creates the result node of an op. Parents are recorded (and the result
/// requires grad) only when grad mode is on and some parent requires grad.
Tensor make_result(const char* op, Shape shape, std::vector<real> data,
                   std::initializer_list<Tensor> parents,
                   std::function<void(Node&)> backward_fn);
Tensor make_result(const char* op, Shape shape, std::vector<real> data,
                   const std::vector<Tensor>& parents,
                   std::function<void(Node&)> backward_fn);

/// Runs reverse-mode accumulation from a scalar loss into every reachable
/// node that requires grad. The graph is released afterwards; a second call
/// on the same graph throws GraphError.
void backward(const Tensor& loss);

bool grad_enabled();

/// Disables graph recording for its lifetime (inference, frozen teacher).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

AFRD_END_NAMESPACE
