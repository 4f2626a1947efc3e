#include "peftqa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "peftqa/errors.hpp"

namespace peftqa {

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<float> values, bool requires_grad) {
    if (shape_numel(shape) != values.size()) {
        throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                             std::to_string(values.size()) + " values");
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->data = std::move(values);
    node->requires_grad = requires_grad;
    return node;
}
}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::span<float> detail::Node::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(new_node(std::move(shape), std::vector<float>(n, 0.0f), requires_grad));
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    auto n = shape_numel(shape);
    return Tensor(new_node(std::move(shape), std::vector<float>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
    return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::randn(Shape shape, float stddev, Rng& rng, bool requires_grad) {
    std::normal_distribution<float> dist(0.0f, stddev);
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) v = dist(rng);
    return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(node_->shape));
    }
    return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->data.size(); }
std::span<float> Tensor::data() { return node_->data; }
std::span<const float> Tensor::data() const { return node_->data; }

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const float> Tensor::grad() const { return node_->grad; }
std::span<float> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

const std::string& Tensor::op() const { return node_->op; }
bool Tensor::is_leaf() const { return node_->op == "leaf"; }

Tensor Tensor::detach() const { return Tensor(new_node(node_->shape, node_->data, false)); }

Tensor Tensor::clone() const {
    auto copy = new_node(node_->shape, node_->data, node_->requires_grad);
    copy->grad = node_->grad;
    return Tensor(copy);
}

std::vector<std::shared_ptr<detail::Node>> tape_order(const Tensor& root) {
    std::vector<std::shared_ptr<detail::Node>> order;
    if (!root.defined()) return order;
    std::unordered_set<const detail::Node*> visited;
    // Iterative post-order DFS; second tuple field is the next input to expand.
    std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            auto child = node->inputs[next++];
            if (visited.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

std::size_t activation_bytes(const Tensor& root) {
    std::size_t total = 0;
    for (const auto& node : tape_order(root)) {
        if (node->op == "leaf") continue;
        total += node->data.size() * sizeof(float) + node->saved_bytes;
    }
    return total;
}

void Tensor::backward() const {
    if (!defined() || numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            (defined() ? shape_str(shape()) : std::string("<undefined>")));
    }
    if (!node_->requires_grad) {
        throw ContractError("backward() on a tensor that was not produced under an active tape");
    }
    auto order = tape_order(*this);
    node_->ensure_grad()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto& node = **it;
        if (node.backward && !node.grad.empty()) node.backward(node);
    }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor detail::make_result(Shape shape, std::vector<float> values, std::string op, std::vector<Tensor> inputs,
                           BackwardFn backward, std::size_t saved_bytes) {
    auto node = new_node(std::move(shape), std::move(values), false);
    node->op = std::move(op);
#ifndef NDEBUG
    bool inputs_finite = true;
    for (const auto& t : inputs) {
        for (float v : t.data()) {
            if (!std::isfinite(v)) {
                inputs_finite = false;
                break;
            }
        }
    }
    if (inputs_finite) {
        for (float v : node->data) {
            if (!std::isfinite(v)) throw NumericError("non-finite output from op " + node->op);
        }
    }
#endif
    bool track = g_grad_enabled &&
                 std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(backward);
        node->saved_bytes = saved_bytes;
    }
    return Tensor(node);
}

}  // namespace peftqa
