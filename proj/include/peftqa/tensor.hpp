#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace peftqa {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

/// One vertex of the define-by-run graph. Leaves carry parameters and inputs;
/// interior nodes carry op outputs plus a closure that propagates the output
/// gradient into `inputs`.
struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until something is accumulated
    bool requires_grad = false;
    std::string op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;
    // Bytes held by the closure beyond `data` (softmax probabilities, masks...).
    std::size_t saved_bytes = 0;

    std::span<float> ensure_grad();
};

}  // namespace detail

/// Dense row-major float32 tensor with optional gradient tracking.
///
/// Copies share storage (handle semantics). Use `clone()` for a deep copy.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor randn(Shape shape, float stddev, Rng& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<float> data();
    std::span<const float> data() const;
    float item() const;

    bool requires_grad() const;
    void set_requires_grad(bool flag);
    bool has_grad() const;
    std::span<const float> grad() const;
    std::span<float> mutable_grad();
    void zero_grad();

    /// Name of the op that produced this tensor ("leaf" for leaves).
    const std::string& op() const;
    bool is_leaf() const;

    /// Reverse-mode sweep from a scalar. Gradients accumulate into every
    /// reachable tensor that requires grad.
    void backward() const;

    /// Same values, no graph linkage, no grad requirement.
    Tensor detach() const;
    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
    const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Graph recording is on by default; this guard turns it off for its scope.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// The executed-op record reachable from `root`, inputs before consumers.
/// Each node appears exactly once.
std::vector<std::shared_ptr<detail::Node>> tape_order(const Tensor& root);

/// Bytes held by interior (non-leaf) nodes of the graph rooted at `root`,
/// including buffers saved for the backward pass.
std::size_t activation_bytes(const Tensor& root);

namespace detail {

using BackwardFn = std::function<void(Node&)>;

/// Builds an op output. Graph linkage is recorded only when grad mode is on
/// and at least one input requires grad.
Tensor make_result(Shape shape, std::vector<float> values, std::string op,
                   std::vector<Tensor> inputs, BackwardFn backward, std::size_t saved_bytes = 0);

}  // namespace detail

}  // namespace peftqa
