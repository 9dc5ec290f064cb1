#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stgl::nn {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// A node on the autograd tape. Gradients are accumulated lazily; `backward`
// reads this node's grad and adds into the parents' grads.
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    // Leaf that accumulates gradients.
    static Tensor parameter(Shape shape, std::vector<double> values);

    // Result of an op: records parents and the backward rule when any parent
    // requires grad and grad mode is on.
    static Tensor from_op(Shape shape, std::vector<double> values,
                          std::vector<Tensor> parents, std::function<void(Node&)> backward);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> values() const { return node_->value; }
    std::span<double> mutable_values() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    double item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    // Reverse-mode sweep from a scalar root.
    void backward() const;
    void zero_grad();
    Tensor detach() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& shared() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Records which side of every non-differentiable point the forward pass took
// (ReLU signs, |x| signs, max-pool winners, hinge activity). Finite-difference
// checks compare signatures to detect perturbations that cross a kink.
namespace kink {

void begin();
std::uint64_t end();
bool active();
void record(std::uint64_t token);

} // namespace kink

} // namespace stgl::nn
