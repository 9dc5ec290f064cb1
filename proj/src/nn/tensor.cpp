#include "stgl/nn/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "stgl/error.hpp"
#include "stgl/rng.hpp"

namespace stgl::nn {

namespace {

thread_local bool g_grad_enabled = true;

struct KinkState {
    bool active = false;
    std::uint64_t hash = 0;
};
thread_local KinkState g_kink;

} // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<Node>()) {
    node_->value.assign(nn::numel(shape), fill);
    node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<Node>()) {
    if (values.size() != nn::numel(shape)) {
        throw InputError("tensor value count does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
}

Tensor Tensor::parameter(Shape shape, std::vector<double> values) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
}

Tensor Tensor::from_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                       std::function<void(Node&)> backward) {
    Tensor t(std::move(shape), std::move(values));
    if (!g_grad_enabled) return t;
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
    if (!any) return t;
    t.node_->requires_grad = true;
    t.node_->parents.reserve(parents.size());
    for (auto& p : parents) t.node_->parents.push_back(p.node_);
    t.node_->backward = std::move(backward);
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw InputError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

void Tensor::backward() const {
    if (numel() != 1) throw InputError("backward() requires a scalar root");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

void Tensor::zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
    return Tensor(node_->shape, node_->value);
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace kink {

void begin() { g_kink = {true, 0x243f6a8885a308d3ULL}; }

std::uint64_t end() {
    g_kink.active = false;
    return g_kink.hash;
}

bool active() { return g_kink.active; }

void record(std::uint64_t token) { g_kink.hash = mix64(g_kink.hash ^ token); }

} // namespace kink

} // namespace stgl::nn
