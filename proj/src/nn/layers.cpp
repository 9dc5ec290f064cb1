#include "stgl/nn/layers.hpp"

#include <cmath>

#include "stgl/error.hpp"

namespace stgl::nn {

namespace {

std::vector<double> init_values(std::size_t count, int fan_in, Init init, Rng& rng) {
    std::vector<double> v(count);
    if (init == Init::normal_002) {
        for (double& x : v) x = 0.02 * rng.normal();
    } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& x : v) x = rng.uniform(-bound, bound);
    }
    return v;
}

} // namespace

void Module::train(bool on) {
    training_ = on;
    for (auto& [name, child] : children_) child->train(on);
}

std::vector<std::pair<std::string, Tensor>> Module::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, p] : params_) out.emplace_back(name, *p);
    for (const auto& [cname, child] : children_) {
        for (auto& [name, p] : child->named_parameters()) out.emplace_back(cname + "." + name, p);
    }
    return out;
}

std::vector<Tensor> Module::parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
}

std::vector<NamedBuffer> Module::named_buffers() {
    std::vector<NamedBuffer> out;
    for (auto& [name, b] : buffers_) out.push_back({name, b});
    for (auto& [cname, child] : children_) {
        for (auto& nb : child->named_buffers()) out.push_back({cname + "." + nb.name, nb.data});
    }
    return out;
}

std::size_t Module::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : named_parameters()) n += p.numel();
    return n;
}

Tensor& Module::add_parameter(std::string name, Tensor t) {
    owned_params_.push_back(std::make_unique<Tensor>(std::move(t)));
    owned_params_.back()->set_requires_grad(true);
    params_.emplace_back(std::move(name), owned_params_.back().get());
    return *owned_params_.back();
}

std::vector<double>& Module::add_buffer(std::string name, std::size_t size, double fill) {
    owned_buffers_.push_back(std::make_unique<std::vector<double>>(size, fill));
    buffers_.emplace_back(std::move(name), owned_buffers_.back().get());
    return *owned_buffers_.back();
}

void Module::add_child(std::string name, Module& child) {
    children_.emplace_back(std::move(name), &child);
}

Conv2d::Conv2d(int in, int out, int kernel, int stride, int pad, bool bias, Rng& rng, Init init)
    : weight(add_parameter("weight", Tensor({out, in, kernel, kernel},
                                            init_values(static_cast<std::size_t>(out) * in * kernel * kernel,
                                                        in * kernel * kernel, init, rng)))),
      stride_(stride), pad_(pad) {
    if (bias) {
        bias_ = add_parameter("bias", Tensor({out}, init == Init::normal_002
                                                        ? std::vector<double>(out, 0.0)
                                                        : init_values(out, in * kernel * kernel, init, rng)));
    }
}

ConvTranspose2d::ConvTranspose2d(int in, int out, int kernel, int stride, int pad, bool bias, Rng& rng,
                                 Init init)
    : weight(add_parameter("weight", Tensor({in, out, kernel, kernel},
                                            init_values(static_cast<std::size_t>(out) * in * kernel * kernel,
                                                        out * kernel * kernel, init, rng)))),
      stride_(stride), pad_(pad) {
    if (bias) {
        bias_ = add_parameter("bias", Tensor({out}, init == Init::normal_002
                                                        ? std::vector<double>(out, 0.0)
                                                        : init_values(out, out * kernel * kernel, init, rng)));
    }
}

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : gamma_(add_parameter("gamma", Tensor({channels}, 1.0))),
      beta_(add_parameter("beta", Tensor({channels}, 0.0))),
      running_mean_(add_buffer("running_mean", channels, 0.0)),
      running_var_(add_buffer("running_var", channels, 1.0)),
      momentum_(momentum), eps_(eps) {}

Tensor BatchNorm2d::forward(const Tensor& x) {
    return batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, training(), momentum_, eps_);
}

InstanceNorm2d::InstanceNorm2d(int channels, double eps)
    : gamma_(add_parameter("gamma", Tensor({channels}, 1.0))),
      beta_(add_parameter("beta", Tensor({channels}, 0.0))),
      eps_(eps) {}

Linear::Linear(int in, int out, Rng& rng)
    : weight(add_parameter("weight", Tensor({out, in}, init_values(static_cast<std::size_t>(out) * in, in,
                                                                    Init::uniform_fan_in, rng)))),
      bias(add_parameter("bias", Tensor({out}, init_values(out, in, Init::uniform_fan_in, rng)))) {}

Adam::Adam(std::vector<Tensor> params, Options opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::zero_grad() {
    for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        auto& p = params_[k];
        if (p.grad().empty()) continue;
        auto val = p.mutable_values();
        auto g = p.grad();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < val.size(); ++i) {
            m[i] = opts_.beta1 * m[i] + (1 - opts_.beta1) * g[i];
            v[i] = opts_.beta2 * v[i] + (1 - opts_.beta2) * g[i] * g[i];
            val[i] -= opts_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opts_.eps);
        }
    }
}

} // namespace stgl::nn
