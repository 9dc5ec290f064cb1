#pragma once

#include <string>
#include <utility>
#include <vector>

#include "stgl/nn/ops.hpp"
#include "stgl/nn/tensor.hpp"
#include "stgl/rng.hpp"

namespace stgl::nn {

enum class Init {
    uniform_fan_in, // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    normal_002,     // N(0, 0.02), the usual image-to-image GAN init
};

struct NamedBuffer {
    std::string name;
    std::vector<double>* data;
};

// Owns parameters and buffers; children are registered by pointer, so
// modules are pinned in memory (non-copyable, non-movable).
class Module {
public:
    Module() = default;
    virtual ~Module() = default;
    Module(const Module&) = delete;
    Module& operator=(const Module&) = delete;

    void train(bool on = true);
    void eval() { train(false); }
    bool training() const { return training_; }

    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    std::vector<Tensor> parameters() const;
    std::vector<NamedBuffer> named_buffers();
    std::size_t parameter_count() const;

protected:
    Tensor& add_parameter(std::string name, Tensor t);
    std::vector<double>& add_buffer(std::string name, std::size_t size, double fill);
    void add_child(std::string name, Module& child);

private:
    bool training_ = true;
    std::vector<std::pair<std::string, Tensor*>> params_;
    std::vector<std::pair<std::string, std::vector<double>*>> buffers_;
    std::vector<std::pair<std::string, Module*>> children_;
    // Stable storage for owned tensors and buffers.
    std::vector<std::unique_ptr<Tensor>> owned_params_;
    std::vector<std::unique_ptr<std::vector<double>>> owned_buffers_;
};

class Conv2d : public Module {
public:
    Conv2d(int in, int out, int kernel, int stride, int pad, bool bias, Rng& rng,
           Init init = Init::uniform_fan_in);
    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias_, stride_, pad_); }

    Tensor& weight;

private:
    Tensor bias_;
    int stride_, pad_;
};

class ConvTranspose2d : public Module {
public:
    ConvTranspose2d(int in, int out, int kernel, int stride, int pad, bool bias, Rng& rng,
                    Init init = Init::uniform_fan_in);
    Tensor forward(const Tensor& x) const { return conv_transpose2d(x, weight, bias_, stride_, pad_); }

    Tensor& weight;

private:
    Tensor bias_;
    int stride_, pad_;
};

class BatchNorm2d : public Module {
public:
    explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5);
    Tensor forward(const Tensor& x);

private:
    Tensor& gamma_;
    Tensor& beta_;
    std::vector<double>& running_mean_;
    std::vector<double>& running_var_;
    double momentum_, eps_;
};

class InstanceNorm2d : public Module {
public:
    explicit InstanceNorm2d(int channels, double eps = 1e-5);
    Tensor forward(const Tensor& x) const { return instance_norm2d(x, gamma_, beta_, eps_); }

private:
    Tensor& gamma_;
    Tensor& beta_;
    double eps_;
};

class Linear : public Module {
public:
    Linear(int in, int out, Rng& rng);
    Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }

    Tensor& weight;
    Tensor& bias;
};

// Adam with bias correction.
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam(std::vector<Tensor> params, Options opts);

    void zero_grad();
    void step();
    void set_lr(double lr) { opts_.lr = lr; }
    double lr() const { return opts_.lr; }
    long steps() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    Options opts_;
    long t_ = 0;
};

} // namespace stgl::nn
