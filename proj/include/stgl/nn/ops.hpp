#pragma once

#include <vector>

#include "stgl/nn/tensor.hpp"

// Differentiable operations over NCHW double tensors. Every op validates its
// shapes and throws stgl::InputError on mismatch.
namespace stgl::nn {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
Tensor add_n(const std::vector<Tensor>& xs);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double slope);
Tensor tanh(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
// log(max(x, floor)); the gradient is zero where the floor is active.
Tensor log_clamped(const Tensor& x, double floor);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor element(const Tensor& x, std::size_t index);
Tensor reshape(const Tensor& x, Shape shape);

// Forward is the identity; backward multiplies the upstream gradient by -scale.
Tensor gradient_reversal(const Tensor& x, double scale = 1.0);

Tensor concat_channels(const Tensor& a, const Tensor& b);
// Concatenates along axis 0; trailing dimensions must agree.
Tensor concat_batch(const std::vector<Tensor>& xs);

// x: [N, C, H, W], w: [O, C, kh, kw], bias: [O] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
// x: [N, C, H, W], w: [C, O, kh, kw]; output (H-1)*stride - 2*pad + kh.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

// Batch statistics in training mode (running stats updated in place), the
// running stats otherwise.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    std::vector<double>& running_mean, std::vector<double>& running_var,
                    bool training, double momentum, double eps);
// Per-sample, per-channel statistics over H x W.
Tensor instance_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int pad);

// x: [N, I], w: [O, I], bias: [O] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Softmax over axis 1 (classes for [N, C], channels for [N, C, H, W]).
Tensor softmax_axis1(const Tensor& x);

// Rows of x: [N, D] scaled to unit L2 norm. Rows with norm <= eps pass
// through unchanged; their indices are appended to `degenerate` if given.
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12,
                         std::vector<int>* degenerate = nullptr);

// Residual aggregation: assign [N, K, H, W] (soft weights), features
// [N, C, H, W], centroids [K, C] -> [N, K*C] with
// out[n, k, c] = sum_p assign[n, k, p] * (features[n, c, p] - centroids[k, c]).
Tensor vlad_aggregate(const Tensor& assign, const Tensor& features, const Tensor& centroids);

// Euclidean distance between rows i and j of x: [N, D].
Tensor row_distance(const Tensor& x, int i, int j);

// Per-row Euclidean distances of a, b: [N, D] -> [N]. The gradient at a zero
// distance is taken as zero.
Tensor row_distances(const Tensor& a, const Tensor& b);

// [N, D] -> [N].
Tensor sum_axis1(const Tensor& x);

// Rows of x: [N, ...] picked by index (repeats allowed) -> [M, ...].
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);

} // namespace stgl::nn
