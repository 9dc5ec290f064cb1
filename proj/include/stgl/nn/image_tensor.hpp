#pragma once

#include <vector>

#include "stgl/image.hpp"
#include "stgl/nn/tensor.hpp"

namespace stgl::nn {

// Stacks same-shaped images into [N, C, H, W], mapping v -> v * gain + bias.
// Single-channel images are replicated to `channels` when channels > 1.
Tensor images_to_batch(const std::vector<const Image*>& images, int channels, double gain = 1.0, double bias = 0.0);

// Sample `index` of an [N, C, H, W] tensor as an image, v -> v * gain + bias.
Image batch_to_image(const Tensor& batch, int index, double gain = 1.0, double bias = 0.0);

// Toggles gradient recording for every parameter of `params`.
template <typename Params>
void set_requires_grad(const Params& params, bool on) {
    for (auto p : params) p.set_requires_grad(on);
}

} // namespace stgl::nn
