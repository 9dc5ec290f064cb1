#pragma once

#include <vector>

#include "stgl/geodata.hpp"
#include "stgl/image.hpp"

namespace stgl {

struct CEConfig {
    bool enabled = false;
    double factor = 3.0;
};

// Linear contrast stretch about the image mean:
// out = clip(mean + factor * (img - mean), 0, 1).
Image contrast_enhance(const Image& img, double factor);

// Applies CE to the thermal side of every pair when `config.enabled`.
void enhance_thermal(std::vector<PairedCrop>& pairs, const CEConfig& config);

} // namespace stgl
