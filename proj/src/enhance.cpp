#include "stgl/enhance.hpp"

#include <algorithm>
#include <cmath>

#include "stgl/error.hpp"

namespace stgl {

Image contrast_enhance(const Image& img, double factor) {
    if (!(factor > 0.0) || !std::isfinite(factor)) throw InputError("contrast factor must be positive");
    for (double v : img.data) {
        if (!std::isfinite(v)) throw InputError("contrast_enhance: non-finite pixel");
    }
    // A flat image has no contrast to stretch; skip the mean's rounding error.
    const auto [lo, hi] = std::minmax_element(img.data.begin(), img.data.end());
    if (factor == 1.0 || lo == img.data.end() || *lo == *hi) return img;
    const double m = img.mean();
    Image out = img;
    for (double& v : out.data) v = std::clamp(m + factor * (v - m), 0.0, 1.0);
    return out;
}

void enhance_thermal(std::vector<PairedCrop>& pairs, const CEConfig& config) {
    if (!config.enabled) return;
    for (auto& p : pairs) p.thermal.image = contrast_enhance(p.thermal.image, config.factor);
}

} // namespace stgl
