#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "stgl/geodata.hpp"

namespace stgl {

enum class Terrain : std::uint8_t { desert = 0, farm = 1, road = 2, building = 3 };

struct WorldSpec {
    std::uint64_t seed = 0;
    int height = 256;
    int width = 256;
    double meters_per_pixel = 1.0;
    Vec2 origin;
    // Fractions of desert, farm, road, building; must sum to 1.
    std::array<double, 4> terrain_mix{0.55, 0.2, 0.1, 0.15};
    double thermal_noise_std = 0.01;
    // (0, 1]; the thermal channel is rescaled around 0.5 by this factor.
    double thermal_contrast = 1.0;
    // Coarsest value-noise lattice spacing in pixels.
    double feature_scale_px = 48.0;

    void validate() const;
};

struct World {
    RasterMap satellite;
    RasterMap thermal;
    std::vector<Terrain> terrain; // per pixel, row-major
};

// Deterministic in `spec`: every random quantity is keyed by (seed, pixel).
World generate_world(const WorldSpec& spec);

// The noise-free thermal response of one satellite pixel of the given class,
// before the contrast rescale. Exposed so tests can recompute the mapping.
double thermal_response(Terrain terrain, double r, double g, double b);

} // namespace stgl
