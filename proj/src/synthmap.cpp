#include "stgl/synthmap.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stgl/error.hpp"
#include "stgl/rng.hpp"

namespace stgl {

namespace {

// Stream ids keep the independent random fields apart.
enum Stream : std::uint64_t { kHeight = 1, kRoad = 2, kTexture = 3, kBlocks = 4, kNoise = 5, kStripes = 6 };

double lattice(std::uint64_t seed, std::uint64_t stream, std::int64_t ix, std::int64_t iy) {
    return to_unit(hash_key(seed ^ (stream * 0x9e3779b97f4a7c15ULL), static_cast<std::uint64_t>(ix),
                            static_cast<std::uint64_t>(iy)));
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

// Multi-octave value noise in [0, 1].
double value_noise(std::uint64_t seed, std::uint64_t stream, double x, double y, double scale, int octaves) {
    double total = 0.0, amp = 1.0, norm = 0.0;
    for (int o = 0; o < octaves; ++o) {
        const double fx = x / scale, fy = y / scale;
        const auto ix = static_cast<std::int64_t>(std::floor(fx));
        const auto iy = static_cast<std::int64_t>(std::floor(fy));
        const double tx = smooth(fx - ix), ty = smooth(fy - iy);
        const std::uint64_t s = stream + 16 * o;
        const double a = lattice(seed, s, ix, iy), b = lattice(seed, s, ix + 1, iy);
        const double c = lattice(seed, s, ix, iy + 1), d = lattice(seed, s, ix + 1, iy + 1);
        total += amp * ((a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty);
        norm += amp;
        amp *= 0.5;
        scale *= 0.5;
    }
    return total / norm;
}

double quantile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    q = std::clamp(q, 0.0, 1.0);
    const auto k = static_cast<std::size_t>(std::min<double>(static_cast<double>(v.size()) - 1.0,
                                                              std::floor(q * static_cast<double>(v.size()))));
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
    return v[k];
}

} // namespace

void WorldSpec::validate() const {
    if (height < 1 || width < 1) throw InputError("world size must be positive");
    if (!(meters_per_pixel > 0.0)) throw InputError("meters_per_pixel must be positive");
    const double total = std::accumulate(terrain_mix.begin(), terrain_mix.end(), 0.0);
    if (std::fabs(total - 1.0) > 1e-9) throw InputError("terrain_mix must sum to 1");
    for (double f : terrain_mix) {
        if (f < 0.0) throw InputError("terrain_mix fractions must be non-negative");
    }
    if (!(thermal_noise_std >= 0.0)) throw InputError("thermal_noise_std must be >= 0");
    if (!(thermal_contrast > 0.0 && thermal_contrast <= 1.0)) throw InputError("thermal_contrast must lie in (0, 1]");
    if (!(feature_scale_px > 1.0)) throw InputError("feature_scale_px must exceed 1");
}

double thermal_response(Terrain terrain, double r, double g, double b) {
    const double lum = 0.299 * r + 0.587 * g + 0.114 * b;
    double t = 0.0;
    switch (terrain) {
    case Terrain::desert: t = 0.42 + 0.35 * (lum - 0.62); break;   // flat, low contrast
    case Terrain::farm: t = 0.18 + 1.4 * (lum - 0.28); break;      // irrigated, cool
    case Terrain::road: t = 0.78 + 0.6 * (lum - 0.42); break;      // warm asphalt
    case Terrain::building: t = 0.95 - 0.9 * (lum - 0.55); break;  // inverted roofs
    }
    return std::clamp(t, 0.0, 1.0);
}

World generate_world(const WorldSpec& spec) {
    spec.validate();
    const int h = spec.height, w = spec.width;
    const std::size_t n = static_cast<std::size_t>(h) * w;
    const double scale = spec.feature_scale_px;

    std::vector<double> height_field(n), road_field(n);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * w + c;
            height_field[i] = value_noise(spec.seed, kHeight, c, r, scale, 4);
            road_field[i] = value_noise(spec.seed, kRoad, c, r, scale * 1.5, 2);
        }
    }

    // Roads: the thinnest band around the road field's median that covers
    // the requested fraction. Everything else splits by height quantiles.
    World world;
    world.terrain.assign(n, Terrain::desert);
    const double road_median = quantile(road_field, 0.5);
    std::vector<double> road_dist(n);
    for (std::size_t i = 0; i < n; ++i) road_dist[i] = std::fabs(road_field[i] - road_median);
    const auto& mix = spec.terrain_mix;
    const double road_cut = mix[2] > 0.0 ? quantile(road_dist, mix[2]) : -1.0;
    std::vector<double> rest;
    for (std::size_t i = 0; i < n; ++i) {
        if (road_dist[i] < road_cut) world.terrain[i] = Terrain::road;
        else rest.push_back(height_field[i]);
    }
    const double non_road = std::max(1e-12, 1.0 - mix[2]);
    const double desert_cut = quantile(rest, mix[0] / non_road);
    const double farm_cut = quantile(rest, (mix[0] + mix[1]) / non_road);
    for (std::size_t i = 0; i < n; ++i) {
        if (world.terrain[i] == Terrain::road) continue;
        const double v = height_field[i];
        world.terrain[i] = v < desert_cut ? Terrain::desert : v < farm_cut ? Terrain::farm : Terrain::building;
    }

    Image sat(3, h, w), thermal(1, h, w);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * w + c;
            const double tex = value_noise(spec.seed, kTexture, c, r, 6.0, 3) - 0.5;
            const double hv = height_field[i] - 0.5;
            double rgb[3] = {0.0, 0.0, 0.0};
            switch (world.terrain[i]) {
            case Terrain::desert:
                rgb[0] = 0.80 + 0.25 * hv + 0.10 * tex;
                rgb[1] = 0.66 + 0.22 * hv + 0.09 * tex;
                rgb[2] = 0.48 + 0.15 * hv + 0.06 * tex;
                break;
            case Terrain::farm: {
                // Field rows whose orientation drifts slowly across the map.
                const double angle = 3.14159 * value_noise(spec.seed, kStripes, c, r, scale * 2.0, 1);
                const double stripe = 0.5 + 0.5 * std::sin((c * std::cos(angle) + r * std::sin(angle)) * 1.1);
                rgb[0] = 0.22 + 0.10 * stripe + 0.10 * tex;
                rgb[1] = 0.40 + 0.22 * stripe + 0.12 * tex;
                rgb[2] = 0.16 + 0.06 * stripe + 0.05 * tex;
                break;
            }
            case Terrain::road:
                rgb[0] = rgb[1] = rgb[2] = 0.42 + 0.06 * tex;
                break;
            case Terrain::building: {
                const double roof = lattice(spec.seed, kBlocks, c / 7, r / 7);
                rgb[0] = 0.40 + 0.45 * roof + 0.05 * tex;
                rgb[1] = 0.38 + 0.42 * roof + 0.05 * tex;
                rgb[2] = 0.36 + 0.40 * roof + 0.05 * tex;
                break;
            }
            }
            for (int ch = 0; ch < 3; ++ch) {
                rgb[ch] = std::clamp(rgb[ch], 0.0, 1.0);
                sat.at(ch, r, c) = rgb[ch];
            }
            const double raw = thermal_response(world.terrain[i], rgb[0], rgb[1], rgb[2]);
            double t = 0.5 + spec.thermal_contrast * (raw - 0.5);
            if (spec.thermal_noise_std > 0.0) t += spec.thermal_noise_std * keyed_normal(spec.seed ^ kNoise, i);
            thermal.at(0, r, c) = std::clamp(t, 0.0, 1.0);
        }
    }

    world.satellite = {std::move(sat), spec.meters_per_pixel, spec.origin, {}};
    world.thermal = {std::move(thermal), spec.meters_per_pixel, spec.origin, {}};
    return world;
}

} // namespace stgl
