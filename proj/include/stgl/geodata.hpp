#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stgl/image.hpp"

namespace stgl {

// Metric position in the map's local planar frame. x grows with pixel
// column, y with pixel row.
struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Vec2&, const Vec2&) = default;
};

inline double distance(const Vec2& a, const Vec2& b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct RasterMap {
    Image pixels;
    double meters_per_pixel = 1.0;
    Vec2 origin;
    // 1 = valid, 0 = reconstruction gap. Empty when the map has no mask.
    std::vector<std::uint8_t> validity_mask;

    int height() const { return pixels.height; }
    int width() const { return pixels.width; }
    bool has_mask() const { return !validity_mask.empty(); }

    // Throws InputError on out-of-range pixels, non-positive scale, or a
    // mask of the wrong size.
    void validate() const;
};

struct PixelOffset {
    int row = 0;
    int col = 0;

    friend auto operator<=>(const PixelOffset&, const PixelOffset&) = default;
};

struct GeoTile {
    Image image;
    PixelOffset offset;
    Vec2 position; // crop center
    std::int64_t tile_id = 0;
    // Validity crop (same plane size as image); empty when the source map had no mask.
    std::vector<std::uint8_t> valid;
};

enum class CropSource { real, generated };

struct PairedCrop {
    GeoTile satellite;
    GeoTile thermal;
    CropSource source = CropSource::real;
    double invalid_fraction = 0.0;

    std::int64_t tile_id() const { return thermal.tile_id; }
    const Vec2& position() const { return thermal.position; }
};

struct Region {
    std::string split; // "train", "val" or "test"
    double x_min, y_min, x_max, y_max;

    bool contains(const Vec2& p) const {
        return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max;
    }
};

// Rectangles in map meters. A pair goes to the first listed region containing
// its center.
struct SplitSpec {
    std::vector<Region> regions;
};

struct DatasetSplit {
    std::vector<PairedCrop> train;
    std::vector<PairedCrop> val;
    std::vector<PairedCrop> test;
    SplitSpec split_spec;
};

Vec2 tile_center(const RasterMap& map, PixelOffset offset, int crop_size);

// All fully-contained crops at offsets (i*stride, j*stride), row-major, with
// consecutive ids starting at `first_id`.
std::vector<GeoTile> tile_map(const RasterMap& map, int crop_size, int stride, std::int64_t first_id = 0);

// Matches tiles by pixel offset; both inputs must come from co-registered maps.
std::vector<PairedCrop> pair_crops(const std::vector<GeoTile>& sat_tiles,
                                   const std::vector<GeoTile>& thermal_tiles);

// Keeps pairs with invalid_fraction <= max_invalid_fraction, in order.
std::vector<PairedCrop> filter_invalid(const std::vector<PairedCrop>& pairs, double max_invalid_fraction);

DatasetSplit split_by_region(std::vector<PairedCrop> pairs, const SplitSpec& spec);

// Sidecar manifest `<image>.meta` with `key = value` lines: meters_per_pixel,
// origin_x, origin_y and optionally mask (a PGM path relative to the sidecar;
// nonzero = valid).
RasterMap load_raster(const std::filesystem::path& image_path);
void save_raster(const std::filesystem::path& image_path, const RasterMap& map, int bit_depth = 16);
std::filesystem::path manifest_path(const std::filesystem::path& image_path);

// JSON object: {"train": [[x_min, y_min, x_max, y_max], ...], "val": [...], "test": [...]}.
SplitSpec load_split_spec(const std::filesystem::path& path);
void save_split_spec(const std::filesystem::path& path, const SplitSpec& spec);
SplitSpec split_spec_from_json(const nlohmann::json& j);
nlohmann::json split_spec_to_json(const SplitSpec& spec);

} // namespace stgl
