#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace stgl {

// Planar (channel-major) image with intensities normalized to [0, 1].
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Image() = default;
    Image(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w),
          data(static_cast<std::size_t>(c) * h * w, fill) {}

    std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    double& at(int c, int r, int col) { return data[c * plane() + static_cast<std::size_t>(r) * width + col]; }
    double at(int c, int r, int col) const { return data[c * plane() + static_cast<std::size_t>(r) * width + col]; }

    bool same_shape(const Image& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }

    Image crop(int row, int col, int h, int w) const;
    double mean() const;
    double stddev() const;
};

// Bilinear resampling with half-pixel centers.
Image resize_bilinear(const Image& src, int height, int width);

// Repeats a single-channel image `channels` times.
Image replicate_channels(const Image& src, int channels);

// Rec. 601 luma of a 3-channel image.
Image luminance(const Image& rgb);

// Binary PGM (P5, 1 channel) or PPM (P6, 3 channels), 8- or 16-bit.
Image read_pnm(const std::filesystem::path& path);
void write_pnm(const std::filesystem::path& path, const Image& img, int bit_depth = 8);

} // namespace stgl
