#include "stgl/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "stgl/error.hpp"

namespace stgl {

Image Image::crop(int row, int col, int h, int w) const {
    if (row < 0 || col < 0 || h <= 0 || w <= 0 || row + h > height || col + w > width) {
        throw InputError("crop window outside image bounds");
    }
    Image out(channels, h, w);
    for (int c = 0; c < channels; ++c) {
        for (int r = 0; r < h; ++r) {
            const double* src = &data[c * plane() + static_cast<std::size_t>(row + r) * width + col];
            std::copy(src, src + w, &out.at(c, r, 0));
        }
    }
    return out;
}

double Image::mean() const {
    if (data.empty()) return 0.0;
    return std::accumulate(data.begin(), data.end(), 0.0) / static_cast<double>(data.size());
}

double Image::stddev() const {
    if (data.empty()) return 0.0;
    const double m = mean();
    double acc = 0.0;
    for (double v : data) acc += (v - m) * (v - m);
    return std::sqrt(acc / static_cast<double>(data.size()));
}

Image resize_bilinear(const Image& src, int height, int width) {
    if (height <= 0 || width <= 0) throw InputError("resize target must be positive");
    if (height == src.height && width == src.width) return src;
    Image out(src.channels, height, width);
    const double sy = static_cast<double>(src.height) / height;
    const double sx = static_cast<double>(src.width) / width;
    for (int r = 0; r < height; ++r) {
        double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int col = 0; col < width; ++col) {
            double fx = std::clamp((col + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < src.channels; ++c) {
                const double top = src.at(c, y0, x0) * (1 - wx) + src.at(c, y0, x1) * wx;
                const double bot = src.at(c, y1, x0) * (1 - wx) + src.at(c, y1, x1) * wx;
                out.at(c, r, col) = top * (1 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Image replicate_channels(const Image& src, int channels) {
    if (src.channels == channels) return src;
    if (src.channels != 1) throw InputError("only single-channel images can be replicated");
    Image out(channels, src.height, src.width);
    for (int c = 0; c < channels; ++c) {
        std::copy(src.data.begin(), src.data.end(), out.data.begin() + c * src.plane());
    }
    return out;
}

Image luminance(const Image& rgb) {
    if (rgb.channels != 3) throw InputError("luminance expects a 3-channel image");
    Image out(1, rgb.height, rgb.width);
    const std::size_t n = rgb.plane();
    for (std::size_t i = 0; i < n; ++i) {
        out.data[i] = 0.299 * rgb.data[i] + 0.587 * rgb.data[n + i] + 0.114 * rgb.data[2 * n + i];
    }
    return out;
}

namespace {

std::string next_token(std::istream& in) {
    std::string tok;
    char ch;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string skip;
            std::getline(in, skip);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(ch);
    }
    return tok;
}

} // namespace

Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open image " + path.string());
    const std::string magic = next_token(in);
    int channels = 0;
    if (magic == "P5") channels = 1;
    else if (magic == "P6") channels = 3;
    else throw FormatError(path.string() + ": unsupported image type '" + magic + "' (need P5/P6)");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(next_token(in));
        h = std::stoi(next_token(in));
        maxval = std::stoi(next_token(in));
    } catch (const std::exception&) {
        throw FormatError(path.string() + ": malformed header");
    }
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 65535) {
        throw FormatError(path.string() + ": invalid dimensions or maxval");
    }
    const int bytes = maxval > 255 ? 2 : 1;
    const std::size_t count = static_cast<std::size_t>(w) * h * channels;
    std::vector<unsigned char> raw(count * bytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (static_cast<std::size_t>(in.gcount()) != raw.size()) {
        throw FormatError(path.string() + ": truncated pixel data");
    }
    Image img(channels, h, w);
    for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i) {
        for (int c = 0; c < channels; ++c) {
            const std::size_t k = i * channels + c;
            const unsigned v = bytes == 2 ? (raw[2 * k] << 8u) | raw[2 * k + 1] : raw[k];
            img.data[c * img.plane() + i] = static_cast<double>(v) / maxval;
        }
    }
    return img;
}

void write_pnm(const std::filesystem::path& path, const Image& img, int bit_depth) {
    if (img.channels != 1 && img.channels != 3) throw InputError("PNM supports 1 or 3 channels");
    if (bit_depth != 8 && bit_depth != 16) throw InputError("bit depth must be 8 or 16");
    const unsigned maxval = bit_depth == 16 ? 65535u : 255u;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write image " + path.string());
    out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << '\n' << maxval << '\n';
    std::vector<unsigned char> raw;
    raw.reserve(img.size() * (bit_depth / 8));
    for (std::size_t i = 0; i < img.plane(); ++i) {
        for (int c = 0; c < img.channels; ++c) {
            const double v = std::clamp(img.data[c * img.plane() + i], 0.0, 1.0);
            const auto q = static_cast<unsigned>(std::lround(v * maxval));
            if (bit_depth == 16) raw.push_back(static_cast<unsigned char>(q >> 8));
            raw.push_back(static_cast<unsigned char>(q & 0xff));
        }
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

} // namespace stgl
