#include "stgl/geodata.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "stgl/error.hpp"

namespace stgl {

void RasterMap::validate() const {
    if (!(meters_per_pixel > 0.0)) throw InputError("meters_per_pixel must be positive");
    if (pixels.channels != 1 && pixels.channels != 3) throw InputError("raster must have 1 or 3 channels");
    for (double v : pixels.data) {
        if (!(v >= 0.0 && v <= 1.0)) throw InputError("raster pixel outside [0, 1]");
    }
    if (has_mask() && validity_mask.size() != pixels.plane()) {
        throw InputError("validity mask shape does not match raster");
    }
}

Vec2 tile_center(const RasterMap& map, PixelOffset offset, int crop_size) {
    const double half = crop_size / 2.0;
    return {map.origin.x + map.meters_per_pixel * (offset.col + half),
            map.origin.y + map.meters_per_pixel * (offset.row + half)};
}

std::vector<GeoTile> tile_map(const RasterMap& map, int crop_size, int stride, std::int64_t first_id) {
    if (stride < 1) throw InputError("stride must be >= 1");
    if (crop_size < 1) throw InputError("crop_size must be >= 1");
    if (crop_size > map.height() || crop_size > map.width()) {
        throw InputError("map " + std::to_string(map.height()) + "x" + std::to_string(map.width()) +
                         " is smaller than crop size " + std::to_string(crop_size) + "; no tiles");
    }
    const int rows = (map.height() - crop_size) / stride + 1;
    const int cols = (map.width() - crop_size) / stride + 1;
    std::vector<GeoTile> tiles;
    tiles.reserve(static_cast<std::size_t>(rows) * cols);
    std::int64_t id = first_id;
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            GeoTile t;
            t.offset = {i * stride, j * stride};
            t.image = map.pixels.crop(t.offset.row, t.offset.col, crop_size, crop_size);
            t.position = tile_center(map, t.offset, crop_size);
            t.tile_id = id++;
            if (map.has_mask()) {
                t.valid.reserve(static_cast<std::size_t>(crop_size) * crop_size);
                for (int r = 0; r < crop_size; ++r) {
                    const auto* src = &map.validity_mask[static_cast<std::size_t>(t.offset.row + r) * map.width() +
                                                         t.offset.col];
                    t.valid.insert(t.valid.end(), src, src + crop_size);
                }
            }
            tiles.push_back(std::move(t));
        }
    }
    return tiles;
}

std::vector<PairedCrop> pair_crops(const std::vector<GeoTile>& sat_tiles,
                                   const std::vector<GeoTile>& thermal_tiles) {
    std::map<PixelOffset, const GeoTile*> by_offset;
    for (const auto& t : thermal_tiles) by_offset.emplace(t.offset, &t);
    auto describe = [](PixelOffset o) {
        return "(" + std::to_string(o.row) + ", " + std::to_string(o.col) + ")";
    };
    std::set<PixelOffset> sat_offsets;
    for (const auto& s : sat_tiles) sat_offsets.insert(s.offset);
    std::string unmatched;
    for (const auto& s : sat_tiles) {
        if (!by_offset.contains(s.offset)) unmatched += " satellite" + describe(s.offset);
    }
    for (const auto& t : thermal_tiles) {
        if (!sat_offsets.contains(t.offset)) unmatched += " thermal" + describe(t.offset);
    }
    if (!unmatched.empty()) throw InputError("pair_crops: unmatched tile offsets:" + unmatched);
    std::vector<PairedCrop> pairs;
    pairs.reserve(sat_tiles.size());
    for (const auto& s : sat_tiles) {
        auto it = by_offset.find(s.offset);
        PairedCrop p;
        p.satellite = s;
        p.thermal = *it->second;
        p.satellite.position = p.thermal.position;
        p.source = CropSource::real;
        if (!p.thermal.valid.empty()) {
            const auto invalid = std::count(p.thermal.valid.begin(), p.thermal.valid.end(), std::uint8_t{0});
            p.invalid_fraction = static_cast<double>(invalid) / static_cast<double>(p.thermal.valid.size());
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

std::vector<PairedCrop> filter_invalid(const std::vector<PairedCrop>& pairs, double max_invalid_fraction) {
    if (!(max_invalid_fraction >= 0.0 && max_invalid_fraction <= 1.0)) {
        throw InputError("max_invalid_fraction must lie in [0, 1]");
    }
    std::vector<PairedCrop> out;
    std::copy_if(pairs.begin(), pairs.end(), std::back_inserter(out),
                 [&](const PairedCrop& p) { return p.invalid_fraction <= max_invalid_fraction; });
    return out;
}

DatasetSplit split_by_region(std::vector<PairedCrop> pairs, const SplitSpec& spec) {
    DatasetSplit out;
    out.split_spec = spec;
    for (const auto& r : spec.regions) {
        if (r.split != "train" && r.split != "val" && r.split != "test") {
            throw InputError("unknown split name '" + r.split + "'");
        }
    }
    std::vector<std::int64_t> unassigned;
    for (auto& p : pairs) {
        auto it = std::find_if(spec.regions.begin(), spec.regions.end(),
                               [&](const Region& r) { return r.contains(p.position()); });
        if (it == spec.regions.end()) {
            unassigned.push_back(p.tile_id());
            continue;
        }
        auto& dst = it->split == "train" ? out.train : it->split == "val" ? out.val : out.test;
        dst.push_back(std::move(p));
    }
    if (!unassigned.empty()) {
        std::ostringstream msg;
        msg << unassigned.size() << " pair(s) lie in no split region; tile_ids:";
        for (std::size_t i = 0; i < unassigned.size() && i < 50; ++i) msg << ' ' << unassigned[i];
        if (unassigned.size() > 50) msg << " ...";
        throw InputError(msg.str());
    }
    return out;
}

std::filesystem::path manifest_path(const std::filesystem::path& image_path) {
    auto p = image_path;
    p += ".meta";
    return p;
}

namespace {

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest " + path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line.substr(0, line.find('#')));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
        }
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

double number(const std::map<std::string, std::string>& kv, const std::string& key,
              const std::filesystem::path& path) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(path.string() + ": missing key '" + key + "'");
    try {
        return std::stod(it->second);
    } catch (const std::exception&) {
        throw FormatError(path.string() + ": key '" + key + "' is not a number");
    }
}

} // namespace

RasterMap load_raster(const std::filesystem::path& image_path) {
    const auto meta = manifest_path(image_path);
    const auto kv = read_key_values(meta);
    RasterMap map;
    map.pixels = read_pnm(image_path);
    map.meters_per_pixel = number(kv, "meters_per_pixel", meta);
    map.origin = {number(kv, "origin_x", meta), number(kv, "origin_y", meta)};
    if (auto it = kv.find("mask"); it != kv.end() && !it->second.empty()) {
        const Image mask = read_pnm(meta.parent_path() / it->second);
        if (mask.height != map.height() || mask.width != map.width()) {
            throw FormatError(meta.string() + ": mask size differs from raster");
        }
        map.validity_mask.resize(mask.plane());
        for (std::size_t i = 0; i < mask.plane(); ++i) map.validity_mask[i] = mask.data[i] > 0.0 ? 1 : 0;
    }
    map.validate();
    return map;
}

void save_raster(const std::filesystem::path& image_path, const RasterMap& map, int bit_depth) {
    if (image_path.has_parent_path()) std::filesystem::create_directories(image_path.parent_path());
    write_pnm(image_path, map.pixels, bit_depth);
    std::ofstream out(manifest_path(image_path));
    out.precision(17);
    out << "meters_per_pixel = " << map.meters_per_pixel << '\n'
        << "origin_x = " << map.origin.x << '\n'
        << "origin_y = " << map.origin.y << '\n';
    if (map.has_mask()) {
        auto mask_file = image_path.filename();
        mask_file += ".mask.pgm";
        Image mask(1, map.height(), map.width());
        for (std::size_t i = 0; i < mask.plane(); ++i) mask.data[i] = map.validity_mask[i] ? 1.0 : 0.0;
        write_pnm(image_path.parent_path() / mask_file, mask, 8);
        out << "mask = " << mask_file.string() << '\n';
    }
}

SplitSpec split_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw FormatError("split spec must be a JSON object");
    for (const auto& [name, _] : j.items())
        if (name != "train" && name != "val" && name != "test") throw FormatError("unknown split name '" + name + "'");
    // JSON objects are unordered; overlapping rectangles resolve train first, then val, then test.
    SplitSpec spec;
    for (const char* name : {"train", "val", "test"}) {
        if (!j.contains(name)) continue;
        for (const auto& rect : j.at(name)) {
            if (!rect.is_array() || rect.size() != 4) throw FormatError("rectangles are [x_min, y_min, x_max, y_max]");
            spec.regions.push_back({name, rect[0].get<double>(), rect[1].get<double>(), rect[2].get<double>(),
                                    rect[3].get<double>()});
        }
    }
    return spec;
}

nlohmann::json split_spec_to_json(const SplitSpec& spec) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& r : spec.regions) j[r.split].push_back({r.x_min, r.y_min, r.x_max, r.y_max});
    return j;
}

SplitSpec load_split_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open split spec " + path.string());
    try {
        return split_spec_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

void save_split_spec(const std::filesystem::path& path, const SplitSpec& spec) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write split spec " + path.string());
    out << split_spec_to_json(spec).dump(2) << '\n';
}

} // namespace stgl
