#include "stgl/dataset_io.hpp"

#include <string>

#include "stgl/error.hpp"
#include "stgl/nn/checkpoint.hpp"

namespace stgl {

namespace {

using nlohmann::json;

json tile_entry(const GeoTile& t) {
    return {{"id", t.tile_id},
            {"row", t.offset.row},
            {"col", t.offset.col},
            {"x", t.position.x},
            {"y", t.position.y},
            {"shape", {t.image.channels, t.image.height, t.image.width}}};
}

std::string key(const char* side, std::size_t i) { return std::string(side) + "/" + std::to_string(i); }

void put_tile(nn::Checkpoint& ckpt, const std::string& name, const GeoTile& t) { ckpt.arrays[name] = t.image.data; }

GeoTile get_tile(const nn::Checkpoint& ckpt, const std::string& name, const json& e) {
    GeoTile t;
    t.tile_id = e.at("id").get<std::int64_t>();
    t.offset = {e.at("row").get<int>(), e.at("col").get<int>()};
    t.position = {e.at("x").get<double>(), e.at("y").get<double>()};
    const auto& s = e.at("shape");
    t.image = Image(s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>());
    auto it = ckpt.arrays.find(name);
    if (it == ckpt.arrays.end() || it->second.size() != t.image.size()) {
        throw FormatError("dataset: missing or mis-sized array '" + name + "'");
    }
    t.image.data = it->second;
    return t;
}

nn::Checkpoint load_kind(const std::filesystem::path& path, const char* kind) {
    auto ckpt = nn::load_checkpoint(path);
    if (ckpt.meta.value("kind", "") != kind) {
        throw FormatError(path.string() + ": not a " + std::string(kind) + " file");
    }
    return ckpt;
}

} // namespace

void save_dataset(const std::filesystem::path& path, const DatasetSplit& split, const json& meta) {
    nn::Checkpoint ckpt;
    json entries = json::array();
    std::size_t i = 0;
    auto add = [&](const std::vector<PairedCrop>& pairs, const char* name) {
        for (const auto& p : pairs) {
            entries.push_back({{"split", name},
                               {"source", p.source == CropSource::real ? "real" : "generated"},
                               {"invalid_fraction", p.invalid_fraction},
                               {"satellite", tile_entry(p.satellite)},
                               {"thermal", tile_entry(p.thermal)}});
            put_tile(ckpt, key("sat", i), p.satellite);
            put_tile(ckpt, key("thermal", i), p.thermal);
            ++i;
        }
    };
    add(split.train, "train");
    add(split.val, "val");
    add(split.test, "test");
    json regions = json::array();
    for (const auto& r : split.split_spec.regions) regions.push_back({r.split, r.x_min, r.y_min, r.x_max, r.y_max});
    ckpt.meta = {{"kind", "dataset"}, {"pairs", entries}, {"regions", regions}, {"extra", meta}};
    nn::save_checkpoint(path, ckpt);
}

DatasetSplit load_dataset(const std::filesystem::path& path, json* meta) {
    const auto ckpt = load_kind(path, "dataset");
    DatasetSplit out;
    try {
        std::size_t i = 0;
        for (const auto& e : ckpt.meta.at("pairs")) {
            PairedCrop p;
            p.satellite = get_tile(ckpt, key("sat", i), e.at("satellite"));
            p.thermal = get_tile(ckpt, key("thermal", i), e.at("thermal"));
            p.source = e.at("source").get<std::string>() == "generated" ? CropSource::generated : CropSource::real;
            p.invalid_fraction = e.at("invalid_fraction").get<double>();
            const auto s = e.at("split").get<std::string>();
            (s == "train" ? out.train : s == "val" ? out.val : out.test).push_back(std::move(p));
            ++i;
        }
        for (const auto& r : ckpt.meta.at("regions")) {
            out.split_spec.regions.push_back({r.at(0).get<std::string>(), r.at(1).get<double>(), r.at(2).get<double>(),
                                              r.at(3).get<double>(), r.at(4).get<double>()});
        }
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed dataset header: " + e.what());
    }
    if (meta) *meta = ckpt.meta.value("extra", json::object());
    return out;
}

void save_tiles(const std::filesystem::path& path, const std::vector<GeoTile>& tiles, const json& meta) {
    nn::Checkpoint ckpt;
    json entries = json::array();
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        entries.push_back(tile_entry(tiles[i]));
        put_tile(ckpt, key("tile", i), tiles[i]);
    }
    ckpt.meta = {{"kind", "tiles"}, {"tiles", entries}, {"extra", meta}};
    nn::save_checkpoint(path, ckpt);
}

std::vector<GeoTile> load_tiles(const std::filesystem::path& path, json* meta) {
    const auto ckpt = load_kind(path, "tiles");
    std::vector<GeoTile> out;
    try {
        std::size_t i = 0;
        for (const auto& e : ckpt.meta.at("tiles")) out.push_back(get_tile(ckpt, key("tile", i++), e));
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": malformed tile header: " + e.what());
    }
    if (meta) *meta = ckpt.meta.value("extra", json::object());
    return out;
}

std::vector<GeoTile> satellite_tiles(const std::vector<PairedCrop>& pairs) {
    std::vector<GeoTile> out;
    out.reserve(pairs.size());
    for (const auto& p : pairs) out.push_back(p.satellite);
    return out;
}

} // namespace stgl
