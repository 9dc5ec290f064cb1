#pragma once

#include <filesystem>
#include <vector>

#include "json.hpp"
#include "stgl/geodata.hpp"

namespace stgl {

// Tile sets and paired datasets are stored in the checkpoint container
// (CRC-protected, f64 pixels, so a round trip is lossless). Validity masks
// are not kept. `meta` is free-form and comes back under "extra".
void save_dataset(const std::filesystem::path& path, const DatasetSplit& split,
                  const nlohmann::json& meta = nlohmann::json::object());
DatasetSplit load_dataset(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

void save_tiles(const std::filesystem::path& path, const std::vector<GeoTile>& tiles,
                const nlohmann::json& meta = nlohmann::json::object());
std::vector<GeoTile> load_tiles(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

// Satellite sides of a pair list, in order.
std::vector<GeoTile> satellite_tiles(const std::vector<PairedCrop>& pairs);

} // namespace stgl
