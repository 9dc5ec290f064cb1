#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stgl/geodata.hpp"
#include "stgl/sgm.hpp"

namespace stgl {

struct DescriptorIndex {
    int c_final = 0;
    std::vector<float> descriptors; // row-major [N, c_final]
    std::vector<Vec2> positions;
    std::vector<std::int64_t> tile_ids;
    std::string model_fingerprint; // at most 64 bytes on disk

    std::size_t size() const { return tile_ids.size(); }
    std::span<const float> row(std::size_t i) const {
        return {descriptors.data() + i * static_cast<std::size_t>(c_final), static_cast<std::size_t>(c_final)};
    }
    // Shapes, unique ids, finite entries and unit rows (+-1e-4; degenerate zero rows allowed).
    void validate() const;
};

struct Neighbor {
    std::int64_t tile_id = 0;
    Vec2 position;
    double distance = 0.0;
    std::size_t row = 0;
};

struct RetrievalResult {
    std::vector<Neighbor> neighbors; // ascending distance, ties by tile_id
    // knn_within found no candidate in the prior region.
    bool empty_prior = false;
};

// One descriptor per tile, in tile_id order.
DescriptorIndex build_index(sgm::SgmNetwork& model, const std::vector<GeoTile>& db_tiles);
DescriptorIndex make_index(int c_final, std::vector<float> descriptors, std::vector<Vec2> positions,
                           std::vector<std::int64_t> tile_ids, std::string fingerprint = {});

RetrievalResult knn(const DescriptorIndex& index, std::span<const float> q, int k);
RetrievalResult knn_within(const DescriptorIndex& index, std::span<const float> q, int k, const Vec2& center,
                           double radius_m);

// Little-endian: "STGL", u32 version, u32 c_final, u64 N, f32 descriptors,
// f64 positions (x, y), u64 tile_ids, 64-byte fingerprint, u32 CRC-32 of
// everything between the 20-byte header and the checksum.
inline constexpr std::uint32_t kIndexVersion = 1;
void save_index(const DescriptorIndex& index, const std::filesystem::path& path);
DescriptorIndex load_index(const std::filesystem::path& path);

} // namespace stgl
