#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "stgl/geodata.hpp"
#include "stgl/sgm.hpp"

namespace stgl {

// Database embeddings cached for one epoch of mining.
struct MiningCache {
    int dim = 0;
    std::vector<float> descriptors; // row-major [size, dim]
    std::vector<Vec2> positions;
    std::vector<std::int64_t> tile_ids;
    // Index of each row in the database list the cache was drawn from.
    std::vector<std::size_t> source_rows;
    int epoch_stamp = 0;

    std::size_t size() const { return tile_ids.size(); }
    std::span<const float> row(std::size_t i) const {
        return {descriptors.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
};

// Seeded uniform choice of min(cache_size, |db|) distinct rows, in sampled order.
std::vector<std::size_t> sample_cache_rows(std::size_t db_size, int cache_size, std::uint64_t seed);

MiningCache refresh_cache(sgm::SgmNetwork& model, const std::vector<GeoTile>& db_tiles, int cache_size,
                          std::uint64_t seed, int epoch = 0);

// Cache over precomputed descriptors (tests, offline tools).
MiningCache make_cache(std::vector<sgm::Descriptor> descriptors, std::vector<Vec2> positions,
                       std::vector<std::int64_t> tile_ids, int epoch = 0);

struct TripletBatch {
    std::size_t positive_row = 0; // cache rows
    std::vector<std::size_t> negative_rows;
    std::int64_t positive_id = 0;
    std::vector<std::int64_t> negative_ids;
    double positive_distance = 0.0;
    std::vector<double> negative_distances;
};

// Hardest positive within pos_radius_m and the n_neg hardest negatives beyond
// neg_radius_m, by descriptor distance with ties on ascending tile_id.
// std::nullopt means the query has no positive and must be skipped.
std::optional<TripletBatch> mine_triplets(std::span<const float> query_desc, const Vec2& query_pos,
                                          const MiningCache& cache, double pos_radius_m, double neg_radius_m,
                                          int n_neg);

} // namespace stgl
