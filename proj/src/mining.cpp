#include "stgl/mining.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <numeric>

#include "stgl/error.hpp"

namespace stgl {

std::vector<std::size_t> sample_cache_rows(std::size_t db_size, int cache_size, std::uint64_t seed) {
    if (db_size == 0) throw InputError("mining cache: empty database");
    if (cache_size < 1) throw InputError("mining cache: cache_size must be >= 1");
    std::vector<std::size_t> rows(db_size);
    std::iota(rows.begin(), rows.end(), 0);
    Rng rng(seed);
    // Partial Fisher-Yates: the first `take` slots are a uniform sample.
    const std::size_t take = std::min(db_size, static_cast<std::size_t>(cache_size));
    for (std::size_t i = 0; i < take; ++i) std::swap(rows[i], rows[i + rng.below(db_size - i)]);
    rows.resize(take);
    return rows;
}

MiningCache refresh_cache(sgm::SgmNetwork& model, const std::vector<GeoTile>& db_tiles, int cache_size,
                          std::uint64_t seed, int epoch) {
    const auto rows = sample_cache_rows(db_tiles.size(), cache_size, seed);
    std::vector<const Image*> images;
    images.reserve(rows.size());
    for (auto r : rows) images.push_back(&db_tiles[r].image);
    auto descs = sgm::embed_all(model, images);
    MiningCache cache;
    cache.dim = static_cast<int>(descs.front().size());
    cache.epoch_stamp = epoch;
    cache.descriptors.reserve(rows.size() * cache.dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        cache.descriptors.insert(cache.descriptors.end(), descs[i].values.begin(), descs[i].values.end());
        cache.positions.push_back(db_tiles[rows[i]].position);
        cache.tile_ids.push_back(db_tiles[rows[i]].tile_id);
    }
    cache.source_rows = rows;
    return cache;
}

MiningCache make_cache(std::vector<sgm::Descriptor> descriptors, std::vector<Vec2> positions,
                       std::vector<std::int64_t> tile_ids, int epoch) {
    if (descriptors.empty()) throw InputError("mining cache: empty database");
    if (descriptors.size() != positions.size() || descriptors.size() != tile_ids.size()) {
        throw InputError("mining cache: descriptor, position and id counts differ");
    }
    MiningCache cache;
    cache.dim = static_cast<int>(descriptors.front().size());
    cache.epoch_stamp = epoch;
    for (std::size_t i = 0; i < descriptors.size(); ++i) {
        if (static_cast<int>(descriptors[i].size()) != cache.dim) throw InputError("mining cache: ragged descriptors");
        cache.descriptors.insert(cache.descriptors.end(), descriptors[i].values.begin(), descriptors[i].values.end());
        cache.source_rows.push_back(i);
    }
    cache.positions = std::move(positions);
    cache.tile_ids = std::move(tile_ids);
    return cache;
}

std::optional<TripletBatch> mine_triplets(std::span<const float> query_desc, const Vec2& query_pos,
                                          const MiningCache& cache, double pos_radius_m, double neg_radius_m,
                                          int n_neg) {
    if (cache.size() == 0) throw InputError("mine_triplets: empty cache");
    if (static_cast<int>(query_desc.size()) != cache.dim) {
        throw InputError("mine_triplets: query dimension " + std::to_string(query_desc.size()) + " != cache " +
                         std::to_string(cache.dim));
    }
    struct Cand {
        double dist;
        std::int64_t id;
        std::size_t row;
        bool operator<(const Cand& o) const { return dist != o.dist ? dist < o.dist : id < o.id; }
    };
    std::optional<Cand> best_pos;
    std::vector<Cand> negs;
    for (std::size_t i = 0; i < cache.size(); ++i) {
        const double geo = distance(query_pos, cache.positions[i]);
        const bool is_pos = geo <= pos_radius_m;
        const bool is_neg = geo > neg_radius_m;
        if (!is_pos && !is_neg) continue;
        const Cand c{sgm::descriptor_distance(query_desc, cache.row(i)), cache.tile_ids[i], i};
        if (is_pos) {
            if (!best_pos || c < *best_pos) best_pos = c;
        } else {
            negs.push_back(c);
        }
    }
    if (!best_pos) return std::nullopt;
    const std::size_t take = std::min(negs.size(), static_cast<std::size_t>(std::max(n_neg, 0)));
    if (take < static_cast<std::size_t>(n_neg)) {
        spdlog::warn("mine_triplets: only {} negatives beyond {} m (wanted {})", negs.size(), neg_radius_m, n_neg);
    }
    std::partial_sort(negs.begin(), negs.begin() + take, negs.end());
    TripletBatch out;
    out.positive_row = best_pos->row;
    out.positive_id = best_pos->id;
    out.positive_distance = best_pos->dist;
    for (std::size_t i = 0; i < take; ++i) {
        out.negative_rows.push_back(negs[i].row);
        out.negative_ids.push_back(negs[i].id);
        out.negative_distances.push_back(negs[i].dist);
    }
    return out;
}

} // namespace stgl
