#include <gtest/gtest.h>

#include <set>

#include "stgl/error.hpp"
#include "stgl/mining.hpp"
#include "stgl/synthmap.hpp"
#include "support/mining_oracle.hpp"

using namespace stgl;

namespace {

sgm::Descriptor unit2(double angle) {
    return {{static_cast<float>(std::cos(angle)), static_cast<float>(std::sin(angle))}, false};
}

} // namespace

TEST(SampleCacheRows, SizesAndDeterminism) {
    EXPECT_EQ(sample_cache_rows(100, 5000, 1).size(), 100u);
    EXPECT_EQ(sample_cache_rows(100, 5000, 1), sample_cache_rows(100, 5000, 1));
    const auto big = sample_cache_rows(10000, 5000, 2);
    EXPECT_EQ(big.size(), 5000u);
    EXPECT_EQ(std::set<std::size_t>(big.begin(), big.end()).size(), 5000u);
    EXPECT_NE(sample_cache_rows(10000, 5000, 3), big);
    EXPECT_THROW(sample_cache_rows(0, 10, 1), InputError);
}

TEST(MineTriplets, RadiusGates) {
    auto cache = make_cache({unit2(0.1), unit2(0.2), unit2(0.3)}, {{10, 0}, {40, 0}, {100, 0}}, {1, 2, 3});
    auto t = mine_triplets(unit2(0.0).values, {0, 0}, cache, 35, 50, 10);
    ASSERT_TRUE(t);
    EXPECT_EQ(t->positive_id, 1);
    EXPECT_EQ(t->negative_ids, (std::vector<std::int64_t>{3}));
}

TEST(MineTriplets, HardestPositive) {
    // Descriptor distances 0.2 and 0.4 from the query.
    auto at = [](double d) { return 2.0 * std::asin(d / 2.0); };
    auto cache = make_cache({unit2(at(0.4)), unit2(at(0.2)), unit2(0)}, {{5, 0}, {0, 5}, {300, 0}}, {7, 8, 9});
    auto t = mine_triplets(unit2(0).values, {0, 0}, cache, 35, 50, 1);
    ASSERT_TRUE(t);
    EXPECT_EQ(t->positive_id, 8);
    EXPECT_NEAR(t->positive_distance, 0.2, 1e-6);
}

TEST(MineTriplets, SkipAndShortNegatives) {
    auto cache = make_cache({unit2(0), unit2(1)}, {{100, 0}, {0, 300}}, {1, 2});
    EXPECT_FALSE(mine_triplets(unit2(0).values, {0, 0}, cache, 35, 50, 10));
    auto few = make_cache({unit2(0), unit2(1)}, {{0, 0}, {0, 300}}, {1, 2});
    auto t = mine_triplets(unit2(0).values, {0, 0}, few, 35, 50, 10);
    ASSERT_TRUE(t);
    EXPECT_EQ(t->negative_ids.size(), 1u);
}

TEST(MineTriplets, MatchesExhaustiveOracle) {
    Rng rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        oracle::Db db;
        db.dim = 8;
        std::vector<sgm::Descriptor> descs;
        const int n = 50;
        for (int i = 0; i < n; ++i) {
            // Shared rows create exact descriptor ties.
            db.rows.push_back(i % 7 == 3 && i > 0 ? db.rows[i - 1] : oracle::random_unit(rng, 8));
            db.pos.push_back({200 * rng.uniform(), 200 * rng.uniform()});
            db.ids.push_back(static_cast<std::int64_t>(rng.below(1000000)) * 50 + i);
            descs.push_back({db.rows.back(), false});
        }
        auto cache = make_cache(descs, db.pos, db.ids);
        const auto q = oracle::random_unit(rng, 8);
        const Vec2 qp{200 * rng.uniform(), 200 * rng.uniform()};
        const auto got = mine_triplets(q, qp, cache, 35, 50, 10);
        const auto want = oracle::mine(db, q, qp, 35, 50, 10);
        ASSERT_EQ(got.has_value(), want.has_value());
        if (!got) continue;
        EXPECT_EQ(got->positive_id, want->positive);
        EXPECT_EQ(got->negative_ids, want->negatives);
        EXPECT_LE(distance(cache.positions[got->positive_row], qp), 35.0);
        for (auto r : got->negative_rows) EXPECT_GT(distance(cache.positions[r], qp), 50.0);
        EXPECT_EQ(std::set<std::size_t>(got->negative_rows.begin(), got->negative_rows.end()).size(),
                  got->negative_rows.size());
    }
}

TEST(RefreshCache, EmbedsSampledTiles) {
    WorldSpec ws;
    ws.seed = 2;
    ws.height = ws.width = 128;
    auto world = generate_world(ws);
    auto tiles = tile_map(world.satellite, 32, 16);
    ASSERT_EQ(tiles.size(), 49u);
    auto cfg = sgm::SgmConfig::desk();
    sgm::SgmNetwork model(cfg);
    auto a = refresh_cache(model, tiles, 20, 9, 3);
    auto b = refresh_cache(model, tiles, 20, 9, 3);
    EXPECT_EQ(a.size(), 20u);
    EXPECT_EQ(a.tile_ids, b.tile_ids);
    EXPECT_EQ(a.descriptors, b.descriptors);
    EXPECT_EQ(a.dim, cfg.c_final);
    EXPECT_EQ(a.epoch_stamp, 3);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(tiles[a.source_rows[i]].tile_id, a.tile_ids[i]);
    EXPECT_EQ(refresh_cache(model, tiles, 5000, 9).size(), 49u);
    EXPECT_THROW(refresh_cache(model, {}, 10, 1), InputError);
}
