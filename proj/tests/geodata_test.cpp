#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "stgl/error.hpp"
#include "stgl/geodata.hpp"
#include "stgl/rng.hpp"

using namespace stgl;

namespace {

RasterMap blank_map(int h, int w, int channels = 1, double mpp = 1.0, Vec2 origin = {}) {
    RasterMap m;
    m.pixels = Image(channels, h, w, 0.5);
    m.meters_per_pixel = mpp;
    m.origin = origin;
    return m;
}

// Deterministic texture so crops differ.
RasterMap ramp_map(int h, int w, int channels) {
    RasterMap m = blank_map(h, w, channels, 2.0, {100.0, -50.0});
    for (int c = 0; c < channels; ++c)
        for (int r = 0; r < h; ++r)
            for (int col = 0; col < w; ++col) m.pixels.at(c, r, col) = ((r * 7 + col * 3 + c) % 101) / 100.0;
    return m;
}

PairedCrop pair_with_fraction(std::int64_t id, double f) {
    PairedCrop p;
    p.thermal.tile_id = p.satellite.tile_id = id;
    p.invalid_fraction = f;
    return p;
}

} // namespace

TEST(TileMap, CountsForSmallMap) {
    EXPECT_EQ(tile_map(blank_map(582, 582), 512, 35).size(), 9u);
    auto one = tile_map(blank_map(512, 512), 512, 35);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0].offset, (PixelOffset{0, 0}));
}

TEST(TileMap, MatchesBruteForceEnumeration) {
    const double mpp = 0.8;
    const Vec2 origin{10.0, 20.0};
    RasterMap map = blank_map(1024, 1024, 1, mpp, origin);
    auto tiles = tile_map(map, 512, 35);
    std::vector<PixelOffset> expected;
    for (int r = 0; r + 512 <= 1024; ++r) {
        if (r % 35) continue;
        for (int c = 0; c + 512 <= 1024; ++c)
            if (c % 35 == 0) expected.push_back({r, c});
    }
    ASSERT_EQ(tiles.size(), 225u);
    ASSERT_EQ(expected.size(), 225u);
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        EXPECT_EQ(tiles[i].offset, expected[i]);
        EXPECT_EQ(tiles[i].tile_id, static_cast<std::int64_t>(i));
        EXPECT_EQ(tiles[i].image.height, 512);
    }
    EXPECT_DOUBLE_EQ(tiles[0].position.x, origin.x + 256 * mpp);
    EXPECT_DOUBLE_EQ(tiles[0].position.y, origin.y + 256 * mpp);
}

TEST(TileMap, CountFormulaProperty) {
    Rng rng(7);
    for (int trial = 0; trial < 40; ++trial) {
        const int crop = 1 + static_cast<int>(rng.below(12));
        const int h = crop + static_cast<int>(rng.below(30));
        const int w = crop + static_cast<int>(rng.below(30));
        const int stride = 1 + static_cast<int>(rng.below(9));
        const auto n = tile_map(blank_map(h, w), crop, stride).size();
        EXPECT_EQ(n, static_cast<std::size_t>(((h - crop) / stride + 1) * ((w - crop) / stride + 1)));
    }
}

TEST(TileMap, CropContentAndFirstId) {
    RasterMap map = ramp_map(40, 50, 3);
    auto tiles = tile_map(map, 16, 8, 1000);
    ASSERT_FALSE(tiles.empty());
    EXPECT_EQ(tiles.front().tile_id, 1000);
    const auto& t = tiles[5];
    for (int c = 0; c < 3; ++c)
        EXPECT_DOUBLE_EQ(t.image.at(c, 3, 4), map.pixels.at(c, t.offset.row + 3, t.offset.col + 4));
}

TEST(TileMap, Errors) {
    EXPECT_THROW(tile_map(blank_map(100, 600), 512, 35), InputError);
    EXPECT_THROW(tile_map(blank_map(600, 600), 512, 0), InputError);
}

TEST(PairCrops, CoRegisteredMapsPairUp) {
    auto sat = tile_map(ramp_map(582, 582, 3), 512, 35);
    auto th = tile_map(ramp_map(582, 582, 1), 512, 35);
    auto pairs = pair_crops(sat, th);
    ASSERT_EQ(pairs.size(), 9u);
    for (const auto& p : pairs) {
        EXPECT_EQ(p.satellite.position, p.thermal.position);
        EXPECT_EQ(p.source, CropSource::real);
        EXPECT_EQ(p.invalid_fraction, 0.0);
        EXPECT_EQ(p.satellite.image.channels, 3);
        EXPECT_EQ(p.thermal.image.channels, 1);
    }
}

TEST(PairCrops, InvalidFractionFromMask) {
    RasterMap th = blank_map(512, 512);
    th.validity_mask.assign(512 * 512, 1);
    for (int r = 0; r < 256; ++r)
        for (int c = 0; c < 512; ++c) th.validity_mask[r * 512 + c] = 0;
    auto pairs = pair_crops(tile_map(blank_map(512, 512, 3), 512, 35), tile_map(th, 512, 35));
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_DOUBLE_EQ(pairs[0].invalid_fraction, 0.5);
}

TEST(PairCrops, DisjointOffsetsNameTheOffset) {
    GeoTile a, b;
    a.offset = {0, 0};
    b.offset = {35, 70};
    a.image = Image(3, 4, 4);
    b.image = Image(1, 4, 4);
    try {
        pair_crops({a}, {b});
        FAIL() << "expected mismatch";
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("35"), std::string::npos);
    }
}

TEST(FilterInvalid, Thresholds) {
    auto ids = [](const std::vector<PairedCrop>& v) {
        std::vector<std::int64_t> out;
        for (const auto& p : v) out.push_back(p.tile_id());
        return out;
    };
    std::vector<PairedCrop> a{pair_with_fraction(0, 0), pair_with_fraction(1, 0.5), pair_with_fraction(2, 0.01)};
    EXPECT_EQ(ids(filter_invalid(a, 0.0)), (std::vector<std::int64_t>{0}));
    EXPECT_EQ(ids(filter_invalid(a, 1.0)), (std::vector<std::int64_t>{0, 1, 2}));
    std::vector<PairedCrop> b{pair_with_fraction(0, 0), pair_with_fraction(1, 0.05), pair_with_fraction(2, 0.2),
                              pair_with_fraction(3, 0.11)};
    EXPECT_EQ(ids(filter_invalid(b, 0.1)), (std::vector<std::int64_t>{0, 1}));
    EXPECT_THROW(filter_invalid(b, 1.5), InputError);
}

TEST(SplitByRegion, HalfPlanePartitionMatchesBruteForce) {
    auto th = tile_map(ramp_map(1024, 1024, 1), 512, 35);
    auto sat = tile_map(ramp_map(1024, 1024, 3), 512, 35);
    auto pairs = pair_crops(sat, th);
    // Map spans x in [100, 2148] at 2 m/px; split at the center line.
    const double mid = 100.0 + 1024.0;
    SplitSpec spec{{{"train", 0, -1e9, mid, 1e9}, {"test", mid, -1e9, 1e9, 1e9}}};
    auto split = split_by_region(pairs, spec);
    std::size_t want_train = 0;
    for (const auto& p : pairs) want_train += p.position().x <= mid;
    EXPECT_EQ(split.train.size(), want_train);
    EXPECT_EQ(split.train.size() + split.val.size() + split.test.size(), 225u);
    std::set<std::int64_t> seen;
    for (const auto* part : {&split.train, &split.val, &split.test})
        for (const auto& p : *part) EXPECT_TRUE(seen.insert(p.tile_id()).second);
    EXPECT_EQ(seen.size(), 225u);
}

TEST(SplitByRegion, SingleRegionAndUnassigned) {
    std::vector<PairedCrop> pairs{pair_with_fraction(4, 0), pair_with_fraction(9, 0)};
    pairs[1].thermal.position = {500, 500};
    auto all = split_by_region(pairs, {{{"val", -1e6, -1e6, 1e6, 1e6}}});
    EXPECT_EQ(all.val.size(), 2u);
    try {
        split_by_region(pairs, {{{"train", -1, -1, 1, 1}}});
        FAIL() << "expected unassigned error";
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("9"), std::string::npos);
    }
}

TEST(RasterIo, RoundTripWithMaskAndSplitSpec) {
    const auto dir = std::filesystem::temp_directory_path() / "stgl_geodata_test";
    std::filesystem::create_directories(dir);
    RasterMap map = ramp_map(20, 30, 3);
    map.validity_mask.assign(20 * 30, 1);
    map.validity_mask[7] = 0;
    save_raster(dir / "sat.ppm", map);
    RasterMap back = load_raster(dir / "sat.ppm");
    EXPECT_EQ(back.meters_per_pixel, map.meters_per_pixel);
    EXPECT_EQ(back.origin, map.origin);
    EXPECT_EQ(back.validity_mask, map.validity_mask);
    ASSERT_TRUE(back.pixels.same_shape(map.pixels));
    for (std::size_t i = 0; i < map.pixels.data.size(); ++i)
        EXPECT_NEAR(back.pixels.data[i], map.pixels.data[i], 1.0 / 65535.0);

    SplitSpec spec{{{"train", 0, 0, 10, 10}, {"val", 10, 0, 20, 10}, {"test", 20, 0, 30, 10}}};
    save_split_spec(dir / "split.json", spec);
    auto loaded = load_split_spec(dir / "split.json");
    ASSERT_EQ(loaded.regions.size(), 3u);
    EXPECT_EQ(loaded.regions[1].split, "val");
    EXPECT_EQ(loaded.regions[2].x_max, 30);
    EXPECT_THROW(load_raster(dir / "missing.ppm"), FormatError);
    std::filesystem::remove_all(dir);
}
