#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <limits>

#include "stgl/error.hpp"
#include "stgl/retrieval.hpp"
#include "stgl/synthmap.hpp"
#include "support/oracle.hpp"

using namespace stgl;

namespace {

struct Instance {
    oracle::Db db;
    DescriptorIndex index;
};

Instance random_instance(Rng& rng, int n, int dim, double extent = 1000.0) {
    Instance inst;
    inst.db.dim = dim;
    std::vector<float> flat;
    for (int i = 0; i < n; ++i) {
        inst.db.rows.push_back(oracle::random_unit(rng, dim));
        inst.db.pos.push_back({extent * rng.uniform(), extent * rng.uniform()});
        inst.db.ids.push_back(1000 + 3 * i);
        flat.insert(flat.end(), inst.db.rows.back().begin(), inst.db.rows.back().end());
    }
    inst.index = make_index(dim, flat, inst.db.pos, inst.db.ids, "abc");
    return inst;
}

void expect_same(const RetrievalResult& got, const std::vector<oracle::Hit>& want) {
    ASSERT_EQ(got.neighbors.size(), want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
        EXPECT_EQ(got.neighbors[i].tile_id, want[i].id) << "rank " << i;
        EXPECT_NEAR(got.neighbors[i].distance, want[i].dist, 1e-9 * std::max(1.0, want[i].dist));
    }
}

const auto kTmp = std::filesystem::temp_directory_path() / "stgl_retrieval_test";

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::vector<unsigned char>& b) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

} // namespace

TEST(Knn, ExactMatchRanksFirst) {
    Rng rng(1);
    auto inst = random_instance(rng, 20, 8);
    auto r = knn(inst.index, inst.index.row(5), 3);
    ASSERT_EQ(r.neighbors.size(), 3u);
    EXPECT_EQ(r.neighbors[0].tile_id, inst.db.ids[5]);
    EXPECT_EQ(r.neighbors[0].distance, 0.0);
}

TEST(Knn, MatchesBruteForce) {
    Rng rng(2);
    auto inst = random_instance(rng, 200, 16);
    for (int t = 0; t < 20; ++t) {
        const auto q = oracle::random_unit(rng, 16);
        expect_same(knn(inst.index, q, 10), oracle::ranked(inst.db, q, 10));
    }
}

TEST(Knn, TiesBreakOnTileId) {
    std::vector<float> flat{1, 0, 0, 1, 1, 0, 0, 1};
    auto idx = make_index(2, flat, {{0, 0}, {1, 0}, {2, 0}, {3, 0}}, {40, 30, 20, 10});
    auto r = knn(idx, std::vector<float>{1, 0}, 4);
    EXPECT_EQ(r.neighbors[0].tile_id, 20);
    EXPECT_EQ(r.neighbors[1].tile_id, 40);
    EXPECT_EQ(r.neighbors[2].tile_id, 10);
    EXPECT_EQ(r.neighbors[3].tile_id, 30);
}

TEST(Knn, KBounds) {
    Rng rng(3);
    auto inst = random_instance(rng, 5, 4);
    const auto q = oracle::random_unit(rng, 4);
    EXPECT_THROW(knn(inst.index, q, 0), InputError);
    EXPECT_EQ(knn(inst.index, q, 50).neighbors.size(), 5u);
    EXPECT_THROW(knn(inst.index, std::vector<float>(3, 0.5f), 1), InputError);
}

TEST(KnnWithin, RadiusExcludesGlobalNearest) {
    std::vector<float> flat{1, 0, 0.6f, 0.8f};
    auto idx = make_index(2, flat, {{1000, 0}, {0, 0}}, {1, 2});
    const std::vector<float> q{1, 0};
    EXPECT_EQ(knn(idx, q, 1).neighbors[0].tile_id, 1);
    auto r = knn_within(idx, q, 1, {0, 0}, 100);
    EXPECT_EQ(r.neighbors[0].tile_id, 2);
    auto empty = knn_within(idx, q, 1, {5000, 5000}, 10);
    EXPECT_TRUE(empty.empty_prior);
    EXPECT_TRUE(empty.neighbors.empty());
    EXPECT_THROW(knn_within(idx, q, 1, {0, 0}, 0.0), InputError);
}

TEST(KnnWithin, MatchesBruteForceAndInfiniteRadiusIsKnn) {
    Rng rng(4);
    auto inst = random_instance(rng, 300, 8);
    const double inf = std::numeric_limits<double>::infinity();
    for (int t = 0; t < 30; ++t) {
        const auto q = oracle::random_unit(rng, 8);
        const Vec2 c{1000 * rng.uniform(), 1000 * rng.uniform()};
        expect_same(knn_within(inst.index, q, 5, c, 200), oracle::ranked(inst.db, q, 5, c, 200));
        auto a = knn_within(inst.index, q, 7, c, inf);
        auto b = knn(inst.index, q, 7);
        ASSERT_EQ(a.neighbors.size(), b.neighbors.size());
        for (std::size_t i = 0; i < a.neighbors.size(); ++i) {
            EXPECT_EQ(a.neighbors[i].tile_id, b.neighbors[i].tile_id);
            EXPECT_EQ(a.neighbors[i].distance, b.neighbors[i].distance);
        }
    }
}

TEST(IndexFile, RoundTripIsBitExact) {
    std::filesystem::create_directories(kTmp);
    Rng rng(5);
    auto inst = random_instance(rng, 37, 12);
    inst.index.model_fingerprint = std::string(64, 'f');
    save_index(inst.index, kTmp / "a.idx");
    const auto back = load_index(kTmp / "a.idx");
    EXPECT_EQ(back.c_final, inst.index.c_final);
    EXPECT_EQ(back.descriptors, inst.index.descriptors);
    EXPECT_EQ(back.tile_ids, inst.index.tile_ids);
    EXPECT_EQ(back.model_fingerprint, inst.index.model_fingerprint);
    ASSERT_EQ(back.positions.size(), inst.index.positions.size());
    for (std::size_t i = 0; i < back.positions.size(); ++i) EXPECT_EQ(back.positions[i], inst.index.positions[i]);
    // Header layout.
    const auto bytes = slurp(kTmp / "a.idx");
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "STGL");
    EXPECT_EQ(bytes.size(), 20u + 37u * (12 * 4 + 16 + 8) + 64u + 4u);
    save_index(back, kTmp / "b.idx");
    EXPECT_EQ(slurp(kTmp / "b.idx"), bytes);
}

TEST(IndexFile, CorruptionVersionAndTruncation) {
    std::filesystem::create_directories(kTmp);
    Rng rng(6);
    auto inst = random_instance(rng, 10, 8);
    save_index(inst.index, kTmp / "c.idx");
    const auto good = slurp(kTmp / "c.idx");

    auto bad = good;
    bad[20 + 13] ^= 0x40;
    spit(kTmp / "bad.idx", bad);
    try {
        load_index(kTmp / "bad.idx");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos);
    }

    auto ver = good;
    ver[4] = 2;
    spit(kTmp / "ver.idx", ver);
    try {
        load_index(kTmp / "ver.idx");
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("unsupported index version 2"), std::string::npos);
    }

    auto cut = good;
    cut.resize(cut.size() - 9);
    spit(kTmp / "cut.idx", cut);
    EXPECT_THROW(load_index(kTmp / "cut.idx"), FormatError);

    auto magic = good;
    magic[0] = 'X';
    spit(kTmp / "magic.idx", magic);
    EXPECT_THROW(load_index(kTmp / "magic.idx"), FormatError);
    std::filesystem::remove_all(kTmp);
}

TEST(IndexValidation, RejectsBadIndexes) {
    EXPECT_THROW(make_index(2, {1, 0, 1, 0}, {{0, 0}, {1, 1}}, {7, 7}), InputError);
    EXPECT_THROW(make_index(2, {2, 0}, {{0, 0}}, {1}), InputError);
    EXPECT_THROW(make_index(2, {1, 0}, {{0, 0}}, {1}, std::string(65, 'x')), InputError);
}

TEST(BuildIndex, NineTilesDeterministic) {
    WorldSpec ws;
    ws.seed = 8;
    ws.height = ws.width = 96;
    auto world = generate_world(ws);
    auto tiles = tile_map(world.satellite, 32, 32);
    ASSERT_EQ(tiles.size(), 9u);
    std::reverse(tiles.begin(), tiles.end());
    auto cfg = sgm::SgmConfig::desk();
    cfg.backbone = "tiny";
    sgm::SgmNetwork model(cfg);
    auto a = build_index(model, tiles);
    auto b = build_index(model, tiles);
    EXPECT_EQ(a.size(), 9u);
    EXPECT_EQ(a.descriptors, b.descriptors);
    EXPECT_EQ(a.model_fingerprint.size(), 64u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a.tile_ids[i], static_cast<std::int64_t>(i));
        double n = 0;
        for (float v : a.row(i)) n += double(v) * v;
        EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    }
    EXPECT_THROW(build_index(model, {}), InputError);
}
