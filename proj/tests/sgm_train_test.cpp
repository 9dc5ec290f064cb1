#include <gtest/gtest.h>

#include <filesystem>

#include "stgl/error.hpp"
#include "stgl/sgm_train.hpp"
#include "stgl/synthmap.hpp"

using namespace stgl;
using namespace stgl::sgm;

namespace {

// 5x5 grid of 32 px tiles, 32 m apart.
std::vector<PairedCrop> small_pairs(std::uint64_t seed = 3) {
    WorldSpec ws;
    ws.seed = seed;
    ws.height = ws.width = 96;
    ws.meters_per_pixel = 2.0;
    auto w = generate_world(ws);
    return pair_crops(tile_map(w.satellite, 32, 16), tile_map(w.thermal, 32, 16));
}

SgmConfig quick_config() {
    SgmConfig c = SgmConfig::desk();
    c.tiny_widths = {4, 8, 8, 8};
    c.c_target = 4;
    c.num_clusters = 4;
    c.c_final = 16;
    c.domain_hidden = 8;
    c.epochs = 3;
    c.queries_per_epoch = 8;
    c.cache_size = 20;
    c.negatives_per_query = 4;
    c.kmeans_images = 8;
    c.seed = 9;
    return c;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("stgl_sgm_train_" + name);
}

} // namespace

TEST(TrainSgm, HistoryCheckpointAndDeterminism) {
    auto pairs = small_pairs();
    DatasetSplit split;
    for (std::size_t i = 0; i < pairs.size(); ++i) (i % 5 == 0 ? split.val : split.train).push_back(pairs[i]);

    const auto ckpt = temp_path("best.ckpt");
    std::filesystem::remove(ckpt);
    SgmTrainOptions opts;
    opts.checkpoint_path = ckpt;
    int callbacks = 0;
    opts.on_epoch = [&](const SgmEpochStats&) { ++callbacks; };

    const auto cfg = quick_config();
    auto a = train_sgm(cfg, split, {}, opts);
    ASSERT_EQ(a.history.size(), 3u);
    EXPECT_EQ(callbacks, 3);
    for (const auto& s : a.history) {
        EXPECT_GT(s.batches, 0);
        EXPECT_GT(s.triplets, 0);
        EXPECT_GE(s.val_metric, 0.0);
        EXPECT_LE(s.val_metric, 100.0);
        EXPECT_EQ(s.dann, 0.0);
    }
    ASSERT_GE(a.best_epoch, 0);
    EXPECT_EQ(a.best_val, a.history[a.best_epoch].val_metric);
    for (const auto& s : a.history) EXPECT_LE(s.val_metric, a.best_val);

    // The checkpoint holds the returned (best) weights.
    ASSERT_TRUE(std::filesystem::exists(ckpt));
    nlohmann::json meta;
    auto loaded = load_sgm(ckpt, &meta);
    EXPECT_EQ(meta["extra"]["epoch"].get<int>(), a.best_epoch);
    const Image& probe = split.val.front().thermal.image;
    EXPECT_EQ(embed(*a.model, probe).values, embed(*loaded, probe).values);

    auto b = train_sgm(cfg, split);
    for (std::size_t e = 0; e < a.history.size(); ++e) EXPECT_EQ(a.history[e].loss, b.history[e].loss);
    EXPECT_EQ(embed(*a.model, probe).values, embed(*b.model, probe).values);
    std::filesystem::remove(ckpt);
}

TEST(TrainSgm, DannAndGeneratedPool) {
    DatasetSplit split;
    split.train = small_pairs(3);
    auto generated = small_pairs(8);
    for (auto& p : generated) {
        p.source = CropSource::generated;
        p.satellite.tile_id += 1000;
        p.thermal.tile_id += 1000;
    }
    auto cfg = quick_config();
    cfg.dann_mode = DannMode::only_positive;
    cfg.use_generated = true;
    cfg.epochs = 2;
    auto r = train_sgm(cfg, split, generated);
    ASSERT_EQ(r.history.size(), 2u);
    for (const auto& s : r.history) {
        EXPECT_GT(s.dann, 0.0);
        EXPECT_EQ(s.val_metric, -1.0);
    }
    // Without a validation split the last epoch wins.
    EXPECT_EQ(r.best_epoch, 1);
}

TEST(TrainSgm, RejectsEmptyTraining) {
    DatasetSplit split;
    EXPECT_THROW(train_sgm(quick_config(), split), InputError);
    split.train = small_pairs();
    auto cfg = quick_config();
    cfg.use_generated = true;
    EXPECT_THROW(train_sgm(cfg, split, {}), InputError);
}
