#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "stgl/geodata.hpp"
#include "stgl/sgm.hpp"

namespace stgl::sgm {

struct SgmEpochStats {
    int epoch = 0;
    double loss = 0.0;    // mean total loss over the epoch's batches
    double triplet = 0.0; // mean triplet term
    double dann = 0.0;    // mean DANN term (0 when off)
    int batches = 0;
    int triplets = 0;
    int skipped_queries = 0; // no positive in the cache
    double val_metric = -1.0; // R_d@1 (percent) on the validation split, -1 without one
    double seconds = 0.0;
};

struct SgmTrainOptions {
    // Best-validation checkpoint (every epoch when there is no validation split).
    std::optional<std::filesystem::path> checkpoint_path;
    std::function<void(const SgmEpochStats&)> on_epoch;
};

struct SgmTrainResult {
    std::unique_ptr<SgmNetwork> model; // best-validation weights, eval mode
    std::vector<SgmEpochStats> history;
    int best_epoch = -1;
    double best_val = -1.0;
    long skipped_queries = 0;
};

// Thermal sides are used as given: apply CE beforehand when config.use_ce.
SgmTrainResult train_sgm(const SgmConfig& config, const DatasetSplit& splits,
                         const std::vector<PairedCrop>& generated = {}, const SgmTrainOptions& options = {});

// R_d@1 (percent) of thermal queries against their own satellite tiles.
double validation_recall(SgmNetwork& model, const std::vector<PairedCrop>& pairs, double prior_radius_m);

} // namespace stgl::sgm
