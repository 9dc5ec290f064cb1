#include "stgl/sgm_train.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <numeric>

#include "stgl/error.hpp"
#include "stgl/evalkit.hpp"
#include "stgl/mining.hpp"
#include "stgl/nn/checkpoint.hpp"
#include "stgl/retrieval.hpp"

namespace stgl::sgm {

namespace {

// Query thermal tiles and the satellite database they mine against.
struct Pool {
    std::vector<const PairedCrop*> pairs;
    std::vector<GeoTile> db;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;

    explicit Pool(const std::vector<PairedCrop>& src) {
        for (const auto& p : src) {
            pairs.push_back(&p);
            db.push_back(p.satellite);
        }
        order.resize(pairs.size());
        std::iota(order.begin(), order.end(), 0);
    }

    // Cycles through a fresh permutation each pass.
    const PairedCrop& next(Rng& rng) {
        if (cursor == 0) rng.shuffle(order.begin(), order.end());
        const PairedCrop& p = *pairs[order[cursor]];
        cursor = (cursor + 1) % order.size();
        return p;
    }
};

struct Query {
    const PairedCrop* pair;
    const Pool* pool;
    const MiningCache* cache;
};

nn::Checkpoint snapshot(SgmNetwork& model) {
    nn::Checkpoint c;
    nn::export_state(model, "", c);
    return c;
}

} // namespace

double validation_recall(SgmNetwork& model, const std::vector<PairedCrop>& pairs, double prior_radius_m) {
    if (pairs.empty()) return -1.0;
    std::vector<GeoTile> db;
    std::vector<const Image*> thermal;
    std::vector<Vec2> truth;
    for (const auto& p : pairs) {
        db.push_back(p.satellite);
        thermal.push_back(&p.thermal.image);
        truth.push_back(p.position());
    }
    const auto index = build_index(model, db);
    return recall_prior(index, embed_all(model, thermal), truth, 1, prior_radius_m);
}

SgmTrainResult train_sgm(const SgmConfig& config, const DatasetSplit& splits, const std::vector<PairedCrop>& generated,
                         const SgmTrainOptions& options) {
    config.validate();
    if (splits.train.empty()) throw InputError("train_sgm: empty training split");
    if (config.use_generated && generated.empty()) throw InputError("train_sgm: use_generated set but no generated pairs");

    SgmTrainResult res;
    res.model = std::make_unique<SgmNetwork>(config);
    SgmNetwork& model = *res.model;
    Rng rng(hash_key(config.seed, 0x747261696e));

    Pool real(splits.train);
    std::optional<Pool> gen;
    if (config.use_generated) gen.emplace(generated);

    if (config.kmeans_images > 0) {
        const auto rows = sample_cache_rows(splits.train.size(), config.kmeans_images, hash_key(config.seed, 0x6b6d));
        std::vector<const Image*> imgs;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& p = splits.train[rows[i]];
            imgs.push_back(i % 2 ? &p.thermal.image : &p.satellite.image);
        }
        init_centroids(model, imgs, config.seed);
    } else {
        init_centroids(model, {}, config.seed);
    }

    nn::Adam opt(model.parameters(), {.lr = config.learning_rate});
    std::optional<nn::Checkpoint> best;
    const bool has_val = !splits.val.empty();

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        SgmEpochStats stats;
        stats.epoch = epoch;

        const MiningCache real_cache =
            refresh_cache(model, real.db, config.cache_size, hash_key(config.seed, epoch, 1), epoch);
        std::optional<MiningCache> gen_cache;
        if (gen) gen_cache = refresh_cache(model, gen->db, config.cache_size, hash_key(config.seed, epoch, 2), epoch);

        std::vector<Query> queries;
        for (int i = 0; i < config.queries_per_epoch; ++i) {
            const bool use_gen = gen && rng.uniform() < config.generated_mix_ratio;
            Pool& pool = use_gen ? *gen : real;
            queries.push_back({&pool.next(rng), &pool, use_gen ? &*gen_cache : &real_cache});
        }

        for (std::size_t start = 0; start < queries.size(); start += config.batch_queries) {
            const std::size_t end = std::min(queries.size(), start + static_cast<std::size_t>(config.batch_queries));
            std::vector<const Image*> qimgs;
            for (std::size_t i = start; i < end; ++i) qimgs.push_back(&queries[i].pair->thermal.image);
            const auto qdesc = embed_all(model, qimgs);

            std::vector<const Image*> batch_imgs;
            std::vector<int> qi, pi, ni;
            for (std::size_t i = start; i < end; ++i) {
                const Query& q = queries[i];
                const auto trip = mine_triplets(qdesc[i - start].values, q.pair->position(), *q.cache,
                                                config.pos_radius_m, config.neg_radius_m, config.negatives_per_query);
                if (!trip || trip->negative_rows.empty()) {
                    ++stats.skipped_queries;
                    continue;
                }
                const int q_row = static_cast<int>(batch_imgs.size());
                batch_imgs.push_back(&q.pair->thermal.image);
                const int p_row = static_cast<int>(batch_imgs.size());
                batch_imgs.push_back(&q.pool->db[q.cache->source_rows[trip->positive_row]].image);
                for (auto nr : trip->negative_rows) {
                    qi.push_back(q_row);
                    pi.push_back(p_row);
                    ni.push_back(static_cast<int>(batch_imgs.size()));
                    batch_imgs.push_back(&q.pool->db[q.cache->source_rows[nr]].image);
                }
            }
            if (qi.empty()) continue;

            model.train();
            opt.zero_grad();
            const Tensor desc = model.embed(images_to_input(batch_imgs));
            const Tensor dq = nn::gather_rows(desc, qi);
            const Tensor dp = nn::gather_rows(desc, pi);
            const Tensor dn = nn::gather_rows(desc, ni);
            const Tensor lt = triplet_margin_loss(dq, dp, dn, config.margin);
            Tensor ld;
            if (config.dann_mode != DannMode::off) ld = dann_loss(model.domain(), dq, dp, dn, config.dann_mode);
            const Tensor loss = sgm_total_loss(lt, ld, config.lambda2);
            if (!std::isfinite(loss.item())) {
                throw TrainingError("train_sgm: non-finite loss at epoch " + std::to_string(epoch));
            }
            loss.backward();
            opt.step();

            stats.loss += loss.item();
            stats.triplet += nn::mean(lt).item();
            if (ld.defined()) stats.dann += nn::mean(ld).item();
            stats.triplets += static_cast<int>(qi.size());
            ++stats.batches;
        }
        model.eval();
        if (stats.batches) {
            stats.loss /= stats.batches;
            stats.triplet /= stats.batches;
            stats.dann /= stats.batches;
        }
        if (stats.skipped_queries) {
            spdlog::info("epoch {}: skipped {} queries without a positive in the cache", epoch, stats.skipped_queries);
        }
        res.skipped_queries += stats.skipped_queries;

        if (has_val) stats.val_metric = validation_recall(model, splits.val, config.val_prior_radius_m);
        // Ties keep the later epoch: training loss keeps falling after recall saturates.
        if (!has_val || stats.val_metric >= res.best_val) {
            res.best_val = stats.val_metric;
            res.best_epoch = epoch;
            best = snapshot(model);
            if (options.checkpoint_path) {
                save_sgm(*options.checkpoint_path, model, {{"epoch", epoch}, {"val_metric", stats.val_metric}});
            }
        }
        stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.history.push_back(stats);
        if (options.on_epoch) options.on_epoch(stats);
    }
    if (best) nn::import_state(model, "", *best);
    model.eval();
    return res;
}

} // namespace stgl::sgm
