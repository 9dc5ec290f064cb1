// stgl: command-line front end. Every subcommand starts from the desk
// experiment config (or --config FILE), applies --set KEY=VALUE overrides and
// then the dedicated flags, in that order.

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>

#include "stgl/dataset_io.hpp"
#include "stgl/enhance.hpp"
#include "stgl/error.hpp"
#include "stgl/nn/checkpoint.hpp"
#include "stgl/pipeline.hpp"
#include "stgl/retrieval.hpp"

using namespace stgl;
using namespace stgl::pipeline;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
    std::optional<bool> ce;
    std::optional<double> ce_factor;
    std::optional<std::string> dann;
    std::optional<bool> generated;
    std::optional<double> lambda1;
    std::string log_level = "info";
};

void add_common(CLI::App* app, Common& c, bool ablation_flags) {
    app->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--set", c.sets, "override a config field, e.g. --set sgm.epochs=50")->allow_extra_args(false);
    app->add_option("--seed", c.seed, "experiment seed");
    app->add_option("--log-level", c.log_level, "trace, debug, info, warn, error")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error"}));
    if (!ablation_flags) return;
    app->add_flag("--ce,!--no-ce", c.ce, "contrast-enhance thermal images");
    app->add_option("--ce-factor", c.ce_factor, "CE factor (default 3)")->check(CLI::PositiveNumber);
    app->add_option("--dann", c.dann, "off, full or only-positive")
        ->check(CLI::IsMember({"off", "full", "only-positive", "only_positive"}));
    app->add_flag("--generated,!--no-generated", c.generated, "add TGM-generated pairs to SGM training");
    app->add_option("--lambda1", c.lambda1, "TGM L1 weight")->check(CLI::NonNegativeNumber);
}

void set_path(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw InputError("--set expects KEY=VALUE, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw; // bare strings need no quotes
    }
    json* node = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!node->is_object() || !node->contains(parts[i])) throw InputError("--set: unknown config key '" + key + "'");
        node = &(*node)[parts[i]];
    }
    if (!node->is_object()) throw InputError("--set: unknown config key '" + key + "'");
    (*node)[parts.back()] = value;
}

ExperimentConfig load_config(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig::desk() : load_experiment(c.config);
    if (!c.sets.empty()) {
        json j = cfg;
        for (const auto& s : c.sets) set_path(j, s);
        ExperimentConfig out = ExperimentConfig::desk();
        from_json(j, out);
        cfg = out;
    }
    if (c.seed) cfg.seed = *c.seed;
    if (c.ce) cfg.ablation.ce = *c.ce;
    if (c.ce_factor) cfg.ce.factor = *c.ce_factor;
    if (c.dann) cfg.ablation.dann_mode = sgm::parse_dann_mode(*c.dann);
    if (c.generated) cfg.ablation.use_generated = *c.generated;
    if (c.lambda1) cfg.ablation.lambda1 = *c.lambda1;
    // Dedicated flags apply to every cell of a multi-cell config.
    for (auto& cell : cfg.cells) {
        if (c.ce) cell.ablation.ce = *c.ce;
        if (c.dann) cell.ablation.dann_mode = sgm::parse_dann_mode(*c.dann);
        if (c.generated) cell.ablation.use_generated = *c.generated;
        if (c.lambda1) cell.ablation.lambda1 = *c.lambda1;
    }
    return cfg;
}

ExperimentConfig resolved_config(const Common& c) {
    const auto cfg = load_config(c);
    cfg.validate();
    return cfg.resolved(cfg.ablation);
}

std::vector<double> parse_edges(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(std::stod(part));
    return out;
}

void print_neighbors(const RetrievalResult& r) {
    if (r.empty_prior) {
        std::cout << "no database tile inside the prior region (localization failure)\n";
        return;
    }
    std::cout << "rank,tile_id,x,y,distance\n";
    for (std::size_t i = 0; i < r.neighbors.size(); ++i) {
        const auto& n = r.neighbors[i];
        std::cout << i + 1 << ',' << n.tile_id << ',' << n.position.x << ',' << n.position.y << ',' << n.distance << '\n';
    }
}

} // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("stgl"));
    CLI::App app{"Satellite-thermal geo-localization: data synthesis, training, indexing and evaluation"};
    app.require_subcommand(1);

    Common common;
    Stage stage = Stage::config;
    std::function<void()> action;

    // synthmap
    auto* synth = app.add_subcommand("synthmap", "write a synthetic co-registered satellite/thermal raster pair");
    add_common(synth, common, false);
    std::string synth_dir = "data";
    bool synth_unpaired = false;
    synth->add_option("--out-dir", synth_dir, "output directory");
    synth->add_flag("--unpaired", synth_unpaired, "also write the satellite-only unpaired world");
    synth->callback([&] {
        stage = Stage::synthmap;
        action = [&] {
            const auto cfg = resolved_config(common);
            std::filesystem::create_directories(synth_dir);
            const std::filesystem::path dir(synth_dir);
            synthmap_stage(cfg.world, dir / "satellite.ppm", dir / "thermal.pgm");
            if (synth_unpaired) synthmap_satellite_stage(cfg.unpaired_world, dir / "unpaired_satellite.ppm");
            spdlog::info("wrote rasters to {}", dir.string());
        };
    });

    // tile
    auto* tile = app.add_subcommand("tile", "tile, pair, filter and split rasters into a dataset file");
    add_common(tile, common, false);
    std::string tile_sat, tile_th, tile_splits, tile_out = "pairs.ds", tile_unpaired, tile_unpaired_out = "unpaired.tiles";
    std::optional<int> crop, stride;
    std::optional<double> max_invalid;
    tile->add_option("--satellite", tile_sat, "satellite raster (PPM + .meta)")->required()->check(CLI::ExistingFile);
    tile->add_option("--thermal", tile_th, "thermal raster (PGM + .meta)")->required()->check(CLI::ExistingFile);
    tile->add_option("--splits", tile_splits, "split regions (JSON)")->check(CLI::ExistingFile);
    tile->add_option("--out", tile_out, "dataset file");
    tile->add_option("--crop", crop, "crop size in pixels")->check(CLI::PositiveNumber);
    tile->add_option("--stride", stride, "stride in pixels")->check(CLI::PositiveNumber);
    tile->add_option("--max-invalid", max_invalid, "drop pairs with a larger invalid fraction")->check(CLI::Range(0.0, 1.0));
    tile->add_option("--unpaired-satellite", tile_unpaired, "satellite-only raster for the generator")
        ->check(CLI::ExistingFile);
    tile->add_option("--unpaired-out", tile_unpaired_out, "tile file for --unpaired-satellite");
    tile->callback([&] {
        stage = Stage::tile;
        action = [&] {
            auto cfg = resolved_config(common);
            if (crop) cfg.tiling.crop_size = *crop;
            if (stride) cfg.tiling.stride = *stride;
            if (max_invalid) cfg.tiling.max_invalid_fraction = *max_invalid;
            const SplitSpec spec = tile_splits.empty() ? cfg.split_spec : load_split_spec(tile_splits);
            tile_stage(tile_sat, tile_th, spec, cfg.tiling, tile_out);
            if (!tile_unpaired.empty()) tile_unpaired_stage(tile_unpaired, cfg.tiling, std::int64_t{1} << 40, tile_unpaired_out);
        };
    });

    // enhance
    auto* enh = app.add_subcommand("enhance", "contrast-enhance the thermal side of a dataset");
    add_common(enh, common, true);
    std::string enh_in, enh_out;
    enh->add_option("--data", enh_in, "input dataset")->required()->check(CLI::ExistingFile);
    enh->add_option("--out", enh_out, "output dataset")->required();
    enh->callback([&] {
        stage = Stage::enhance;
        action = [&] {
            auto cfg = resolved_config(common);
            enhance_stage(enh_in, {true, cfg.ce.factor}, enh_out);
        };
    });

    // train-tgm
    auto* ttgm = app.add_subcommand("train-tgm", "train the thermal generator on the train split");
    add_common(ttgm, common, true);
    std::string ttgm_data, ttgm_out = "tgm.ckpt";
    std::optional<int> tgm_epochs;
    std::optional<long> tgm_steps;
    ttgm->add_option("--data", ttgm_data, "paired dataset (not contrast-enhanced)")->required()->check(CLI::ExistingFile);
    ttgm->add_option("--out", ttgm_out, "checkpoint");
    ttgm->add_option("--epochs", tgm_epochs)->check(CLI::PositiveNumber);
    ttgm->add_option("--max-steps", tgm_steps, "stop after this many generator updates")->check(CLI::PositiveNumber);
    ttgm->callback([&] {
        stage = Stage::train_tgm;
        action = [&] {
            auto cfg = resolved_config(common);
            if (tgm_epochs) {
                cfg.tgm.epochs = *tgm_epochs;
                cfg.tgm.decay_start_epoch = std::min(cfg.tgm.decay_start_epoch, *tgm_epochs);
            }
            if (tgm_steps) cfg.tgm.max_steps = *tgm_steps;
            train_tgm_stage(cfg.tgm, ttgm_data, ttgm_out);
        };
    });

    // generate
    auto* gen = app.add_subcommand("generate", "translate unpaired satellite tiles into a generated dataset");
    add_common(gen, common, true);
    std::string gen_model, gen_tiles, gen_out = "generated.ds";
    gen->add_option("--tgm", gen_model, "generator checkpoint")->required()->check(CLI::ExistingFile);
    gen->add_option("--tiles", gen_tiles, "unpaired satellite tiles")->required()->check(CLI::ExistingFile);
    gen->add_option("--out", gen_out, "generated dataset");
    gen->callback([&] {
        stage = Stage::generate;
        action = [&] { generate_stage(gen_model, gen_tiles, resolved_config(common).ablation.ce, gen_out); };
    });

    // train-sgm
    auto* tsgm = app.add_subcommand("train-sgm", "train the retrieval network");
    add_common(tsgm, common, true);
    std::string tsgm_data, tsgm_gen, tsgm_out = "sgm.ckpt";
    std::optional<int> sgm_epochs;
    tsgm->add_option("--data", tsgm_data, "paired dataset")->required()->check(CLI::ExistingFile);
    tsgm->add_option("--generated-data", tsgm_gen, "generated dataset (used with --generated)")->check(CLI::ExistingFile);
    tsgm->add_option("--out", tsgm_out, "checkpoint");
    tsgm->add_option("--epochs", sgm_epochs)->check(CLI::PositiveNumber);
    tsgm->callback([&] {
        stage = Stage::train_sgm;
        action = [&] {
            auto cfg = resolved_config(common);
            if (sgm_epochs) cfg.sgm.epochs = *sgm_epochs;
            std::optional<std::filesystem::path> g;
            if (!tsgm_gen.empty()) g = tsgm_gen;
            train_sgm_stage(cfg.sgm, tsgm_data, g, tsgm_out);
        };
    });

    // build-index
    auto* bidx = app.add_subcommand("build-index", "embed the satellite tiles of one split into an index file");
    add_common(bidx, common, false);
    std::string bidx_model, bidx_data, bidx_split = "test", bidx_out = "index.stgl";
    bidx->add_option("--model", bidx_model, "SGM checkpoint")->required()->check(CLI::ExistingFile);
    bidx->add_option("--data", bidx_data, "paired dataset")->required()->check(CLI::ExistingFile);
    bidx->add_option("--split", bidx_split)->check(CLI::IsMember({"train", "val", "test"}));
    bidx->add_option("--out", bidx_out, "index file");
    bidx->callback([&] {
        stage = Stage::build_index;
        action = [&] { build_index_stage(bidx_model, bidx_data, bidx_split, bidx_out); };
    });

    // query
    auto* qry = app.add_subcommand("query", "retrieve the nearest database tiles for one thermal image");
    add_common(qry, common, false);
    std::string q_model, q_index, q_image;
    int q_k = 5;
    std::vector<double> q_center;
    std::optional<double> q_radius;
    qry->add_option("--model", q_model, "SGM checkpoint")->required()->check(CLI::ExistingFile);
    qry->add_option("--index", q_index, "index file")->required()->check(CLI::ExistingFile);
    qry->add_option("--image", q_image, "thermal PGM")->required()->check(CLI::ExistingFile);
    qry->add_option("-k,--k", q_k, "neighbors to return")->check(CLI::PositiveNumber);
    qry->add_option("--center", q_center, "prior center X Y in meters")->expected(2);
    qry->add_option("--radius", q_radius, "prior radius in meters")->check(CLI::PositiveNumber);
    qry->callback([&] {
        stage = Stage::query;
        action = [&] {
            auto model = sgm::load_sgm(q_model);
            const auto index = load_index(q_index);
            if (index.model_fingerprint != nn::fingerprint(*model)) {
                throw StageError(Stage::query, "index " + q_index + " was built by a different model");
            }
            Image img = read_pnm(q_image);
            if (model->config().use_ce) img = contrast_enhance(img, model->config().ce_factor);
            const auto d = sgm::embed(*model, img);
            if (d.degenerate) spdlog::warn("query descriptor is degenerate (zero)");
            const auto t0 = std::chrono::steady_clock::now();
            RetrievalResult r;
            if (!q_center.empty() || q_radius) {
                if (q_center.size() != 2) throw InputError("--center needs X and Y");
                r = knn_within(index, d.values, q_k, {q_center[0], q_center[1]}, q_radius.value_or(kPriorRadiusM));
            } else {
                r = knn(index, d.values, q_k);
            }
            spdlog::info("matching took {:.3f} ms",
                         std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
            print_neighbors(r);
        };
    });

    // evaluate
    auto* evl = app.add_subcommand("evaluate", "recall and localization error of one split against an index");
    add_common(evl, common, false);
    std::string e_model, e_index, e_data, e_split = "test", e_out = ".", e_label;
    evl->add_option("--model", e_model, "SGM checkpoint")->required()->check(CLI::ExistingFile);
    evl->add_option("--index", e_index, "index file")->required()->check(CLI::ExistingFile);
    evl->add_option("--data", e_data, "paired dataset")->required()->check(CLI::ExistingFile);
    evl->add_option("--split", e_split)->check(CLI::IsMember({"train", "val", "test"}));
    evl->add_option("--out-dir", e_out, "directory for report, errors and histogram");
    evl->add_option("--label", e_label, "row label");
    evl->callback([&] {
        stage = Stage::evaluate;
        action = [&] {
            const auto cfg = resolved_config(common);
            const std::filesystem::path dir(e_out);
            std::filesystem::create_directories(dir);
            auto rep = evaluate_stage(e_model, e_index, e_data, e_split, cfg.eval, e_label.empty() ? e_split : e_label);
            write_report_kv(dir / ("report-" + e_split + ".txt"), rep);
            write_errors_csv(dir / ("errors-" + e_split + ".csv"), rep.per_query_errors);
            stage = Stage::histogram;
            histogram_stage(rep.per_query_errors, cfg.eval.histogram_edges, dir / ("histogram-" + e_split + ".csv"),
                            dir / ("histogram-" + e_split + ".ppm"));
            std::cout << format_table({rep});
            std::cout << "embed " << rep.embed_ms_per_query << " ms/query, match " << rep.match_ms_per_query << " ms/query\n";
        };
    });

    // histogram
    auto* hist = app.add_subcommand("histogram", "bin per-query localization errors");
    add_common(hist, common, false);
    std::string h_errors, h_out = "histogram", h_edges;
    hist->add_option("--errors", h_errors, "errors CSV written by evaluate")->required()->check(CLI::ExistingFile);
    hist->add_option("--out", h_out, "output prefix (.csv and .ppm are appended)");
    hist->add_option("--edges", h_edges, "comma-separated bin edges in meters");
    hist->callback([&] {
        stage = Stage::histogram;
        action = [&] {
            const auto cfg = resolved_config(common);
            const auto edges = h_edges.empty() ? cfg.eval.histogram_edges : parse_edges(h_edges);
            histogram_stage(read_errors_csv(h_errors), edges, h_out + ".csv", h_out + ".ppm");
        };
    });

    // config
    auto* show = app.add_subcommand("config", "validate the experiment config and print it with defaults filled in");
    add_common(show, common, true);
    std::string show_cell;
    show->add_option("--cell", show_cell, "print the resolved config of this cell instead");
    show->callback([&] {
        stage = Stage::config;
        action = [&] {
            const auto cfg = load_config(common);
            cfg.validate();
            if (show_cell.empty()) {
                std::cout << nlohmann::json(cfg).dump(2) << '\n';
                return;
            }
            for (const auto& cell : cfg.effective_cells()) {
                if (cell.name != show_cell) continue;
                std::cout << nlohmann::json(cfg.resolved(cell.ablation)).dump(2) << '\n';
                return;
            }
            throw InputError("experiment config: no cell named '" + show_cell + "'");
        };
    });

    // run
    auto* run =app.add_subcommand("run", "full pipeline for every cell of the experiment");
    add_common(run, common, true);
    std::string run_dir;
    bool force = false;
    run->add_option("--work-dir", run_dir, "artifact directory (overrides work_dir)");
    run->add_flag("--force", force, "rerun stages even when their artifacts are up to date");
    run->callback([&] {
        stage = Stage::config;
        action = [&] {
            auto cfg = load_config(common);
            if (!run_dir.empty()) cfg.work_dir = run_dir;
            const auto res = run_pipeline(cfg, {force});
            std::cout << format_table(res.reports);
            std::cout << "summary: " << res.summary.string() << '\n';
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        // --help prints and succeeds; every other parse error is a config error.
        return app.exit(e) == 0 ? 0 : exit_code(Stage::config);
    }
    spdlog::set_level(spdlog::level::from_str(common.log_level));

    try {
        action();
    } catch (const StageError& e) {
        spdlog::error("{}", e.what());
        return exit_code(e.stage());
    } catch (const InputError& e) {
        // Config problems surface before any stage work starts.
        const Stage s = std::string(e.what()).rfind("experiment config", 0) == 0 ? Stage::config : stage;
        spdlog::error("{}: {}", to_string(s), e.what());
        return exit_code(s);
    } catch (const std::exception& e) {
        spdlog::error("{}: {}", to_string(stage), e.what());
        return exit_code(stage);
    }
    return 0;
}
