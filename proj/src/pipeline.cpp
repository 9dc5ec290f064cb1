#include "stgl/pipeline.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include "stgl/dataset_io.hpp"
#include "stgl/error.hpp"
#include "stgl/nn/checkpoint.hpp"
#include "stgl/retrieval.hpp"
#include "stgl/sgm_train.hpp"

namespace stgl::pipeline {

using nlohmann::json;

namespace {

// Unpaired satellite tiles get ids far above any paired tile.
constexpr std::int64_t kUnpairedFirstId = std::int64_t{1} << 40;

template <class T>
void get_opt(const json& j, const char* key, T& field) {
    if (j.contains(key)) j.at(key).get_to(field);
}

void reject_unknown(const json& j, const json& reference, const std::string& where) {
    if (!j.is_object()) throw InputError(where + ": expected a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (!reference.contains(k)) throw InputError("unknown config key '" + where + (where.empty() ? "" : ".") + k + "'");
    }
}

json world_json(const WorldSpec& w) {
    return {{"seed", w.seed},
            {"height", w.height},
            {"width", w.width},
            {"meters_per_pixel", w.meters_per_pixel},
            {"origin", {w.origin.x, w.origin.y}},
            {"terrain_mix", w.terrain_mix},
            {"thermal_noise_std", w.thermal_noise_std},
            {"thermal_contrast", w.thermal_contrast},
            {"feature_scale_px", w.feature_scale_px}};
}

WorldSpec world_from(const json& j, WorldSpec w, const std::string& where) {
    reject_unknown(j, world_json(w), where);
    get_opt(j, "seed", w.seed);
    get_opt(j, "height", w.height);
    get_opt(j, "width", w.width);
    get_opt(j, "meters_per_pixel", w.meters_per_pixel);
    if (j.contains("origin")) w.origin = {j.at("origin").at(0).get<double>(), j.at("origin").at(1).get<double>()};
    get_opt(j, "terrain_mix", w.terrain_mix);
    get_opt(j, "thermal_noise_std", w.thermal_noise_std);
    get_opt(j, "thermal_contrast", w.thermal_contrast);
    get_opt(j, "feature_scale_px", w.feature_scale_px);
    return w;
}

json ablation_json(const Ablation& a) {
    return {{"ce", a.ce}, {"dann_mode", sgm::to_string(a.dann_mode)}, {"use_generated", a.use_generated},
            {"lambda1", a.lambda1}};
}

Ablation ablation_from(const json& j, Ablation a) {
    get_opt(j, "ce", a.ce);
    if (j.contains("dann_mode")) a.dann_mode = sgm::parse_dann_mode(j.at("dann_mode").get<std::string>());
    get_opt(j, "use_generated", a.use_generated);
    get_opt(j, "lambda1", a.lambda1);
    return a;
}

// Fields owned by the ablation block, the ce block or the experiment seed.
const std::vector<std::string> kTgmOwned{"lambda1", "use_ce_inputs", "ce_factor", "seed"};
const std::vector<std::string> kSgmOwned{"dann_mode", "use_ce", "use_generated", "ce_factor", "seed"};

void reject_owned(const json& j, const std::vector<std::string>& owned, const std::string& where) {
    for (const auto& k : owned) {
        if (j.contains(k)) {
            throw InputError("config key '" + where + "." + k + "' is set through the ablation, ce or seed fields");
        }
    }
}

json without(json j, const std::vector<std::string>& keys) {
    for (const auto& k : keys) j.erase(k);
    return j;
}

std::string file_digest(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw InputError("cannot read " + p.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return sha256_hex(bytes);
}

// Raster bytes plus its sidecar (and mask, when named there).
std::string raster_digest(const fs::path& image) {
    json j = {file_digest(image)};
    const auto meta = manifest_path(image);
    if (fs::exists(meta)) j.push_back(file_digest(meta));
    const auto map = load_raster(image);
    if (map.has_mask()) {
        std::vector<unsigned char> m(map.validity_mask.begin(), map.validity_mask.end());
        j.push_back(sha256_hex(m));
    }
    return json_fingerprint(j);
}

const std::vector<PairedCrop>& split_of(const DatasetSplit& ds, const std::string& split) {
    if (split == "train") return ds.train;
    if (split == "val") return ds.val;
    if (split == "test") return ds.test;
    throw InputError("unknown split '" + split + "' (train, val, test)");
}

SplitSpec default_split(const RasterMap& map) {
    const double x0 = map.origin.x, y0 = map.origin.y;
    const double w = map.width() * map.meters_per_pixel, h = map.height() * map.meters_per_pixel;
    return SplitSpec{{{"train", x0, y0, x0 + 0.55 * w, y0 + h},
                      {"val", x0 + 0.55 * w, y0, x0 + 0.70 * w, y0 + h},
                      {"test", x0 + 0.70 * w, y0, x0 + w, y0 + h}}};
}

fs::path marker_path(const fs::path& artifact) { return fs::path(artifact.string() + ".stage.json"); }

bool up_to_date(const fs::path& artifact, const std::string& key) {
    if (!fs::exists(artifact) || !fs::exists(marker_path(artifact))) return false;
    try {
        std::ifstream in(marker_path(artifact));
        return json::parse(in).value("key", "") == key;
    } catch (const json::exception&) {
        return false;
    }
}

std::string artifact_state(const std::vector<fs::path>& artifacts) {
    std::ostringstream out;
    for (std::size_t i = 0; i < artifacts.size(); ++i) {
        const auto& a = artifacts[i];
        out << (i ? "; " : "") << a.string() << ": ";
        if (!fs::exists(a)) {
            out << "absent";
        } else {
            out << "present, not marked complete";
        }
        const fs::path partial(a.string() + ".partial");
        if (fs::exists(partial)) out << " (in-progress checkpoint " << partial.string() << ")";
    }
    return out.str();
}

class Runner {
public:
    explicit Runner(bool force) : force_(force) {}

    // Runs `fn` unless every artifact already carries `key`; returns `key`
    // so callers can chain it into downstream keys.
    template <class F>
    std::string stage(Stage s, const std::vector<fs::path>& artifacts, const std::string& key, F&& fn) {
        const bool fresh = std::all_of(artifacts.begin(), artifacts.end(), [&](const fs::path& a) { return up_to_date(a, key); });
        if (fresh && !force_) {
            spdlog::info("[{}] up to date: {}", to_string(s), artifacts.front().string());
            timings_[to_string(s)] += 0.0;
            return key;
        }
        for (const auto& a : artifacts) {
            fs::remove(marker_path(a));
            if (a.has_parent_path()) fs::create_directories(a.parent_path());
        }
        spdlog::info("[{}] running -> {}", to_string(s), artifacts.front().string());
        const auto t0 = std::chrono::steady_clock::now();
        try {
            fn();
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(s, std::string(e.what()) + " | artifact state: " + artifact_state(artifacts));
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        timings_[to_string(s)] += secs;
        for (const auto& a : artifacts) {
            std::ofstream out(marker_path(a));
            out << json{{"stage", to_string(s)}, {"key", key}}.dump() << '\n';
        }
        spdlog::info("[{}] done in {:.2f} s", to_string(s), secs);
        return key;
    }

    const std::map<std::string, double>& timings() const { return timings_; }

private:
    bool force_;
    std::map<std::string, double> timings_;
};

// Loads a paired dataset whose thermal side must match a model's CE setting;
// raw data is enhanced on the fly, enhanced data for a non-CE model is an error.
DatasetSplit load_for_model(const fs::path& path, bool use_ce, double factor) {
    json meta;
    auto ds = load_dataset(path, &meta);
    const bool enhanced = meta.contains("ce") && meta["ce"].value("enabled", false);
    if (enhanced && !use_ce) throw InputError(path.string() + " is contrast-enhanced but the model does not use CE");
    if (enhanced && meta["ce"].value("factor", 0.0) != factor) {
        throw InputError(path.string() + " was enhanced with a different CE factor");
    }
    if (use_ce && !enhanced) {
        spdlog::info("applying CE (factor {}) to {}", factor, path.string());
        const CEConfig ce{true, factor};
        enhance_thermal(ds.train, ce);
        enhance_thermal(ds.val, ce);
        enhance_thermal(ds.test, ce);
    }
    return ds;
}

std::string key_of(const char* stage, const json& inputs) { return json_fingerprint({{"stage", stage}, {"inputs", inputs}}); }

} // namespace

std::string to_string(Stage s) {
    switch (s) {
    case Stage::config: return "config";
    case Stage::synthmap: return "synthmap";
    case Stage::tile: return "tile";
    case Stage::enhance: return "enhance";
    case Stage::train_tgm: return "train-tgm";
    case Stage::generate: return "generate";
    case Stage::train_sgm: return "train-sgm";
    case Stage::build_index: return "build-index";
    case Stage::query: return "query";
    case Stage::evaluate: return "evaluate";
    case Stage::histogram: return "histogram";
    }
    return "unknown";
}

int exit_code(Stage s) {
    switch (s) {
    case Stage::config: return 2;
    case Stage::synthmap: return 10;
    case Stage::tile: return 11;
    case Stage::enhance: return 12;
    case Stage::train_tgm: return 13;
    case Stage::generate: return 14;
    case Stage::train_sgm: return 15;
    case Stage::build_index: return 16;
    case Stage::query: return 17;
    case Stage::evaluate: return 18;
    case Stage::histogram: return 19;
    }
    return 1;
}

StageError::StageError(Stage stage, const std::string& what)
    : std::runtime_error("stage " + to_string(stage) + " failed: " + what), stage_(stage) {}

std::string Ablation::label() const {
    std::ostringstream out;
    out << "ce=" << (ce ? "on" : "off") << " dann=" << sgm::to_string(dann_mode) << " gen=" << (use_generated ? "on" : "off")
        << " lambda1=" << lambda1;
    return out.str();
}

ExperimentConfig ExperimentConfig::desk() {
    ExperimentConfig c;
    c.world.seed = 1;
    c.world.height = c.world.width = 256;
    c.world.meters_per_pixel = 2.0;
    c.unpaired_world = c.world;
    c.unpaired_world.seed = 2;
    c.unpaired_world.origin = {0.0, -1024.0};
    c.tgm = tgm::TgmConfig::desk();
    c.sgm = sgm::SgmConfig::desk();
    return c;
}

ExperimentConfig ExperimentConfig::full() {
    ExperimentConfig c;
    c.name = "full-scale";
    c.tiling = {512, 35, 0.1};
    c.tgm = tgm::TgmConfig::full();
    c.sgm = sgm::SgmConfig::full();
    return c;
}

std::vector<Cell> ExperimentConfig::effective_cells() const {
    if (!cells.empty()) return cells;
    return {{name, ablation}};
}

ExperimentConfig ExperimentConfig::resolved(const Ablation& a) const {
    ExperimentConfig r = *this;
    r.ablation = a;
    r.ce.enabled = a.ce;
    r.tgm.lambda1 = a.lambda1;
    r.tgm.use_ce_inputs = a.ce;
    r.tgm.ce_factor = ce.factor;
    r.tgm.seed = seed;
    r.sgm.dann_mode = a.dann_mode;
    r.sgm.use_ce = a.ce;
    r.sgm.ce_factor = ce.factor;
    r.sgm.use_generated = a.use_generated;
    r.sgm.seed = seed;
    return r;
}

void ExperimentConfig::validate() const {
    if (satellite.empty()) {
        if (!thermal.empty()) throw InputError("thermal given without satellite");
        world.validate();
    } else if (thermal.empty()) {
        throw InputError("satellite given without thermal");
    }
    if (tiling.crop_size < 1 || tiling.stride < 1) throw InputError("tiling crop_size and stride must be >= 1");
    if (tiling.crop_size % 16 != 0) throw InputError("tiling crop_size must be a multiple of 16 for the SGM backbone");
    if (!(tiling.max_invalid_fraction >= 0.0 && tiling.max_invalid_fraction <= 1.0)) {
        throw InputError("max_invalid_fraction must lie in [0, 1]");
    }
    if (!(ce.factor > 0.0)) throw InputError("ce factor must be positive");
    static const std::regex safe("[A-Za-z0-9_.-]+");
    std::set<std::string> names;
    bool any_generated = false;
    for (const auto& c : effective_cells()) {
        if (!std::regex_match(c.name, safe) || c.name == "." || c.name == "..") {
            throw InputError("cell name '" + c.name + "' must be a plain file name ([A-Za-z0-9_.-])");
        }
        if (!names.insert(c.name).second) throw InputError("duplicate cell name '" + c.name + "'");
        const auto r = resolved(c.ablation);
        r.tgm.validate();
        r.sgm.validate();
        any_generated = any_generated || c.ablation.use_generated;
    }
    if (any_generated) {
        if (satellite.empty()) unpaired_world.validate();
        else if (unpaired_satellite.empty()) throw InputError("use_generated needs unpaired_satellite with external rasters");
        if (tgm.output_resolution != tiling.crop_size) {
            throw InputError("use_generated needs tgm.output_resolution == tiling.crop_size");
        }
    }
    if (eval.splits.empty()) throw InputError("eval.splits is empty");
    for (const auto& s : eval.splits) {
        if (s != "train" && s != "val" && s != "test") throw InputError("unknown eval split '" + s + "'");
    }
    for (int n : eval.recall_ns)
        if (n < 1) throw InputError("recall N must be >= 1");
    if (eval.prior_radii.empty()) throw InputError("eval.prior_radii is empty");
    for (int d : eval.prior_radii)
        if (d <= 0) throw InputError("prior radii must be positive");
    if (eval.histogram_edges.size() < 2 || !std::is_sorted(eval.histogram_edges.begin(), eval.histogram_edges.end()) ||
        std::adjacent_find(eval.histogram_edges.begin(), eval.histogram_edges.end()) != eval.histogram_edges.end()) {
        throw InputError("histogram_edges must be strictly increasing with at least two entries");
    }
}

void to_json(json& j, const ExperimentConfig& c) {
    json cells = json::array();
    for (const auto& cell : c.cells) {
        json e = ablation_json(cell.ablation);
        e["name"] = cell.name;
        cells.push_back(e);
    }
    j = {{"name", c.name},
         {"seed", c.seed},
         {"work_dir", c.work_dir.string()},
         {"satellite", c.satellite.string()},
         {"thermal", c.thermal.string()},
         {"unpaired_satellite", c.unpaired_satellite.string()},
         {"splits", c.splits.string()},
         {"world", world_json(c.world)},
         {"unpaired_world", world_json(c.unpaired_world)},
         {"split_spec", split_spec_to_json(c.split_spec)},
         {"tiling",
          {{"crop_size", c.tiling.crop_size},
           {"stride", c.tiling.stride},
           {"max_invalid_fraction", c.tiling.max_invalid_fraction}}},
         {"ce", {{"factor", c.ce.factor}}},
         {"tgm", without(json(c.tgm), kTgmOwned)},
         {"sgm", without(json(c.sgm), kSgmOwned)},
         {"ablation", ablation_json(c.ablation)},
         {"cells", cells},
         {"eval",
          {{"splits", c.eval.splits},
           {"recall_ns", c.eval.recall_ns},
           {"prior_radii", c.eval.prior_radii},
           {"histogram_edges", c.eval.histogram_edges}}}};
}

void from_json(const json& j, ExperimentConfig& c) {
    const json ref = c;
    reject_unknown(j, ref, "");
    try {
        get_opt(j, "name", c.name);
        get_opt(j, "seed", c.seed);
        auto path = [&](const char* key, fs::path& p) {
            if (j.contains(key)) p = j.at(key).get<std::string>();
        };
        path("work_dir", c.work_dir);
        path("satellite", c.satellite);
        path("thermal", c.thermal);
        path("unpaired_satellite", c.unpaired_satellite);
        path("splits", c.splits);
        if (j.contains("world")) c.world = world_from(j.at("world"), c.world, "world");
        if (j.contains("unpaired_world")) c.unpaired_world = world_from(j.at("unpaired_world"), c.unpaired_world, "unpaired_world");
        if (j.contains("split_spec")) c.split_spec = split_spec_from_json(j.at("split_spec"));
        if (j.contains("tiling")) {
            const auto& t = j.at("tiling");
            reject_unknown(t, ref.at("tiling"), "tiling");
            get_opt(t, "crop_size", c.tiling.crop_size);
            get_opt(t, "stride", c.tiling.stride);
            get_opt(t, "max_invalid_fraction", c.tiling.max_invalid_fraction);
        }
        if (j.contains("ce")) {
            reject_unknown(j.at("ce"), ref.at("ce"), "ce");
            get_opt(j.at("ce"), "factor", c.ce.factor);
        }
        if (j.contains("tgm")) {
            reject_owned(j.at("tgm"), kTgmOwned, "tgm");
            reject_unknown(j.at("tgm"), ref.at("tgm"), "tgm");
            from_json(j.at("tgm"), c.tgm);
        }
        if (j.contains("sgm")) {
            reject_owned(j.at("sgm"), kSgmOwned, "sgm");
            reject_unknown(j.at("sgm"), ref.at("sgm"), "sgm");
            from_json(j.at("sgm"), c.sgm);
        }
        const json ablation_ref = ablation_json(c.ablation);
        if (j.contains("ablation")) {
            reject_unknown(j.at("ablation"), ablation_ref, "ablation");
            c.ablation = ablation_from(j.at("ablation"), c.ablation);
        }
        if (j.contains("cells")) {
            c.cells.clear();
            json cell_ref = ablation_ref;
            cell_ref["name"] = "";
            for (const auto& e : j.at("cells")) {
                reject_unknown(e, cell_ref, "cells[]");
                if (!e.contains("name")) throw InputError("every cell needs a name");
                // Unspecified switches inherit the top-level ablation block.
                c.cells.push_back({e.at("name").get<std::string>(), ablation_from(e, c.ablation)});
            }
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            reject_unknown(e, ref.at("eval"), "eval");
            get_opt(e, "splits", c.eval.splits);
            get_opt(e, "recall_ns", c.eval.recall_ns);
            get_opt(e, "prior_radii", c.eval.prior_radii);
            get_opt(e, "histogram_edges", c.eval.histogram_edges);
        }
    } catch (const json::exception& e) {
        throw InputError(std::string("experiment config: ") + e.what());
    } catch (const FormatError& e) {
        throw InputError(std::string("experiment config: ") + e.what());
    }
}

ExperimentConfig load_experiment(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw InputError(path.string() + ": " + e.what());
    }
    // "preset" picks the base that the remaining keys override.
    ExperimentConfig c = ExperimentConfig::desk();
    if (j.is_object() && j.contains("preset")) {
        const json preset = j["preset"];
        j.erase("preset");
        if (preset == "full") {
            c = ExperimentConfig::full();
        } else if (preset != "desk") {
            throw InputError("experiment config: unknown preset " + preset.dump() + " (desk, full)");
        }
    }
    from_json(j, c);
    return c;
}

void save_experiment(const fs::path& path, const ExperimentConfig& c) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    const std::string s = json(c).dump(2) + "\n";
    write_file_atomic(path, {reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

std::string json_fingerprint(const json& j) {
    const std::string s = j.dump();
    return sha256_hex({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

// ---- stages ---------------------------------------------------------------

void synthmap_stage(const WorldSpec& world, const fs::path& satellite_out, const fs::path& thermal_out) {
    const auto w = generate_world(world);
    save_raster(satellite_out, w.satellite);
    save_raster(thermal_out, w.thermal);
}

void synthmap_satellite_stage(const WorldSpec& world, const fs::path& satellite_out) {
    save_raster(satellite_out, generate_world(world).satellite);
}

void tile_stage(const fs::path& satellite, const fs::path& thermal, const SplitSpec& splits, const TilingConfig& tiling,
                const fs::path& dataset_out) {
    const auto sat = load_raster(satellite);
    const auto th = load_raster(thermal);
    if (sat.pixels.channels != 3 || th.pixels.channels != 1) {
        throw InputError("tile: expected a 3-channel satellite and a 1-channel thermal raster");
    }
    auto pairs = pair_crops(tile_map(sat, tiling.crop_size, tiling.stride), tile_map(th, tiling.crop_size, tiling.stride));
    const std::size_t before = pairs.size();
    pairs = filter_invalid(pairs, tiling.max_invalid_fraction);
    auto split = split_by_region(std::move(pairs), splits.regions.empty() ? default_split(sat) : splits);
    spdlog::info("tile: {} pairs ({} dropped as invalid): train {}, val {}, test {}", before,
                 before - split.train.size() - split.val.size() - split.test.size(), split.train.size(), split.val.size(),
                 split.test.size());
    save_dataset(dataset_out, split, {{"crop_size", tiling.crop_size}, {"stride", tiling.stride}});
}

void tile_unpaired_stage(const fs::path& satellite, const TilingConfig& tiling, std::int64_t first_id,
                         const fs::path& tiles_out) {
    const auto sat = load_raster(satellite);
    if (sat.pixels.channels != 3) throw InputError("tile: unpaired satellite raster must have 3 channels");
    const auto tiles = tile_map(sat, tiling.crop_size, tiling.stride, first_id);
    spdlog::info("tile: {} unpaired satellite tiles", tiles.size());
    save_tiles(tiles_out, tiles, {{"crop_size", tiling.crop_size}, {"stride", tiling.stride}});
}

void enhance_stage(const fs::path& dataset_in, const CEConfig& ce, const fs::path& dataset_out) {
    json meta;
    auto ds = load_dataset(dataset_in, &meta);
    enhance_thermal(ds.train, ce);
    enhance_thermal(ds.val, ce);
    enhance_thermal(ds.test, ce);
    meta["ce"] = {{"enabled", ce.enabled}, {"factor", ce.factor}};
    save_dataset(dataset_out, ds, meta);
}

void train_tgm_stage(const tgm::TgmConfig& cfg, const fs::path& dataset, const fs::path& ckpt_out) {
    const auto ds = load_dataset(dataset);
    if (ds.train.empty()) throw InputError("train-tgm: the training split is empty");
    tgm::TgmTrainOptions opts;
    const fs::path partial(ckpt_out.string() + ".partial");
    opts.checkpoint_path = partial;
    long last_logged = -1;
    opts.on_step = [&](const tgm::TgmStepStats& s) {
        if (s.epoch != last_logged) {
            last_logged = s.epoch;
            spdlog::info("train-tgm: epoch {} step {} lr {:.2e} D {:.4f} G {:.4f} L1 {:.4f}", s.epoch, s.step, s.lr,
                         s.loss_d, s.loss_g_gan, s.l1);
        }
    };
    auto model = tgm::train_tgm(cfg, ds.train, opts);
    tgm::save_tgm(ckpt_out, model);
    fs::remove(partial);
}

void generate_stage(const fs::path& tgm_ckpt, const fs::path& unpaired_tiles, bool use_ce, const fs::path& dataset_out) {
    auto model = tgm::load_tgm(tgm_ckpt);
    const auto tiles = load_tiles(unpaired_tiles);
    DatasetSplit ds;
    ds.train = tgm::generate_dataset(model, tiles, use_ce);
    save_dataset(dataset_out, ds, {{"tgm_data_fingerprint", model.data_fingerprint}, {"use_ce", use_ce}});
}

void train_sgm_stage(const sgm::SgmConfig& cfg, const fs::path& dataset, const std::optional<fs::path>& generated,
                     const fs::path& ckpt_out) {
    const auto ds = load_for_model(dataset, cfg.use_ce, cfg.ce_factor);
    std::vector<PairedCrop> gen;
    if (cfg.use_generated) {
        if (!generated) throw InputError("train-sgm: use_generated set but no generated dataset given");
        json meta;
        gen = load_dataset(*generated, &meta).train;
        if (meta.value("use_ce", false) != cfg.use_ce) {
            throw InputError("train-sgm: generated dataset CE setting differs from the model's");
        }
    }
    sgm::SgmTrainOptions opts;
    opts.checkpoint_path = ckpt_out;
    opts.on_epoch = [&](const sgm::SgmEpochStats& s) {
        spdlog::info("train-sgm: epoch {} loss {:.4f} (triplet {:.4f}, dann {:.4f}) triplets {} skipped {} val {:.1f} ({:.2f} s)",
                     s.epoch, s.loss, s.triplet, s.dann, s.triplets, s.skipped_queries, s.val_metric, s.seconds);
    };
    auto res = sgm::train_sgm(cfg, ds, gen, opts);
    json history = json::array();
    for (const auto& s : res.history) history.push_back({s.epoch, s.loss, s.triplet, s.dann, s.val_metric});
    sgm::save_sgm(ckpt_out, *res.model,
                  {{"epoch", res.best_epoch},
                   {"val_metric", res.best_val},
                   {"skipped_queries", res.skipped_queries},
                   {"history", history}});
}

void build_index_stage(const fs::path& sgm_ckpt, const fs::path& dataset, const std::string& split,
                       const fs::path& index_out) {
    auto model = sgm::load_sgm(sgm_ckpt);
    const auto ds = load_dataset(dataset);
    const auto& pairs = split_of(ds, split);
    if (pairs.empty()) throw InputError("build-index: split '" + split + "' is empty");
    save_index(build_index(*model, satellite_tiles(pairs)), index_out);
}

EvalReport evaluate_stage(const fs::path& sgm_ckpt, const fs::path& index_path, const fs::path& dataset,
                          const std::string& split, const EvalConfig& eval, const std::string& label) {
    json meta;
    auto model = sgm::load_sgm(sgm_ckpt, &meta);
    const auto index = load_index(index_path);
    const std::string fp = nn::fingerprint(*model);
    if (index.model_fingerprint != fp) {
        throw StageError(Stage::evaluate, "index " + index_path.string() + " was built by model " +
                                              index.model_fingerprint.substr(0, 12) + ", checkpoint " +
                                              sgm_ckpt.string() + " is " + fp.substr(0, 12));
    }
    const auto& mc = model->config();
    const auto ds = load_for_model(dataset, mc.use_ce, mc.ce_factor);
    const auto& pairs = split_of(ds, split);
    if (pairs.empty()) throw InputError("evaluate: split '" + split + "' is empty");
    std::vector<const Image*> images;
    std::vector<Vec2> truths;
    for (const auto& p : pairs) {
        images.push_back(&p.thermal.image);
        truths.push_back(p.position());
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto desc = sgm::embed_all(*model, images);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    auto rep = evaluate(index, desc, truths, eval.recall_ns, eval.prior_radii);
    rep.embed_ms_per_query = ms / static_cast<double>(images.size());
    rep.label = label;
    rep.config = {{"split", split},
                  {"model_fingerprint", fp},
                  {"sgm", meta.value("config", json::object())},
                  {"best_epoch", meta.value("extra", json::object()).value("epoch", -1)}};
    return rep;
}

void histogram_stage(const std::vector<double>& errors, const std::vector<double>& edges, const fs::path& csv_out,
                     const fs::path& ppm_out) {
    const auto h = error_histogram(errors, edges);
    write_histogram_csv(csv_out, h);
    render_histogram_ppm(ppm_out, h);
}

void write_errors_csv(const fs::path& path, const std::vector<double>& errors) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out.precision(17);
    out << "error_m\n";
    for (double e : errors) out << e << '\n';
}

std::vector<double> read_errors_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "error_m") throw FormatError(path.string() + ": expected an 'error_m' header");
    std::vector<double> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(std::stod(line));
        } catch (const std::exception&) {
            throw FormatError(path.string() + ": bad value '" + line + "'");
        }
    }
    return out;
}

RunResult run_pipeline(const ExperimentConfig& config, const RunOptions& options) {
    try {
        config.validate();
    } catch (const std::exception& e) {
        throw StageError(Stage::config, e.what());
    }
    const fs::path work = config.work_dir;
    const fs::path data = work / "data";
    fs::create_directories(data);
    save_experiment(work / "experiment.json", config);
    Runner run(options.force);

    fs::path sat = config.satellite, th = config.thermal;
    std::string world_key;
    if (sat.empty()) {
        sat = data / "satellite.ppm";
        th = data / "thermal.pgm";
        world_key = run.stage(Stage::synthmap, {sat, th}, key_of("synthmap", world_json(config.world)),
                              [&] { synthmap_stage(config.world, sat, th); });
    } else {
        try {
            world_key = key_of("external", {raster_digest(sat), raster_digest(th)});
        } catch (const std::exception& e) {
            throw StageError(Stage::tile, e.what());
        }
    }

    SplitSpec spec = config.split_spec;
    if (!config.splits.empty()) {
        try {
            spec = load_split_spec(config.splits);
        } catch (const std::exception& e) {
            throw StageError(Stage::config, e.what());
        }
    }
    const json tiling = json(config)["tiling"];
    const fs::path pairs_path = data / "pairs.ds";
    const std::string tile_key =
        run.stage(Stage::tile, {pairs_path}, key_of("tile", {world_key, tiling, split_spec_to_json(spec)}),
                  [&] { tile_stage(sat, th, spec, config.tiling, pairs_path); });

    // Lazily built shared inputs of the generator.
    std::optional<std::string> unpaired_key;
    const fs::path unpaired_path = data / "unpaired.tiles";
    auto unpaired = [&]() -> std::string {
        if (unpaired_key) return *unpaired_key;
        fs::path usat = config.unpaired_satellite;
        std::string source_key;
        if (usat.empty()) {
            usat = data / "unpaired_satellite.ppm";
            source_key = run.stage(Stage::synthmap, {usat}, key_of("synthmap-unpaired", world_json(config.unpaired_world)),
                                   [&] { synthmap_satellite_stage(config.unpaired_world, usat); });
        } else {
            source_key = key_of("external", {raster_digest(usat)});
        }
        unpaired_key = run.stage(Stage::tile, {unpaired_path}, key_of("tile-unpaired", {source_key, tiling}),
                                 [&] { tile_unpaired_stage(usat, config.tiling, kUnpairedFirstId, unpaired_path); });
        return *unpaired_key;
    };

    RunResult result;
    json summary = json::array();
    for (const auto& cell : config.effective_cells()) {
        const auto cfg = config.resolved(cell.ablation);
        const fs::path dir = work / "cells" / cell.name;
        fs::create_directories(dir);
        save_experiment(dir / "experiment.json", cfg);
        const std::string label = cell.name + " [" + cell.ablation.label() + "]";
        spdlog::info("cell {}", label);

        fs::path dataset = pairs_path;
        std::string dataset_key = tile_key;
        if (cfg.ce.enabled) {
            dataset = data / fmt::format("pairs-ce{}.ds", cfg.ce.factor);
            dataset_key = run.stage(Stage::enhance, {dataset}, key_of("enhance", {tile_key, cfg.ce.factor}),
                                    [&] { enhance_stage(pairs_path, cfg.ce, dataset); });
        }

        std::optional<fs::path> generated;
        json generated_key = nullptr;
        if (cfg.sgm.use_generated) {
            const std::string ukey = unpaired();
            const fs::path tgm_path = dir / "tgm.ckpt";
            // The generator applies CE to its own targets, so it reads the raw pairs.
            const std::string tgm_key = run.stage(Stage::train_tgm, {tgm_path}, key_of("train-tgm", {tile_key, json(cfg.tgm)}),
                                                  [&] { train_tgm_stage(cfg.tgm, pairs_path, tgm_path); });
            generated = dir / "generated.ds";
            generated_key = run.stage(Stage::generate, {*generated}, key_of("generate", {tgm_key, ukey, cfg.ce.enabled}),
                                      [&] { generate_stage(tgm_path, unpaired_path, cfg.ce.enabled, *generated); });
        }

        const fs::path sgm_path = dir / "sgm.ckpt";
        const std::string sgm_key =
            run.stage(Stage::train_sgm, {sgm_path}, key_of("train-sgm", {dataset_key, generated_key, json(cfg.sgm)}),
                      [&] { train_sgm_stage(cfg.sgm, dataset, generated, sgm_path); });

        for (const auto& split : cfg.eval.splits) {
            const fs::path index_path = dir / ("index-" + split + ".stgl");
            run.stage(Stage::build_index, {index_path}, key_of("build-index", {sgm_key, dataset_key, split}),
                      [&] { build_index_stage(sgm_path, dataset, split, index_path); });

            EvalReport rep;
            try {
                rep = evaluate_stage(sgm_path, index_path, dataset, split, cfg.eval, label + " " + split);
                rep.config["experiment_fingerprint"] = json_fingerprint(json(cfg));
                write_report_kv(dir / ("report-" + split + ".txt"), rep);
                write_errors_csv(dir / ("errors-" + split + ".csv"), rep.per_query_errors);
            } catch (const StageError&) {
                throw;
            } catch (const std::exception& e) {
                throw StageError(Stage::evaluate, e.what());
            }
            try {
                histogram_stage(rep.per_query_errors, cfg.eval.histogram_edges, dir / ("histogram-" + split + ".csv"),
                                dir / ("histogram-" + split + ".ppm"));
            } catch (const std::exception& e) {
                throw StageError(Stage::histogram, e.what());
            }
            json row = {{"cell", cell.name}, {"split", split}, {"ablation", ablation_json(cell.ablation)},
                        {"queries", rep.queries}, {"skipped", rep.skipped}};
            for (const auto& [n, v] : rep.r_at) row["R@" + std::to_string(n)] = v;
            for (const auto& [k, v] : rep.r_prior_at) row[fmt::format("R_{}@{}", k.first, k.second)] = v;
            for (const auto& [d, v] : rep.l2_prior) row[fmt::format("L2^{}", d)] = v;
            summary.push_back(row);
            result.reports.push_back(std::move(rep));
        }
    }

    result.summary = work / "summary.md";
    std::ofstream md(result.summary);
    md << "# " << config.name << "\n\n```\n" << format_table(result.reports) << "```\n\nstage seconds:";
    for (const auto& [stage, secs] : run.timings()) md << fmt::format(" {}={:.1f}", stage, secs);
    md << '\n';
    std::ofstream js(work / "summary.json");
    js << json{{"name", config.name}, {"rows", summary}, {"stage_seconds", run.timings()}}.dump(2) << '\n';
    return result;
}

} // namespace stgl::pipeline
