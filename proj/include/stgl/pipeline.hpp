#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "stgl/enhance.hpp"
#include "stgl/evalkit.hpp"
#include "stgl/geodata.hpp"
#include "stgl/sgm.hpp"
#include "stgl/synthmap.hpp"
#include "stgl/tgm.hpp"

namespace stgl::pipeline {

namespace fs = std::filesystem;

enum class Stage { config, synthmap, tile, enhance, train_tgm, generate, train_sgm, build_index, query, evaluate, histogram };

std::string to_string(Stage s);
// Process exit code for a failure in `s`; 0 is reserved for success.
int exit_code(Stage s);

class StageError : public std::runtime_error {
public:
    StageError(Stage stage, const std::string& what);
    Stage stage() const { return stage_; }

private:
    Stage stage_;
};

// Switches varied between experiment cells. lambda1 is the TGM L1 weight.
struct Ablation {
    bool ce = false;
    sgm::DannMode dann_mode = sgm::DannMode::off;
    bool use_generated = false;
    double lambda1 = 100.0;

    // e.g. "ce=on dann=only-positive gen=on lambda1=100"
    std::string label() const;
};

struct Cell {
    std::string name;
    Ablation ablation;
};

struct TilingConfig {
    int crop_size = 64;
    int stride = 16;
    double max_invalid_fraction = 0.1;
};

struct EvalConfig {
    std::vector<std::string> splits{"test"};
    std::vector<int> recall_ns{1, 5};
    std::vector<int> prior_radii{512};
    std::vector<double> histogram_edges{0, 10, 20, 30, 40, 50, 75, 100, 150, 200};
};

struct ExperimentConfig {
    std::string name = "desk";
    std::uint64_t seed = 0;
    fs::path work_dir = "stgl-run";

    // External rasters (with .meta sidecars) and split file. When `satellite`
    // is empty the synthetic worlds below are generated instead.
    fs::path satellite, thermal, unpaired_satellite, splits;
    WorldSpec world;
    // Satellite-only area used as generator input; ignored without use_generated.
    WorldSpec unpaired_world;
    // Used when `splits` is empty. No regions means a west-to-east
    // 55/15/30 train/val/test cut of the map extent.
    SplitSpec split_spec;

    TilingConfig tiling;
    CEConfig ce;
    tgm::TgmConfig tgm;
    sgm::SgmConfig sgm;
    Ablation ablation;
    // `run` executes one pipeline per cell; empty means a single cell named
    // `name` with `ablation`.
    std::vector<Cell> cells;
    EvalConfig eval;

    static ExperimentConfig desk();
    // Full-scale presets for TGM/SGM; the data paths must be supplied.
    static ExperimentConfig full();
    void validate() const;

    // Copy with the ablation switches pushed into the sub-configs, and the
    // experiment seed into both models.
    ExperimentConfig resolved(const Ablation& a) const;
    std::vector<Cell> effective_cells() const;
};

// Unknown keys are rejected so that a typo cannot silently fall back to a default.
void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
// A top-level "preset": "desk" | "full" selects the base the file overrides.
ExperimentConfig load_experiment(const fs::path& path);
void save_experiment(const fs::path& path, const ExperimentConfig& c);

// SHA-256 hex of the compact JSON dump.
std::string json_fingerprint(const nlohmann::json& j);

// ---- stages ---------------------------------------------------------------
// Each stage reads and writes explicit paths, so the CLI subcommands and the
// full pipeline share them.

void synthmap_stage(const WorldSpec& world, const fs::path& satellite_out, const fs::path& thermal_out);
void synthmap_satellite_stage(const WorldSpec& world, const fs::path& satellite_out);

// Builds a split dataset file from two co-registered rasters.
void tile_stage(const fs::path& satellite, const fs::path& thermal, const SplitSpec& splits,
                const TilingConfig& tiling, const fs::path& dataset_out);
// Satellite-only tiling for the generator, ids starting at `first_id`.
void tile_unpaired_stage(const fs::path& satellite, const TilingConfig& tiling, std::int64_t first_id,
                         const fs::path& tiles_out);

void enhance_stage(const fs::path& dataset_in, const CEConfig& ce, const fs::path& dataset_out);

// Trains on the train split; the in-progress checkpoint lives at
// `<ckpt_out>.partial` and is replaced by `ckpt_out` at the end.
void train_tgm_stage(const tgm::TgmConfig& cfg, const fs::path& dataset, const fs::path& ckpt_out);
void generate_stage(const fs::path& tgm_ckpt, const fs::path& unpaired_tiles, bool use_ce,
                    const fs::path& dataset_out);
void train_sgm_stage(const sgm::SgmConfig& cfg, const fs::path& dataset, const std::optional<fs::path>& generated,
                     const fs::path& ckpt_out);
void build_index_stage(const fs::path& sgm_ckpt, const fs::path& dataset, const std::string& split,
                       const fs::path& index_out);
// Throws StageError(evaluate) when the index was built by a different model.
EvalReport evaluate_stage(const fs::path& sgm_ckpt, const fs::path& index, const fs::path& dataset,
                          const std::string& split, const EvalConfig& eval, const std::string& label);
void histogram_stage(const std::vector<double>& errors, const std::vector<double>& edges, const fs::path& csv_out,
                     const fs::path& ppm_out);

// One Top-1 position error per line under an `error_m` header.
void write_errors_csv(const fs::path& path, const std::vector<double>& errors);
std::vector<double> read_errors_csv(const fs::path& path);

struct RunOptions {
    bool force = false; // ignore up-to-date artifacts
};

struct RunResult {
    std::vector<EvalReport> reports; // per cell, per eval split
    fs::path summary;                // markdown table over all reports
};

// tile -> enhance -> [train-tgm -> generate] -> train-sgm -> build-index ->
// evaluate (+ histogram) for every cell. A stage whose artifact already
// carries the same input key is skipped.
RunResult run_pipeline(const ExperimentConfig& config, const RunOptions& options = {});

} // namespace stgl::pipeline
