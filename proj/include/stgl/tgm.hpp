#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "json.hpp"
#include "stgl/geodata.hpp"
#include "stgl/nn/layers.hpp"

namespace stgl::tgm {

struct TgmConfig {
    double lambda1 = 100.0;
    double label_fake = 0.0;   // a
    double label_real = 1.0;   // b
    double label_target = 1.0; // c
    int epochs = 40;
    int batch_size = 8;
    double learning_rate = 2e-4;
    double adam_beta1 = 0.5;
    int decay_start_epoch = 20;
    int train_resolution = 1024;
    int output_resolution = 512;
    bool use_ce_inputs = false;
    double ce_factor = 3.0;
    int unet_depth = 8;
    int base_width = 64;
    int disc_base_width = 64;
    int disc_layers = 3;
    // Stop after this many generator updates; 0 runs all epochs.
    long max_steps = 0;
    std::uint64_t seed = 0;

    static TgmConfig full();
    static TgmConfig desk();
    void validate() const;
};

void to_json(nlohmann::json& j, const TgmConfig& c);
void from_json(const nlohmann::json& j, TgmConfig& c);

// U-Net: satellite [N, 3, H, W] in [-1, 1] -> thermal [N, 1, H, W] in [-1, 1].
// Per-sample instance normalization and no dropout, so the mapping is a
// deterministic function of a single input.
class Generator : public nn::Module {
public:
    Generator(int depth, int base_width, Rng& rng, nn::Init init = nn::Init::normal_002);
    nn::Tensor forward(const nn::Tensor& satellite);
    int depth() const { return static_cast<int>(down_.size()); }

private:
    std::vector<std::unique_ptr<nn::Conv2d>> down_;
    std::vector<std::unique_ptr<nn::InstanceNorm2d>> down_norm_; // null where unnormalized
    std::vector<std::unique_ptr<nn::ConvTranspose2d>> up_;
    std::vector<std::unique_ptr<nn::InstanceNorm2d>> up_norm_;
};

// Conditional patch discriminator over channel-concatenated (thermal,
// satellite); returns an unbounded score grid [N, 1, h, w].
class Discriminator : public nn::Module {
public:
    Discriminator(int base_width, int layers, Rng& rng, nn::Init init = nn::Init::normal_002);
    nn::Tensor forward(const nn::Tensor& thermal, const nn::Tensor& satellite);

private:
    std::vector<std::unique_ptr<nn::Conv2d>> convs_;
    std::vector<std::unique_ptr<nn::InstanceNorm2d>> norms_;
};

// 1/2 mean((real - b)^2) + 1/2 mean((fake - a)^2). Grids may differ in shape.
nn::Tensor lsgan_d_loss(const nn::Tensor& scores_real, const nn::Tensor& scores_fake, double a, double b);
// mean((fake - c)^2), no 1/2 factor.
nn::Tensor lsgan_g_loss(const nn::Tensor& scores_fake, double c);
nn::Tensor l1_loss(const nn::Tensor& generated, const nn::Tensor& target);

struct TgmStepStats {
    long step = 0;
    int epoch = 0;
    double lr = 0.0;
    double loss_d = 0.0;
    double loss_g_gan = 0.0;
    double l1 = 0.0; // mean |G(x) - y| in the [-1, 1] training range
};

struct TgmModel {
    TgmConfig config;
    std::unique_ptr<Generator> generator;
    std::unique_ptr<Discriminator> discriminator;
    bool trained = false;
    std::string data_fingerprint;
    std::vector<TgmStepStats> history;

    explicit TgmModel(const TgmConfig& cfg);
};

struct TgmTrainOptions {
    std::optional<std::filesystem::path> checkpoint_path; // rewritten every epoch
    std::function<void(const TgmStepStats&)> on_step;
};

// Alternating updates: D minimizes lsgan_d_loss, then G minimizes
// lsgan_g_loss + lambda1 * l1_loss. Adam, linear LR decay from
// decay_start_epoch to zero at the end of training.
TgmModel train_tgm(const TgmConfig& config, const std::vector<PairedCrop>& pairs,
                   const TgmTrainOptions& options = {});

// Mean of the last `window` L1 values (fewer if history is shorter).
double running_l1(const std::vector<TgmStepStats>& history, std::size_t window = 25);

// Runs G on a single satellite crop in [0, 1]; returns a 1-channel thermal
// crop in [0, 1] at output_resolution.
Image translate(TgmModel& model, const Image& satellite);

// One generated pair per satellite tile; positions and ids are inherited.
// With use_ce the thermal side is brought into the contrast-enhanced domain
// (a no-op when G was already trained on enhanced targets).
std::vector<PairedCrop> generate_dataset(TgmModel& model, const std::vector<GeoTile>& unpaired_sats, bool use_ce);

void save_tgm(const std::filesystem::path& path, TgmModel& model);
TgmModel load_tgm(const std::filesystem::path& path);

// Content hash of a pair list (ids, positions, pixels).
std::string data_fingerprint(const std::vector<PairedCrop>& pairs);

} // namespace stgl::tgm
