#include "stgl/tgm.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stgl/enhance.hpp"
#include "stgl/error.hpp"
#include "stgl/nn/checkpoint.hpp"
#include "stgl/nn/image_tensor.hpp"

namespace stgl::tgm {

using nn::Tensor;

TgmConfig TgmConfig::full() { return {}; }

TgmConfig TgmConfig::desk() {
    TgmConfig c;
    c.epochs = 40;
    c.batch_size = 4;
    c.decay_start_epoch = 20;
    c.train_resolution = 64;
    c.output_resolution = 64;
    c.unet_depth = 4;
    c.base_width = 16;
    c.disc_base_width = 16;
    c.disc_layers = 2;
    c.learning_rate = 5e-4;
    return c;
}

void TgmConfig::validate() const {
    if (!(lambda1 >= 0.0)) throw InputError("lambda1 must be non-negative");
    if (epochs < 1 || batch_size < 1) throw InputError("epochs and batch_size must be >= 1");
    if (decay_start_epoch < 0 || epochs < decay_start_epoch) throw InputError("need epochs >= decay_start_epoch >= 0");
    if (!(learning_rate > 0.0)) throw InputError("learning_rate must be positive");
    if (output_resolution < 1 || train_resolution < output_resolution) {
        throw InputError("need train_resolution >= output_resolution >= 1");
    }
    if (unet_depth < 1 || base_width < 1 || disc_base_width < 1 || disc_layers < 1) {
        throw InputError("network sizes must be positive");
    }
    if (train_resolution % (1 << unet_depth) != 0) {
        throw InputError("train_resolution must be divisible by 2^unet_depth");
    }
}

void to_json(nlohmann::json& j, const TgmConfig& c) {
    j = {{"lambda1", c.lambda1},
         {"label_fake", c.label_fake},
         {"label_real", c.label_real},
         {"label_target", c.label_target},
         {"epochs", c.epochs},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"adam_beta1", c.adam_beta1},
         {"decay_start_epoch", c.decay_start_epoch},
         {"train_resolution", c.train_resolution},
         {"output_resolution", c.output_resolution},
         {"use_ce_inputs", c.use_ce_inputs},
         {"ce_factor", c.ce_factor},
         {"unet_depth", c.unet_depth},
         {"base_width", c.base_width},
         {"disc_base_width", c.disc_base_width},
         {"disc_layers", c.disc_layers},
         {"max_steps", c.max_steps},
         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TgmConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("lambda1", c.lambda1);
    get("label_fake", c.label_fake);
    get("label_real", c.label_real);
    get("label_target", c.label_target);
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("learning_rate", c.learning_rate);
    get("adam_beta1", c.adam_beta1);
    get("decay_start_epoch", c.decay_start_epoch);
    get("train_resolution", c.train_resolution);
    get("output_resolution", c.output_resolution);
    get("use_ce_inputs", c.use_ce_inputs);
    get("ce_factor", c.ce_factor);
    get("unet_depth", c.unet_depth);
    get("base_width", c.base_width);
    get("disc_base_width", c.disc_base_width);
    get("disc_layers", c.disc_layers);
    get("max_steps", c.max_steps);
    get("seed", c.seed);
}

namespace {

int level_width(int base, int level) { return base * (1 << std::min(level, 3)); }

void require_finite(const Tensor& t, const char* what) {
    for (double v : t.values()) {
        if (!std::isfinite(v)) throw InputError(std::string(what) + ": non-finite input");
    }
}

} // namespace

Generator::Generator(int depth, int base_width, Rng& rng, nn::Init init) {
    if (depth < 1) throw InputError("U-Net depth must be >= 1");
    for (int i = 0; i < depth; ++i) {
        const int in = i == 0 ? 3 : level_width(base_width, i - 1);
        const int out = level_width(base_width, i);
        const bool normed = i > 0 && i < depth - 1;
        down_.push_back(std::make_unique<nn::Conv2d>(in, out, 4, 2, 1, !normed, rng, init));
        add_child("down" + std::to_string(i), *down_.back());
        down_norm_.push_back(normed ? std::make_unique<nn::InstanceNorm2d>(out) : nullptr);
        if (normed) add_child("down_norm" + std::to_string(i), *down_norm_.back());
    }
    up_.resize(depth);
    up_norm_.resize(depth);
    for (int i = depth - 1; i >= 0; --i) {
        const int in = i == depth - 1 ? level_width(base_width, i) : 2 * level_width(base_width, i);
        const int out = i == 0 ? 1 : level_width(base_width, i - 1);
        up_[i] = std::make_unique<nn::ConvTranspose2d>(in, out, 4, 2, 1, i == 0, rng, init);
        add_child("up" + std::to_string(i), *up_[i]);
        if (i > 0) {
            up_norm_[i] = std::make_unique<nn::InstanceNorm2d>(out);
            add_child("up_norm" + std::to_string(i), *up_norm_[i]);
        }
    }
}

Tensor Generator::forward(const Tensor& satellite) {
    const int depth = this->depth();
    if (satellite.rank() != 4 || satellite.dim(1) != 3) throw InputError("generator expects [N, 3, H, W]");
    if (satellite.dim(2) % (1 << depth) || satellite.dim(3) % (1 << depth)) {
        throw InputError("generator input size must be divisible by 2^depth");
    }
    std::vector<Tensor> skips;
    Tensor h = satellite;
    for (int i = 0; i < depth; ++i) {
        if (i > 0) h = nn::leaky_relu(h, 0.2);
        h = down_[i]->forward(h);
        if (down_norm_[i]) h = down_norm_[i]->forward(h);
        skips.push_back(h);
    }
    for (int i = depth - 1; i >= 0; --i) {
        h = up_[i]->forward(nn::relu(h));
        if (i > 0) {
            h = up_norm_[i]->forward(h);
            h = nn::concat_channels(h, skips[i - 1]);
        }
    }
    return nn::tanh(h);
}

Discriminator::Discriminator(int base_width, int layers, Rng& rng, nn::Init init) {
    int in = 4;
    for (int i = 0; i <= layers; ++i) {
        const int out = level_width(base_width, i);
        const int stride = i < layers ? 2 : 1;
        convs_.push_back(std::make_unique<nn::Conv2d>(in, out, 4, stride, 1, i == 0, rng, init));
        add_child("conv" + std::to_string(i), *convs_.back());
        norms_.push_back(i > 0 ? std::make_unique<nn::InstanceNorm2d>(out) : nullptr);
        if (i > 0) add_child("norm" + std::to_string(i), *norms_.back());
        in = out;
    }
    convs_.push_back(std::make_unique<nn::Conv2d>(in, 1, 4, 1, 1, true, rng, init));
    add_child("score", *convs_.back());
}

Tensor Discriminator::forward(const Tensor& thermal, const Tensor& satellite) {
    Tensor h = nn::concat_channels(thermal, satellite);
    for (std::size_t i = 0; i + 1 < convs_.size(); ++i) {
        h = convs_[i]->forward(h);
        if (norms_[i]) h = norms_[i]->forward(h);
        h = nn::leaky_relu(h, 0.2);
    }
    return convs_.back()->forward(h);
}

Tensor lsgan_d_loss(const Tensor& scores_real, const Tensor& scores_fake, double a, double b) {
    require_finite(scores_real, "lsgan_d_loss");
    require_finite(scores_fake, "lsgan_d_loss");
    return nn::add(nn::scale(nn::mean(nn::square(nn::add_scalar(scores_real, -b))), 0.5),
                   nn::scale(nn::mean(nn::square(nn::add_scalar(scores_fake, -a))), 0.5));
}

Tensor lsgan_g_loss(const Tensor& scores_fake, double c) {
    require_finite(scores_fake, "lsgan_g_loss");
    return nn::mean(nn::square(nn::add_scalar(scores_fake, -c)));
}

Tensor l1_loss(const Tensor& generated, const Tensor& target) {
    if (generated.shape() != target.shape()) {
        throw InputError("l1_loss: shape mismatch " + nn::shape_str(generated.shape()) + " vs " +
                         nn::shape_str(target.shape()));
    }
    return nn::mean(nn::abs(nn::sub(generated, target)));
}

TgmModel::TgmModel(const TgmConfig& cfg) : config(cfg) {
    config.validate();
    Rng rng(hash_key(cfg.seed, 0x7467));
    generator = std::make_unique<Generator>(cfg.unet_depth, cfg.base_width, rng);
    discriminator = std::make_unique<Discriminator>(cfg.disc_base_width, cfg.disc_layers, rng);
}

std::string data_fingerprint(const std::vector<PairedCrop>& pairs) {
    std::vector<unsigned char> buf;
    auto append = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        buf.insert(buf.end(), b, b + n);
    };
    for (const auto& p : pairs) {
        const auto id = p.tile_id();
        append(&id, sizeof id);
        append(&p.thermal.position, sizeof(Vec2));
        append(p.satellite.image.data.data(), p.satellite.image.size() * sizeof(double));
        append(p.thermal.image.data.data(), p.thermal.image.size() * sizeof(double));
    }
    return sha256_hex(buf);
}

double running_l1(const std::vector<TgmStepStats>& history, std::size_t window) {
    if (history.empty()) return 0.0;
    const std::size_t n = std::min(window, history.size());
    double s = 0.0;
    for (std::size_t i = history.size() - n; i < history.size(); ++i) s += history[i].l1;
    return s / static_cast<double>(n);
}

TgmModel train_tgm(const TgmConfig& config, const std::vector<PairedCrop>& pairs, const TgmTrainOptions& options) {
    config.validate();
    if (pairs.empty()) throw InputError("train_tgm: empty dataset");
    const int res = config.output_resolution;
    const int train_res = config.train_resolution;

    // Inputs live in [-1, 1] at the training resolution.
    std::vector<Image> sats, targets;
    sats.reserve(pairs.size());
    targets.reserve(pairs.size());
    for (const auto& p : pairs) {
        if (p.satellite.image.height != res || p.satellite.image.width != res || p.thermal.image.height != res ||
            p.thermal.image.width != res) {
            throw InputError("train_tgm: crops must be " + std::to_string(res) + " px");
        }
        Image t = config.use_ce_inputs ? contrast_enhance(p.thermal.image, config.ce_factor) : p.thermal.image;
        sats.push_back(resize_bilinear(p.satellite.image, train_res, train_res));
        targets.push_back(resize_bilinear(t, train_res, train_res));
    }

    TgmModel model(config);
    model.data_fingerprint = data_fingerprint(pairs);
    auto& G = *model.generator;
    auto& D = *model.discriminator;
    G.train();
    D.train();
    const auto g_params = G.parameters();
    const auto d_params = D.parameters();
    nn::Adam opt_g(g_params, {.lr = config.learning_rate, .beta1 = config.adam_beta1});
    nn::Adam opt_d(d_params, {.lr = config.learning_rate, .beta1 = config.adam_beta1});

    Rng rng(hash_key(config.seed, 0x6461746131));
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    long step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const int decayed = std::max(0, epoch + 1 - config.decay_start_epoch);
        const double lr = config.learning_rate *
                          (1.0 - static_cast<double>(decayed) / (config.epochs - config.decay_start_epoch + 1));
        opt_g.set_lr(lr);
        opt_d.set_lr(lr);
        rng.shuffle(order.begin(), order.end());
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<const Image*> sb, tb;
            for (std::size_t k = start; k < end; ++k) {
                sb.push_back(&sats[order[k]]);
                tb.push_back(&targets[order[k]]);
            }
            const Tensor sat = nn::images_to_batch(sb, 3, 2.0, -1.0);
            const Tensor real = nn::images_to_batch(tb, 1, 2.0, -1.0);

            const Tensor fake = G.forward(sat);

            // Discriminator update on (real, detached fake).
            opt_d.zero_grad();
            const Tensor loss_d = lsgan_d_loss(D.forward(real, sat), D.forward(fake.detach(), sat),
                                               config.label_fake, config.label_real);
            loss_d.backward();
            opt_d.step();

            // Generator update through a frozen discriminator.
            nn::set_requires_grad(d_params, false);
            opt_g.zero_grad();
            const Tensor loss_gan = lsgan_g_loss(D.forward(fake, sat), config.label_target);
            const Tensor loss_l1 = l1_loss(fake, real);
            const Tensor loss_g = nn::add(loss_gan, nn::scale(loss_l1, config.lambda1));
            loss_g.backward();
            opt_g.step();
            nn::set_requires_grad(d_params, true);

            ++step;
            TgmStepStats stats{step, epoch, lr, loss_d.item(), loss_gan.item(), loss_l1.item()};
            if (!std::isfinite(stats.loss_d) || !std::isfinite(stats.loss_g_gan) || !std::isfinite(stats.l1)) {
                throw TrainingError("train_tgm: non-finite loss at step " + std::to_string(step));
            }
            model.history.push_back(stats);
            if (options.on_step) options.on_step(stats);
            if (config.max_steps > 0 && step >= config.max_steps) break;
        }
        model.trained = true;
        if (options.checkpoint_path) save_tgm(*options.checkpoint_path, model);
        if (config.max_steps > 0 && step >= config.max_steps) break;
    }
    model.trained = true;
    G.eval();
    D.eval();
    return model;
}

Image translate(TgmModel& model, const Image& satellite) {
    if (!model.trained) throw InputError("generator is untrained; load or train a checkpoint first");
    if (satellite.channels != 3) throw InputError("translate expects a 3-channel satellite crop");
    const auto& cfg = model.config;
    const Image up = resize_bilinear(satellite, cfg.train_resolution, cfg.train_resolution);
    nn::NoGradGuard guard;
    const Tensor out = model.generator->forward(nn::images_to_batch({&up}, 3, 2.0, -1.0));
    Image thermal = nn::batch_to_image(out, 0, 0.5, 0.5);
    for (double& v : thermal.data) v = std::clamp(v, 0.0, 1.0);
    return resize_bilinear(thermal, cfg.output_resolution, cfg.output_resolution);
}

std::vector<PairedCrop> generate_dataset(TgmModel& model, const std::vector<GeoTile>& unpaired_sats, bool use_ce) {
    if (!model.trained) throw InputError("generator is untrained; load or train a checkpoint first");
    if (!use_ce && model.config.use_ce_inputs) {
        spdlog::warn("generator was trained on contrast-enhanced targets; outputs stay in that domain");
    }
    std::vector<PairedCrop> out;
    out.reserve(unpaired_sats.size());
    for (const auto& sat : unpaired_sats) {
        PairedCrop p;
        p.satellite = sat;
        p.satellite.valid.clear();
        p.thermal.offset = sat.offset;
        p.thermal.position = sat.position;
        p.thermal.tile_id = sat.tile_id;
        Image thermal = translate(model, resize_bilinear(sat.image, model.config.output_resolution,
                                                         model.config.output_resolution));
        if (use_ce && !model.config.use_ce_inputs) thermal = contrast_enhance(thermal, model.config.ce_factor);
        p.thermal.image = std::move(thermal);
        p.source = CropSource::generated;
        p.invalid_fraction = 0.0;
        out.push_back(std::move(p));
    }
    return out;
}

void save_tgm(const std::filesystem::path& path, TgmModel& model) {
    nn::Checkpoint ckpt;
    ckpt.meta = {{"kind", "tgm"},
                 {"config", model.config},
                 {"trained", model.trained},
                 {"data_fingerprint", model.data_fingerprint},
                 {"steps", model.history.size()}};
    nn::export_state(*model.generator, "G.", ckpt);
    nn::export_state(*model.discriminator, "D.", ckpt);
    nn::save_checkpoint(path, ckpt);
}

TgmModel load_tgm(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FormatError("TGM checkpoint not found: " + path.string());
    const auto ckpt = nn::load_checkpoint(path);
    if (ckpt.meta.value("kind", "") != "tgm") throw FormatError(path.string() + " is not a TGM checkpoint");
    TgmModel model(ckpt.meta.at("config").get<TgmConfig>());
    nn::import_state(*model.generator, "G.", ckpt);
    nn::import_state(*model.discriminator, "D.", ckpt);
    model.trained = ckpt.meta.value("trained", false);
    model.data_fingerprint = ckpt.meta.value("data_fingerprint", "");
    model.generator->eval();
    model.discriminator->eval();
    return model;
}

} // namespace stgl::tgm
