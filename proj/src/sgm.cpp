#include "stgl/sgm.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "stgl/error.hpp"
#include "stgl/nn/checkpoint.hpp"
#include "stgl/nn/image_tensor.hpp"

namespace stgl::sgm {

std::string to_string(DannMode m) {
    switch (m) {
    case DannMode::off: return "off";
    case DannMode::full: return "full";
    case DannMode::only_positive: return "only-positive";
    }
    return "?";
}

DannMode parse_dann_mode(const std::string& s) {
    if (s == "off") return DannMode::off;
    if (s == "full") return DannMode::full;
    if (s == "only-positive" || s == "only_positive") return DannMode::only_positive;
    throw InputError("unknown DANN mode '" + s + "' (expected off, full or only-positive)");
}

SgmConfig SgmConfig::full() { return {}; }

SgmConfig SgmConfig::desk() {
    SgmConfig c;
    c.c_target = 16;
    c.num_clusters = 8;
    c.c_final = 128;
    c.epochs = 200;
    c.queries_per_epoch = 48;
    c.learning_rate = 1e-3;
    c.backbone = "tiny";
    c.tiny_widths = {8, 16, 16, 32};
    c.kmeans_images = 32;
    return c;
}

void SgmConfig::validate() const {
    if (num_clusters * c_target != c_final) {
        throw InputError("descriptor size mismatch: K * C_target = " + std::to_string(num_clusters) + " * " +
                         std::to_string(c_target) + " != C_final = " + std::to_string(c_final));
    }
    if (!(margin > 0.0)) throw InputError("margin must be positive");
    if (!(lambda2 >= 0.0)) throw InputError("lambda2 must be non-negative");
    if (!(pos_radius_m > 0.0 && pos_radius_m < neg_radius_m)) {
        throw InputError("need 0 < pos_radius_m < neg_radius_m");
    }
    if (!(generated_mix_ratio >= 0.0 && generated_mix_ratio <= 1.0)) {
        throw InputError("generated_mix_ratio must lie in [0, 1]");
    }
    if (epochs < 1 || queries_per_epoch < 1 || cache_size < 1 || batch_queries < 1 || negatives_per_query < 1) {
        throw InputError("epoch, query, cache, batch and negative counts must be >= 1");
    }
    if (!(learning_rate > 0.0)) throw InputError("learning_rate must be positive");
    if (backbone != "tiny" && backbone != "resnet18") throw InputError("unknown backbone '" + backbone + "'");
    if (backbone == "tiny" && tiny_widths.size() != 4) throw InputError("tiny backbone needs four widths");
    if (pretrained) throw InputError("pretrained backbone weights are not available; set pretrained = false");
    if (domain_hidden < 1) throw InputError("domain_hidden must be >= 1");
}

void to_json(nlohmann::json& j, const SgmConfig& c) {
    j = {{"margin", c.margin},
         {"lambda2", c.lambda2},
         {"dann_mode", to_string(c.dann_mode)},
         {"c_target", c.c_target},
         {"num_clusters", c.num_clusters},
         {"c_final", c.c_final},
         {"epochs", c.epochs},
         {"queries_per_epoch", c.queries_per_epoch},
         {"cache_size", c.cache_size},
         {"batch_queries", c.batch_queries},
         {"negatives_per_query", c.negatives_per_query},
         {"learning_rate", c.learning_rate},
         {"pos_radius_m", c.pos_radius_m},
         {"neg_radius_m", c.neg_radius_m},
         {"use_ce", c.use_ce},
         {"ce_factor", c.ce_factor},
         {"use_generated", c.use_generated},
         {"generated_mix_ratio", c.generated_mix_ratio},
         {"seed", c.seed},
         {"backbone", c.backbone},
         {"tiny_widths", c.tiny_widths},
         {"pretrained", c.pretrained},
         {"domain_hidden", c.domain_hidden},
         {"netvlad_alpha", c.netvlad_alpha},
         {"kmeans_images", c.kmeans_images},
         {"kmeans_iterations", c.kmeans_iterations},
         {"val_prior_radius_m", c.val_prior_radius_m}};
}

void from_json(const nlohmann::json& j, SgmConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("margin", c.margin);
    get("lambda2", c.lambda2);
    if (j.contains("dann_mode")) c.dann_mode = parse_dann_mode(j.at("dann_mode").get<std::string>());
    get("c_target", c.c_target);
    get("num_clusters", c.num_clusters);
    get("c_final", c.c_final);
    get("epochs", c.epochs);
    get("queries_per_epoch", c.queries_per_epoch);
    get("cache_size", c.cache_size);
    get("batch_queries", c.batch_queries);
    get("negatives_per_query", c.negatives_per_query);
    get("learning_rate", c.learning_rate);
    get("pos_radius_m", c.pos_radius_m);
    get("neg_radius_m", c.neg_radius_m);
    get("use_ce", c.use_ce);
    get("ce_factor", c.ce_factor);
    get("use_generated", c.use_generated);
    get("generated_mix_ratio", c.generated_mix_ratio);
    get("seed", c.seed);
    get("backbone", c.backbone);
    get("tiny_widths", c.tiny_widths);
    get("pretrained", c.pretrained);
    get("domain_hidden", c.domain_hidden);
    get("netvlad_alpha", c.netvlad_alpha);
    get("kmeans_images", c.kmeans_images);
    get("kmeans_iterations", c.kmeans_iterations);
    get("val_prior_radius_m", c.val_prior_radius_m);
}

TinyBackbone::TinyBackbone(const std::vector<int>& widths, Rng& rng) : out_channels_(widths.back()) {
    int in = 3;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        convs_.push_back(std::make_unique<nn::Conv2d>(in, widths[i], 3, 2, 1, false, rng));
        norms_.push_back(std::make_unique<nn::BatchNorm2d>(widths[i]));
        add_child("conv" + std::to_string(i), *convs_.back());
        add_child("bn" + std::to_string(i), *norms_.back());
        in = widths[i];
    }
}

Tensor TinyBackbone::forward(const Tensor& x) {
    Tensor h = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) h = nn::relu(norms_[i]->forward(convs_[i]->forward(h)));
    return h;
}

struct ResNet18Trunk::Block : nn::Module {
    Block(int in, int out, int stride, Rng& rng)
        : conv1(in, out, 3, stride, 1, false, rng), bn1(out), conv2(out, out, 3, 1, 1, false, rng), bn2(out) {
        add_child("conv1", conv1);
        add_child("bn1", bn1);
        add_child("conv2", conv2);
        add_child("bn2", bn2);
        if (stride != 1 || in != out) {
            down = std::make_unique<nn::Conv2d>(in, out, 1, stride, 0, false, rng);
            down_bn = std::make_unique<nn::BatchNorm2d>(out);
            add_child("down", *down);
            add_child("down_bn", *down_bn);
        }
    }

    Tensor forward(const Tensor& x) {
        Tensor h = nn::relu(bn1.forward(conv1.forward(x)));
        h = bn2.forward(conv2.forward(h));
        const Tensor skip = down ? down_bn->forward(down->forward(x)) : x;
        return nn::relu(nn::add(h, skip));
    }

    nn::Conv2d conv1;
    nn::BatchNorm2d bn1;
    nn::Conv2d conv2;
    nn::BatchNorm2d bn2;
    std::unique_ptr<nn::Conv2d> down;
    std::unique_ptr<nn::BatchNorm2d> down_bn;
};

ResNet18Trunk::ResNet18Trunk(Rng& rng) {
    stem_ = std::make_unique<nn::Conv2d>(3, 64, 7, 2, 3, false, rng);
    stem_norm_ = std::make_unique<nn::BatchNorm2d>(64);
    add_child("stem", *stem_);
    add_child("stem_bn", *stem_norm_);
    const int widths[] = {64, 128, 256};
    int in = 64;
    for (int layer = 0; layer < 3; ++layer) {
        for (int b = 0; b < 2; ++b) {
            const int stride = layer > 0 && b == 0 ? 2 : 1;
            blocks_.push_back(std::make_unique<Block>(in, widths[layer], stride, rng));
            add_child("layer" + std::to_string(layer + 1) + "." + std::to_string(b), *blocks_.back());
            in = widths[layer];
        }
    }
}

Tensor ResNet18Trunk::forward(const Tensor& x) {
    Tensor h = nn::relu(stem_norm_->forward(stem_->forward(x)));
    h = nn::max_pool2d(h, 3, 2, 1);
    for (auto& b : blocks_) h = b->forward(h);
    return h;
}

NetVLAD::NetVLAD(int clusters, int channels, double alpha, Rng& rng)
    : clusters_(clusters),
      channels_(channels),
      alpha_(alpha),
      centroids_(add_parameter("centroids", Tensor({clusters, channels}))),
      assign_w_(add_parameter("assign.weight", Tensor({clusters, channels, 1, 1}))),
      assign_b_(add_parameter("assign.bias", Tensor({clusters}))) {
    std::vector<double> c(static_cast<std::size_t>(clusters) * channels);
    for (int k = 0; k < clusters; ++k) {
        double norm = 0.0;
        for (int j = 0; j < channels; ++j) {
            c[k * channels + j] = rng.normal();
            norm += c[k * channels + j] * c[k * channels + j];
        }
        norm = std::sqrt(norm);
        for (int j = 0; j < channels; ++j) c[k * channels + j] /= norm;
    }
    set_centroids(c);
}

void NetVLAD::set_centroids(const std::vector<double>& centroids) {
    if (centroids.size() != static_cast<std::size_t>(clusters_) * channels_) {
        throw InputError("set_centroids: expected " + std::to_string(clusters_ * channels_) + " values");
    }
    auto c = centroids_.mutable_values();
    auto w = assign_w_.mutable_values();
    auto b = assign_b_.mutable_values();
    for (int k = 0; k < clusters_; ++k) {
        double sq = 0.0;
        for (int j = 0; j < channels_; ++j) {
            const double v = centroids[k * channels_ + j];
            c[k * channels_ + j] = v;
            w[k * channels_ + j] = 2.0 * alpha_ * v;
            sq += v * v;
        }
        b[k] = -alpha_ * sq;
    }
}

Tensor NetVLAD::forward(const Tensor& features, std::vector<int>* degenerate) {
    if (features.rank() != 4 || features.dim(1) != channels_) {
        throw InputError("NetVLAD expects [N, " + std::to_string(channels_) + ", H, W], got " +
                         nn::shape_str(features.shape()));
    }
    const int n = features.dim(0);
    const Tensor assign = nn::softmax_axis1(nn::conv2d(features, assign_w_, assign_b_, 1, 0));
    const Tensor vlad = nn::vlad_aggregate(assign, features, centroids_);
    const Tensor intra = nn::l2_normalize_rows(nn::reshape(vlad, {n * clusters_, channels_}));
    return nn::l2_normalize_rows(nn::reshape(intra, {n, clusters_ * channels_}), 1e-12, degenerate);
}

DomainClassifier::DomainClassifier(int in, int hidden, Rng& rng) : hidden_(in, hidden, rng), out_(hidden, 2, rng) {
    add_child("hidden", hidden_);
    add_child("out", out_);
}

Tensor DomainClassifier::forward(const Tensor& descriptors) {
    return nn::softmax_axis1(out_.forward(nn::relu(hidden_.forward(descriptors))));
}

SgmNetwork::SgmNetwork(const SgmConfig& cfg) : config_(cfg) {
    config_.validate();
    Rng rng(hash_key(cfg.seed, 0x73676d));
    if (cfg.backbone == "tiny") {
        backbone_ = std::make_unique<TinyBackbone>(cfg.tiny_widths, rng);
    } else {
        backbone_ = std::make_unique<ResNet18Trunk>(rng);
    }
    compress_ = std::make_unique<nn::Conv2d>(backbone_->out_channels(), cfg.c_target, 1, 1, 0, true, rng);
    compress_norm_ = std::make_unique<nn::BatchNorm2d>(cfg.c_target);
    netvlad_ = std::make_unique<NetVLAD>(cfg.num_clusters, cfg.c_target, cfg.netvlad_alpha, rng);
    domain_ = std::make_unique<DomainClassifier>(cfg.c_final, cfg.domain_hidden, rng);
    add_child("backbone", *backbone_);
    add_child("compress", *compress_);
    add_child("compress_bn", *compress_norm_);
    add_child("netvlad", *netvlad_);
    add_child("domain", *domain_);
}

Tensor SgmNetwork::local_features(const Tensor& images) {
    if (images.rank() != 4 || images.dim(1) != 3) throw InputError("embed expects [N, 3, H, W]");
    if (images.dim(2) % 16 || images.dim(3) % 16) {
        throw InputError("embed: image size " + std::to_string(images.dim(2)) + "x" + std::to_string(images.dim(3)) +
                         " is not divisible by 16");
    }
    return compress_norm_->forward(compress_->forward(backbone_->forward(images)));
}

Tensor SgmNetwork::embed(const Tensor& images, std::vector<int>* degenerate) {
    return netvlad_->forward(local_features(images), degenerate);
}

double descriptor_distance(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw InputError("descriptor dimension mismatch: " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

Tensor images_to_input(const std::vector<const Image*>& images) { return nn::images_to_batch(images, 3, 2.0, -1.0); }

namespace {

// Puts the model in eval mode for the guard's lifetime.
class EvalScope {
public:
    explicit EvalScope(nn::Module& m) : m_(m), was_training_(m.training()) { m_.eval(); }
    ~EvalScope() { m_.train(was_training_); }

private:
    nn::Module& m_;
    bool was_training_;
};

} // namespace

std::vector<Descriptor> embed_all(SgmNetwork& model, const std::vector<const Image*>& images, int batch) {
    EvalScope scope(model);
    nn::NoGradGuard guard;
    std::vector<Descriptor> out;
    out.reserve(images.size());
    for (std::size_t start = 0; start < images.size(); start += batch) {
        const std::size_t end = std::min(images.size(), start + batch);
        std::vector<const Image*> chunk(images.begin() + start, images.begin() + end);
        std::vector<int> degenerate;
        const Tensor d = model.embed(images_to_input(chunk), &degenerate);
        const int dim = d.dim(1);
        const auto v = d.values();
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            Descriptor desc;
            desc.values.assign(v.begin() + i * dim, v.begin() + (i + 1) * dim);
            desc.degenerate = std::find(degenerate.begin(), degenerate.end(), static_cast<int>(i)) != degenerate.end();
            out.push_back(std::move(desc));
        }
    }
    return out;
}

Descriptor embed(SgmNetwork& model, const Image& image) { return std::move(embed_all(model, {&image}).front()); }

Tensor triplet_margin_loss(const Tensor& q, const Tensor& p, const Tensor& n, double margin) {
    if (q.shape() != p.shape() || q.shape() != n.shape() || q.rank() != 2) {
        throw InputError("triplet_margin_loss: dimension mismatch " + nn::shape_str(q.shape()) + ", " +
                         nn::shape_str(p.shape()) + ", " + nn::shape_str(n.shape()));
    }
    return nn::relu(nn::add_scalar(nn::sub(nn::row_distances(q, p), nn::row_distances(q, n)), margin));
}

Tensor dann_loss(DomainClassifier& fd, const Tensor& q, const Tensor& p, const Tensor& n, DannMode mode,
                 bool reverse) {
    if (mode == DannMode::off) throw InputError("dann_loss called with DANN off");
    const int t = q.dim(0);
    std::vector<Tensor> parts{q, p};
    if (mode == DannMode::full) parts.push_back(n);
    for (const auto& x : parts) {
        if (x.shape() != q.shape()) throw InputError("dann_loss: descriptor shape mismatch");
        for (double v : x.values()) {
            if (!std::isfinite(v)) throw InputError("dann_loss: non-finite descriptor");
        }
    }
    const int roles = static_cast<int>(parts.size());
    Tensor stacked = nn::concat_batch(parts);
    if (reverse) stacked = nn::gradient_reversal(stacked);
    const Tensor probs = fd.forward(stacked);

    constexpr double kFloor = 1e-12;
    std::vector<double> target(static_cast<std::size_t>(roles) * t * 2, 0.0);
    bool clamped = false;
    for (int r = 0; r < roles; ++r) {
        const int cls = r == 0 ? kThermalClass : kSatelliteClass;
        for (int i = 0; i < t; ++i) {
            const std::size_t row = static_cast<std::size_t>(r) * t + i;
            target[row * 2 + cls] = 1.0;
            clamped |= probs.values()[row * 2 + cls] <= kFloor;
        }
    }
    if (clamped) spdlog::warn("dann_loss: target probability clamped at {}", kFloor);
    const Tensor ce = nn::sum_axis1(nn::mul(nn::log_clamped(probs, kFloor), Tensor({roles * t, 2}, target)));

    // Sum the role terms of each triplet: [1, roles*t] x [t, roles*t]^T.
    std::vector<double> gather(static_cast<std::size_t>(t) * roles * t, 0.0);
    for (int i = 0; i < t; ++i)
        for (int r = 0; r < roles; ++r) gather[static_cast<std::size_t>(i) * roles * t + r * t + i] = 1.0;
    const Tensor per_triplet = nn::linear(nn::reshape(ce, {1, roles * t}), Tensor({t, roles * t}, gather), Tensor());
    return nn::scale(nn::reshape(per_triplet, {t}), -1.0);
}

Tensor sgm_total_loss(const Tensor& triplet_losses, const Tensor& dann_losses, double lambda2) {
    const Tensor lt = nn::mean(triplet_losses);
    if (!dann_losses.defined()) return lt;
    return nn::add(lt, nn::scale(nn::mean(dann_losses), lambda2));
}

void init_centroids(SgmNetwork& model, const std::vector<const Image*>& images, std::uint64_t seed) {
    const int k = model.netvlad().clusters();
    const int c = model.netvlad().channels();
    Rng rng(hash_key(seed, 0x6b6d65616e73));
    std::vector<double> feats; // row-major [M, c]
    if (!images.empty()) {
        EvalScope scope(model);
        nn::NoGradGuard guard;
        for (std::size_t start = 0; start < images.size(); start += 16) {
            std::vector<const Image*> chunk(images.begin() + start,
                                            images.begin() + std::min(images.size(), start + 16));
            const Tensor f = model.local_features(images_to_input(chunk));
            const int hw = f.dim(2) * f.dim(3);
            const auto v = f.values();
            for (int s = 0; s < f.dim(0); ++s)
                for (int p = 0; p < hw; ++p)
                    for (int j = 0; j < c; ++j) feats.push_back(v[(static_cast<std::size_t>(s) * c + j) * hw + p]);
        }
    }
    const std::size_t m = feats.size() / c;
    std::vector<double> centers(static_cast<std::size_t>(k) * c);
    if (m < static_cast<std::size_t>(k)) {
        if (!images.empty()) spdlog::warn("init_centroids: {} local features for {} clusters; using random", m, k);
        for (int i = 0; i < k; ++i) {
            double norm = 0.0;
            for (int j = 0; j < c; ++j) norm += std::pow(centers[i * c + j] = rng.normal(), 2);
            for (int j = 0; j < c; ++j) centers[i * c + j] /= std::sqrt(norm);
        }
        model.netvlad().set_centroids(centers);
        return;
    }
    std::vector<std::size_t> pick(m);
    for (std::size_t i = 0; i < m; ++i) pick[i] = i;
    rng.shuffle(pick.begin(), pick.end());
    for (int i = 0; i < k; ++i)
        std::copy_n(feats.begin() + pick[i] * c, c, centers.begin() + static_cast<std::size_t>(i) * c);

    std::vector<int> label(m, -1);
    for (int it = 0; it < model.config().kmeans_iterations; ++it) {
        bool changed = false;
        for (std::size_t s = 0; s < m; ++s) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int i = 0; i < k; ++i) {
                double d = 0.0;
                for (int j = 0; j < c; ++j) d += std::pow(feats[s * c + j] - centers[i * c + j], 2);
                if (d < best_d) best_d = d, best = i;
            }
            changed |= label[s] != best;
            label[s] = best;
        }
        if (!changed) break;
        std::vector<double> sum(centers.size(), 0.0);
        std::vector<std::size_t> count(k, 0);
        for (std::size_t s = 0; s < m; ++s) {
            ++count[label[s]];
            for (int j = 0; j < c; ++j) sum[label[s] * c + j] += feats[s * c + j];
        }
        for (int i = 0; i < k; ++i) {
            if (count[i] == 0) {
                const std::size_t s = rng.below(m);
                std::copy_n(feats.begin() + s * c, c, centers.begin() + static_cast<std::size_t>(i) * c);
                continue;
            }
            for (int j = 0; j < c; ++j) centers[i * c + j] = sum[i * c + j] / static_cast<double>(count[i]);
        }
    }
    model.netvlad().set_centroids(centers);
}

void save_sgm(const std::filesystem::path& path, SgmNetwork& model, const nlohmann::json& extra) {
    nn::Checkpoint ckpt;
    ckpt.meta = {{"kind", "sgm"}, {"config", model.config()}, {"fingerprint", nn::fingerprint(model)}};
    if (extra.is_object()) ckpt.meta["extra"] = extra;
    nn::export_state(model, "", ckpt);
    nn::save_checkpoint(path, ckpt);
}

std::unique_ptr<SgmNetwork> load_sgm(const std::filesystem::path& path, nlohmann::json* meta) {
    if (!std::filesystem::exists(path)) throw FormatError("SGM checkpoint not found: " + path.string());
    const auto ckpt = nn::load_checkpoint(path);
    if (ckpt.meta.value("kind", "") != "sgm") throw FormatError(path.string() + " is not an SGM checkpoint");
    auto model = std::make_unique<SgmNetwork>(ckpt.meta.at("config").get<SgmConfig>());
    nn::import_state(*model, "", ckpt);
    model->eval();
    if (meta) *meta = ckpt.meta;
    return model;
}

} // namespace stgl::sgm
