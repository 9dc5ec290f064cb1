#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stgl/geodata.hpp"
#include "stgl/nn/layers.hpp"

namespace stgl::sgm {

using nn::Tensor;

enum class DannMode { off, full, only_positive };

std::string to_string(DannMode m);
// Accepts "off", "full", "only-positive" and "only_positive".
DannMode parse_dann_mode(const std::string& s);

struct SgmConfig {
    double margin = 0.1;
    double lambda2 = 0.1;
    DannMode dann_mode = DannMode::off;
    int c_target = 64;
    int num_clusters = 64;
    int c_final = 4096;
    int epochs = 100;
    int queries_per_epoch = 5000;
    int cache_size = 5000;
    int batch_queries = 4;
    int negatives_per_query = 10;
    double learning_rate = 1e-4;
    double pos_radius_m = 35.0;
    double neg_radius_m = 50.0;
    bool use_ce = false;
    double ce_factor = 3.0;
    bool use_generated = false;
    double generated_mix_ratio = 0.5;
    std::uint64_t seed = 0;

    // "tiny" (four strided conv blocks) or "resnet18" (trunk through layer3).
    std::string backbone = "resnet18";
    std::vector<int> tiny_widths{16, 32, 64, 128};
    // No pretrained weights ship with this code; true is rejected.
    bool pretrained = false;
    int domain_hidden = 256;
    // Soft-assignment sharpness used to initialise the assignment conv.
    double netvlad_alpha = 10.0;
    // Tiles sampled for the k-means centroid warm-up; 0 uses random unit vectors.
    int kmeans_images = 64;
    int kmeans_iterations = 20;
    // Prior radius of the validation metric used for checkpoint selection.
    double val_prior_radius_m = 512.0;

    static SgmConfig full();
    static SgmConfig desk();
    void validate() const;
};

void to_json(nlohmann::json& j, const SgmConfig& c);
void from_json(const nlohmann::json& j, SgmConfig& c);

class Backbone : public nn::Module {
public:
    virtual Tensor forward(const Tensor& x) = 0;
    virtual int out_channels() const = 0;
};

// Four conv3x3/stride-2 blocks with batch norm and ReLU: spatial factor 16.
class TinyBackbone : public Backbone {
public:
    TinyBackbone(const std::vector<int>& widths, Rng& rng);
    Tensor forward(const Tensor& x) override;
    int out_channels() const override { return out_channels_; }

private:
    std::vector<std::unique_ptr<nn::Conv2d>> convs_;
    std::vector<std::unique_ptr<nn::BatchNorm2d>> norms_;
    int out_channels_;
};

// ResNet-18 stem, layer1..layer3 (stride 16, 256 channels).
class ResNet18Trunk : public Backbone {
public:
    explicit ResNet18Trunk(Rng& rng);
    Tensor forward(const Tensor& x) override;
    int out_channels() const override { return 256; }

private:
    struct Block;
    std::unique_ptr<nn::Conv2d> stem_;
    std::unique_ptr<nn::BatchNorm2d> stem_norm_;
    std::vector<std::unique_ptr<Block>> blocks_;
};

class NetVLAD : public nn::Module {
public:
    NetVLAD(int clusters, int channels, double alpha, Rng& rng);

    // features [N, C, H, W] -> [N, K*C], intra- then globally L2-normalized.
    // Samples whose aggregate is zero come back as zero rows and are listed
    // in `degenerate`.
    Tensor forward(const Tensor& features, std::vector<int>* degenerate = nullptr);

    // Sets centroids and the assignment conv (w = 2 alpha c, b = -alpha |c|^2).
    void set_centroids(const std::vector<double>& centroids);
    int clusters() const { return clusters_; }
    int channels() const { return channels_; }
    const Tensor& centroids() const { return centroids_; }

private:
    int clusters_, channels_;
    double alpha_;
    Tensor& centroids_;
    Tensor& assign_w_;
    Tensor& assign_b_;
};

// Two-layer perceptron over descriptors -> (p_thermal, p_satellite).
class DomainClassifier : public nn::Module {
public:
    DomainClassifier(int in, int hidden, Rng& rng);
    Tensor forward(const Tensor& descriptors);

private:
    nn::Linear hidden_, out_;
};

inline constexpr int kThermalClass = 0;
inline constexpr int kSatelliteClass = 1;

class SgmNetwork : public nn::Module {
public:
    explicit SgmNetwork(const SgmConfig& cfg);

    // images [N, 3, H, W] in network range -> descriptors [N, c_final].
    Tensor embed(const Tensor& images, std::vector<int>* degenerate = nullptr);
    // F and F_C only: [N, c_target, H/16, W/16].
    Tensor local_features(const Tensor& images);

    const SgmConfig& config() const { return config_; }
    Backbone& backbone() { return *backbone_; }
    NetVLAD& netvlad() { return *netvlad_; }
    DomainClassifier& domain() { return *domain_; }

private:
    SgmConfig config_;
    std::unique_ptr<Backbone> backbone_;
    std::unique_ptr<nn::Conv2d> compress_;
    std::unique_ptr<nn::BatchNorm2d> compress_norm_;
    std::unique_ptr<NetVLAD> netvlad_;
    std::unique_ptr<DomainClassifier> domain_;
};

struct Descriptor {
    std::vector<float> values;
    bool degenerate = false;

    std::size_t size() const { return values.size(); }
};

// Float descriptors, distances accumulated in double.
double descriptor_distance(std::span<const float> a, std::span<const float> b);

// Maps [0, 1] crops (1 or 3 channels) to the network input range.
Tensor images_to_input(const std::vector<const Image*>& images);

// Eval-mode, no-grad embedding. Spatial dims must be divisible by 16.
Descriptor embed(SgmNetwork& model, const Image& image);
std::vector<Descriptor> embed_all(SgmNetwork& model, const std::vector<const Image*>& images, int batch = 16);

// Per-triplet max(0, |q - p| - |q - n| + m) over rows of [T, D].
Tensor triplet_margin_loss(const Tensor& q, const Tensor& p, const Tensor& n, double margin);

// Per-triplet domain cross-entropy, inputs passed through gradient reversal
// (when `reverse`) before the classifier. `n` is ignored in only_positive
// mode; DannMode::off is an error here.
Tensor dann_loss(DomainClassifier& fd, const Tensor& q, const Tensor& p, const Tensor& n, DannMode mode,
                 bool reverse = true);

// mean(triplet) + lambda2 * mean(dann); an undefined dann tensor counts as 0.
Tensor sgm_total_loss(const Tensor& triplet_losses, const Tensor& dann_losses, double lambda2);

// k-means (Lloyd) over local features of the given crops; sets the
// NetVLAD centroids. Falls back to random unit vectors when `images` is empty.
void init_centroids(SgmNetwork& model, const std::vector<const Image*>& images, std::uint64_t seed);

void save_sgm(const std::filesystem::path& path, SgmNetwork& model, const nlohmann::json& extra = {});
std::unique_ptr<SgmNetwork> load_sgm(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

} // namespace stgl::sgm
