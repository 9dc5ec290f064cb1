#include "stgl/nn/image_tensor.hpp"

#include "stgl/error.hpp"

namespace stgl::nn {

Tensor images_to_batch(const std::vector<const Image*>& images, int channels, double gain, double bias) {
    if (images.empty()) throw InputError("images_to_batch: no images");
    const int h = images.front()->height, w = images.front()->width;
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<double> data;
    data.reserve(images.size() * channels * plane);
    for (const Image* img : images) {
        if (img->height != h || img->width != w) throw InputError("images_to_batch: size mismatch");
        if (img->channels != channels && img->channels != 1) {
            throw InputError("images_to_batch: cannot map " + std::to_string(img->channels) + " channels to " +
                             std::to_string(channels));
        }
        for (int c = 0; c < channels; ++c) {
            const int src_c = img->channels == 1 ? 0 : c;
            const double* src = img->data.data() + src_c * plane;
            for (std::size_t k = 0; k < plane; ++k) data.push_back(src[k] * gain + bias);
        }
    }
    return Tensor({static_cast<int>(images.size()), channels, h, w}, std::move(data));
}

Image batch_to_image(const Tensor& batch, int index, double gain, double bias) {
    if (batch.rank() != 4 || index < 0 || index >= batch.dim(0)) throw InputError("batch_to_image: bad index");
    Image img(batch.dim(1), batch.dim(2), batch.dim(3));
    auto src = batch.values().subspan(static_cast<std::size_t>(index) * img.size(), img.size());
    for (std::size_t k = 0; k < img.size(); ++k) img.data[k] = src[k] * gain + bias;
    return img;
}

} // namespace stgl::nn
