#include "alden/ct_image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace alden {

CTSlice::CTSlice(int height, int width, std::vector<double> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels)) {
    if (height_ < kMinSliceExtent || width_ < kMinSliceExtent) {
        throw std::invalid_argument("CTSlice: extents must be at least " +
                                    std::to_string(kMinSliceExtent) + ", got " +
                                    std::to_string(height_) + "x" + std::to_string(width_));
    }
    if (pixels_.size() != static_cast<size_t>(height_) * static_cast<size_t>(width_)) {
        throw std::invalid_argument("CTSlice: pixel count does not match extents");
    }
    for (double& v : pixels_) {
        if (!std::isfinite(v)) throw std::invalid_argument("CTSlice: non-finite pixel value");
        v = std::clamp(v, kHuMin, kHuMax);
    }
}

NormalizedImage normalize_hu(const CTSlice& slice, double window_min, double window_max) {
    if (!(window_min < window_max)) {
        throw std::invalid_argument("normalize_hu: window_min must be below window_max");
    }
    NormalizedImage img;
    img.height = slice.height();
    img.width = slice.width();
    img.window_min = window_min;
    img.window_max = window_max;
    img.pixels.resize(static_cast<size_t>(slice.numel()));
    const double span = window_max - window_min;
    auto src = slice.pixels();
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        img.pixels[i] = std::clamp((src[i] - window_min) / span, 0.0, 1.0);
    }
    return img;
}

CTSlice denormalize(const NormalizedImage& img) {
    const double span = img.window_max - img.window_min;
    std::vector<double> hu(img.pixels.size());
    for (size_t i = 0; i < hu.size(); ++i) hu[i] = img.pixels[i] * span + img.window_min;
    return CTSlice(img.height, img.width, std::move(hu));
}

Tensor image_batch(std::span<const NormalizedImage> images) {
    if (images.empty()) throw std::invalid_argument("image_batch: empty batch");
    const int h = images[0].height, w = images[0].width;
    Tensor t({static_cast<int>(images.size()), 1, h, w});
    double* dst = t.data();
    for (const NormalizedImage& img : images) {
        if (img.height != h || img.width != w) {
            throw std::invalid_argument("image_batch: mixed image extents");
        }
        std::copy(img.pixels.begin(), img.pixels.end(), dst);
        dst += img.pixels.size();
    }
    return t;
}

Tensor image_batch(const NormalizedImage& image) {
    return image_batch(std::span<const NormalizedImage>(&image, 1));
}

NormalizedImage image_from_batch(const Tensor& batch, int index, double window_min,
                                 double window_max) {
    if (batch.dim() != 4 || batch.size(1) != 1) {
        throw std::invalid_argument("image_from_batch: want [B,1,H,W]");
    }
    if (index < 0 || index >= batch.size(0)) {
        throw std::invalid_argument("image_from_batch: index out of range");
    }
    NormalizedImage img;
    img.height = batch.size(2);
    img.width = batch.size(3);
    img.window_min = window_min;
    img.window_max = window_max;
    const std::int64_t n = static_cast<std::int64_t>(img.height) * img.width;
    img.pixels.assign(batch.data() + index * n, batch.data() + (index + 1) * n);
    return img;
}

} // namespace alden
