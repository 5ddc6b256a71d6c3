#pragma once

#include <span>
#include <vector>

#include "alden/tensor.hpp"

namespace alden {

// 12-bit CT convention; values are clamped to this range on construction.
constexpr double kHuMin = -1024.0;
constexpr double kHuMax = 3071.0;

// Soft-tissue display window, the default network-input window.
constexpr double kDefaultWindowMin = -160.0;
constexpr double kDefaultWindowMax = 240.0;

constexpr int kMinSliceExtent = 16;

/// A 2-D grid of Hounsfield-unit values; the universal image currency.
class CTSlice {
public:
    CTSlice() = default;
    /// Validates extents (>= 16) and finiteness, clamps values into
    /// [-1024, 3071] HU.
    CTSlice(int height, int width, std::vector<double> pixels);

    int height() const { return height_; }
    int width() const { return width_; }
    std::span<const double> pixels() const { return pixels_; }
    std::span<double> pixels() { return pixels_; }
    double at(int y, int x) const { return pixels_[static_cast<size_t>(y) * width_ + x]; }
    double& at(int y, int x) { return pixels_[static_cast<size_t>(y) * width_ + x]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(pixels_.size()); }

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<double> pixels_;
};

/// Window-normalized image in [0,1]; the network-input domain.
struct NormalizedImage {
    int height = 0;
    int width = 0;
    double window_min = kDefaultWindowMin;
    double window_max = kDefaultWindowMax;
    std::vector<double> pixels;

    double at(int y, int x) const { return pixels[static_cast<size_t>(y) * width + x]; }
};

/// Affine map (v - min) / (max - min), clamped to [0,1].
NormalizedImage normalize_hu(const CTSlice& slice, double window_min = kDefaultWindowMin,
                             double window_max = kDefaultWindowMax);

/// Exact inverse of normalize_hu on the non-clamped range.
CTSlice denormalize(const NormalizedImage& img);

/// Stack images into a [B,1,H,W] tensor. All images must share extents.
Tensor image_batch(std::span<const NormalizedImage> images);
Tensor image_batch(const NormalizedImage& image);

/// Pull one sample out of a [B,1,H,W] tensor.
NormalizedImage image_from_batch(const Tensor& batch, int index, double window_min,
                                 double window_max);

} // namespace alden
