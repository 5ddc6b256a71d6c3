#include "alden/phantom.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "alden/rng.hpp"

namespace alden::data {

namespace {

constexpr double kAirHu = -1000.0;

struct Ellipse {
    double cy, cx;       // center
    double ry, rx;       // semi-axes
    double cos_t, sin_t; // rotation
    double plateau;      // tissue HU
    double tex_amp, tex_fy, tex_fx, tex_py, tex_px;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double u = (dx * cos_t + dy * sin_t) / rx;
        const double v = (-dx * sin_t + dy * cos_t) / ry;
        return u * u + v * v <= 1.0;
    }

    double texture(double y, double x) const {
        return tex_amp * std::sin(tex_fy * y + tex_py) * std::sin(tex_fx * x + tex_px);
    }
};

} // namespace

CTSlice make_phantom(int height, int width, int num_structures, std::uint64_t seed) {
    if (height < kMinSliceExtent || width < kMinSliceExtent) {
        throw std::invalid_argument("make_phantom: extents must be at least 16, got " +
                                    std::to_string(height) + "x" + std::to_string(width));
    }
    if (num_structures < 1) {
        throw std::invalid_argument("make_phantom: num_structures must be >= 1");
    }

    Rng rng(derive_seed(seed, 0x70686e746d /* "phntm" */));
    const double ext = static_cast<double>(std::min(height, width));

    std::vector<Ellipse> shapes;
    shapes.reserve(static_cast<size_t>(num_structures));
    for (int k = 0; k < num_structures; ++k) {
        Ellipse e;
        if (k == 0) {
            // First structure acts as the body outline: large, centered,
            // soft tissue. Later structures nest inside or overlap it.
            e.cy = 0.5 * height + rng.uniform(-0.05, 0.05) * height;
            e.cx = 0.5 * width + rng.uniform(-0.05, 0.05) * width;
            e.ry = rng.uniform(0.30, 0.42) * height;
            e.rx = rng.uniform(0.30, 0.42) * width;
        } else {
            e.cy = rng.uniform(0.25, 0.75) * height;
            e.cx = rng.uniform(0.25, 0.75) * width;
            e.ry = rng.uniform(0.08, 0.22) * ext;
            e.rx = rng.uniform(0.08, 0.22) * ext;
        }
        const double theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        e.cos_t = std::cos(theta);
        e.sin_t = std::sin(theta);
        // Alternate tissue classes so any phantom with >= 2 structures has
        // plateaus separated by well over 200 HU.
        if (k % 2 == 0) {
            e.plateau = rng.uniform(0.0, 80.0); // soft tissue
        } else {
            e.plateau = rng.uniform(400.0, 1200.0); // bone
        }
        e.tex_amp = rng.uniform(2.0, 6.0);
        e.tex_fy = rng.uniform(0.15, 0.55);
        e.tex_fx = rng.uniform(0.15, 0.55);
        e.tex_py = rng.uniform(0.0, 6.28);
        e.tex_px = rng.uniform(0.0, 6.28);
        shapes.push_back(e);
    }

    std::vector<double> px(static_cast<size_t>(height) * static_cast<size_t>(width), kAirHu);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            double v = kAirHu;
            bool inside = false;
            for (const Ellipse& e : shapes) {
                if (e.contains(y, x)) {
                    // Later structures paint over earlier ones.
                    v = e.plateau + e.texture(y, x);
                    inside = true;
                }
            }
            if (inside) px[static_cast<size_t>(y) * width + x] = v;
        }
    }
    return CTSlice(height, width, std::move(px));
}

} // namespace alden::data
