#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "alden/backbone.hpp"
#include "alden/phantom.hpp"
#include "alden/rng.hpp"
#include "alden/serialize.hpp"

using namespace alden;
using namespace alden::nn;

namespace {

BackboneSpec tiny_spec() {
    BackboneSpec spec;
    spec.kind = BackboneKind::TinyTest;
    return spec;
}

Var phantom_batch(std::uint64_t seed = 7) {
    CTSlice s = data::make_phantom(64, 64, 4, seed);
    return Var(image_batch(normalize_hu(s)), false);
}

} // namespace

TEST_CASE("BackboneSpec validation") {
    BackboneSpec spec = tiny_spec();
    CHECK_NOTHROW(spec.validate());
    spec.input_size = 60; // not divisible by patch 8
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = tiny_spec();
    spec.tap_blocks = {4, 4, 12};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = tiny_spec();
    spec.tap_blocks = {4, 8, 13};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = tiny_spec();
    spec.kind = BackboneKind::ExternalCheckpoint;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("prepare_input contract") {
    VisionBackbone bb(tiny_spec());
    Var img = phantom_batch();
    Var prepared = bb.prepare_input(img);
    CHECK(prepared.value().shape() == std::vector<int>{1, 3, 64, 64});

    // A constant image replicates identically into all three channels.
    Tensor flat({1, 1, 64, 64}, 0.5);
    Var prep2 = bb.prepare_input(Var(flat));
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            CHECK(prep2.value().at4(0, 0, y, x) == prep2.value().at4(0, 1, y, x));
            CHECK(prep2.value().at4(0, 1, y, x) == prep2.value().at4(0, 2, y, x));
        }
    // Standardization with mean/std 0.5: 0.5 -> 0.
    CHECK(prep2.value().at4(0, 0, 3, 3) == doctest::Approx(0.0));
}

TEST_CASE("extract_hierarchy shape and determinism") {
    VisionBackbone bb(tiny_spec());
    Var img = phantom_batch();
    FeaturePyramid pyr = bb.extract_hierarchy(img);
    const std::vector<int> want{1, 32, 8, 8};
    CHECK(pyr.low.values.value().shape() == want);
    CHECK(pyr.mid.values.value().shape() == want);
    CHECK(pyr.high.values.value().shape() == want);
    CHECK(pyr.low.tag == LevelTag::Low);
    CHECK(pyr.high.tag == LevelTag::High);

    FeaturePyramid pyr2 = bb.extract_hierarchy(img);
    for (std::int64_t i = 0; i < pyr.low.values.value().numel(); ++i) {
        CHECK(pyr.low.values.value()[i] == pyr2.low.values.value()[i]);
        CHECK(pyr.high.values.value()[i] == pyr2.high.values.value()[i]);
    }
    // Levels are genuinely different features.
    bool differs = false;
    for (std::int64_t i = 0; i < pyr.low.values.value().numel(); ++i) {
        differs = differs || pyr.low.values.value()[i] != pyr.mid.values.value()[i];
    }
    CHECK(differs);
}

TEST_CASE("extract_dense equals the high tap exactly") {
    VisionBackbone bb(tiny_spec());
    Var img = phantom_batch(9);
    Var dense = bb.extract_dense(img);
    FeaturePyramid pyr = bb.extract_hierarchy(img);
    REQUIRE(dense.value().numel() == pyr.high.values.value().numel());
    for (std::int64_t i = 0; i < dense.value().numel(); ++i) {
        CHECK(dense.value()[i] == pyr.high.values.value()[i]);
    }
}

TEST_CASE("feature sensitivity to a single-pixel change") {
    VisionBackbone bb(tiny_spec());
    CTSlice s = data::make_phantom(64, 64, 4, 3);
    NormalizedImage a = normalize_hu(s);
    NormalizedImage b = a;
    b.pixels[64 * 32 + 32] = std::min(1.0, b.pixels[64 * 32 + 32] + 0.25);
    Var fa = bb.extract_dense(Var(image_batch(a)));
    Var fb = bb.extract_dense(Var(image_batch(b)));
    double max_abs = 0.0;
    for (std::int64_t i = 0; i < fa.value().numel(); ++i) {
        max_abs = std::max(max_abs, std::fabs(fa.value()[i] - fb.value()[i]));
    }
    CHECK(max_abs > 0.0);
}

TEST_CASE("backbone is frozen: checksum survives forward passes and backward") {
    VisionBackbone bb(tiny_spec());
    const std::uint64_t before = bb.parameter_checksum();
    Var img = phantom_batch(11);
    for (int i = 0; i < 3; ++i) (void)bb.extract_hierarchy(img);

    // Even a backward pass through the backbone leaves parameters untouched
    // and gradient-free.
    Var leaf(img.value(), true);
    Var dense = bb.extract_dense(leaf);
    mean_all(abs(dense)).backward();
    CHECK(bb.parameter_checksum() == before);
    for (const auto& [name, p] : bb.parameters()) {
        CHECK_FALSE(p.requires_grad());
        CHECK(p.grad().empty());
    }
    // ...while the input did receive a gradient.
    bool any = false;
    for (std::int64_t i = 0; i < leaf.grad().numel(); ++i) any = any || leaf.grad()[i] != 0.0;
    CHECK(any);
}

TEST_CASE("input-Jacobian matches central finite differences") {
    // JVP probe: u^T J v compared against u^T (f(x+hv) - f(x-hv)) / 2h.
    BackboneSpec spec = tiny_spec();
    spec.num_blocks = 4; // keep the probe cheap; same op inventory
    spec.tap_blocks = {1, 2, 4};
    VisionBackbone bb(spec);

    CTSlice s = data::make_phantom(64, 64, 3, 5);
    Tensor x0 = image_batch(normalize_hu(s));
    Rng rng(99);
    Tensor u, v;
    {
        Var probe(x0, false);
        Tensor f0 = bb.extract_dense(probe).value();
        u = Tensor(f0.shape());
        for (std::int64_t i = 0; i < u.numel(); ++i) u[i] = rng.normal();
        v = Tensor(x0.shape());
        for (std::int64_t i = 0; i < v.numel(); ++i) v[i] = rng.normal();
    }

    // Analytic: d/dx (u . f(x)) dotted with v.
    Var leaf(x0, true);
    Var f = bb.extract_dense(leaf);
    mean_all(mul(f, Var(u))).backward();
    const double scale_back = static_cast<double>(f.value().numel());
    double analytic = 0.0;
    for (std::int64_t i = 0; i < v.numel(); ++i) analytic += leaf.grad()[i] * v[i];
    analytic *= scale_back; // undo the mean normalization

    const double h = 1e-6;
    auto dot_u_f = [&](const Tensor& x) {
        Tensor fx = bb.extract_dense(Var(x, false)).value();
        double s2 = 0.0;
        for (std::int64_t i = 0; i < fx.numel(); ++i) s2 += fx[i] * u[i];
        return s2;
    };
    Tensor xp = x0, xm = x0;
    for (std::int64_t i = 0; i < x0.numel(); ++i) {
        xp[i] += h * v[i];
        xm[i] -= h * v[i];
    }
    const double numeric = (dot_u_f(xp) - dot_u_f(xm)) / (2.0 * h);
    const double rel = std::fabs(numeric - analytic) /
                       std::max({std::fabs(numeric), std::fabs(analytic), 1e-8});
    CHECK(rel <= 1e-3);
}

TEST_CASE("token_coordinates enumerates the grid row-major") {
    BackboneSpec spec = tiny_spec();
    spec.input_size = 16;
    spec.patch_size = 8; // 2x2 grid
    auto coords = token_coordinates(spec);
    REQUIRE(coords.size() == 4);
    CHECK(coords[0] == std::pair<int, int>{0, 0});
    CHECK(coords[1] == std::pair<int, int>{1, 0});
    CHECK(coords[2] == std::pair<int, int>{0, 1});
    CHECK(coords[3] == std::pair<int, int>{1, 1});

    BackboneSpec full = tiny_spec();
    auto all = token_coordinates(full);
    CHECK(all.size() == static_cast<size_t>(full.grid_size() * full.grid_size()));
    std::set<std::pair<int, int>> uniq(all.begin(), all.end());
    CHECK(uniq.size() == all.size());
}

TEST_CASE("external checkpoint round trip and failure modes") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "alden_test_backbone";
    fs::remove_all(dir);
    fs::create_directories(dir);

    VisionBackbone tiny(tiny_spec());
    NamedTensors weights;
    for (const auto& [name, v] : tiny.parameters()) weights.emplace_back(name, v.value());
    const std::string path = (dir / "vit.tensors").string();
    write_tensor_file(path, weights);

    BackboneSpec ext = tiny_spec();
    ext.kind = BackboneKind::ExternalCheckpoint;
    ext.checkpoint_path = path;
    VisionBackbone loaded(ext);
    CHECK(loaded.parameter_checksum() == tiny.parameter_checksum());

    Var img = phantom_batch(21);
    Tensor a = tiny.extract_dense(img).value();
    Tensor b = loaded.extract_dense(img).value();
    for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

    SUBCASE("missing file") {
        BackboneSpec bad = ext;
        bad.checkpoint_path = (dir / "nope.tensors").string();
        CHECK_THROWS_AS(VisionBackbone{bad}, BackboneLoadError);
    }
    SUBCASE("corrupt file") {
        fs::resize_file(path, fs::file_size(path) / 2);
        CHECK_THROWS_AS(VisionBackbone{ext}, BackboneLoadError);
    }
}
