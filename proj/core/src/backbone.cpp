#include "alden/backbone.hpp"

#include <cmath>

#include "alden/rng.hpp"
#include "alden/serialize.hpp"

namespace alden::nn {

void BackboneSpec::validate() const {
    if (patch_size < 1 || embed_dim < 1 || num_blocks < 1 || input_size < 1 || num_heads < 1) {
        throw std::invalid_argument("BackboneSpec: all extents must be positive");
    }
    if (input_size % patch_size != 0) {
        throw std::invalid_argument("BackboneSpec: input_size must be divisible by patch_size");
    }
    if (embed_dim % num_heads != 0) {
        throw std::invalid_argument("BackboneSpec: embed_dim must be divisible by num_heads");
    }
    int prev = 0;
    for (int b : tap_blocks) {
        if (b <= prev || b > num_blocks) {
            throw std::invalid_argument(
                "BackboneSpec: tap_blocks must be strictly increasing within [1, num_blocks]");
        }
        prev = b;
    }
    if (kind == BackboneKind::ExternalCheckpoint && checkpoint_path.empty()) {
        throw std::invalid_argument("BackboneSpec: external checkpoint requires a path");
    }
}

namespace {

Tensor normal_init(std::vector<int> shape, Rng& rng, double std_dev) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = std_dev * rng.normal();
    return t;
}

} // namespace

VisionBackbone::VisionBackbone(const BackboneSpec& spec) : spec_(spec) {
    spec_.validate();
    const int D = spec_.embed_dim;
    const int P = spec_.patch_size;
    const int N = spec_.grid_size() * spec_.grid_size();
    const int hidden = 4 * D;

    auto add = [&](const std::string& name, Tensor t) {
        // requires_grad stays false: the backbone is frozen by construction.
        params_.emplace_back(name, Var(std::move(t), false));
    };

    if (spec_.kind == BackboneKind::TinyTest) {
        Rng rng(derive_seed(spec_.init_seed, 0x766974 /* "vit" */));
        add("patch.w", normal_init({D, 3, P, P}, rng, 0.02));
        add("patch.b", Tensor({D}));
        add("cls", normal_init({D}, rng, 0.02));
        add("pos", normal_init({N + 1, D}, rng, 0.02));
        for (int b = 0; b < spec_.num_blocks; ++b) {
            const std::string p = "blk" + std::to_string(b) + ".";
            add(p + "ln1.g", Tensor({D}, 1.0));
            add(p + "ln1.b", Tensor({D}));
            add(p + "wq", normal_init({D, D}, rng, 0.02));
            add(p + "bq", Tensor({D}));
            add(p + "wk", normal_init({D, D}, rng, 0.02));
            add(p + "bk", Tensor({D}));
            add(p + "wv", normal_init({D, D}, rng, 0.02));
            add(p + "bv", Tensor({D}));
            add(p + "wo", normal_init({D, D}, rng, 0.02));
            add(p + "bo", Tensor({D}));
            add(p + "ln2.g", Tensor({D}, 1.0));
            add(p + "ln2.b", Tensor({D}));
            add(p + "mlp1.w", normal_init({D, hidden}, rng, 0.02));
            add(p + "mlp1.b", Tensor({hidden}));
            add(p + "mlp2.w", normal_init({hidden, D}, rng, 0.02));
            add(p + "mlp2.b", Tensor({D}));
        }
        return;
    }

    // External weights arrive as a tensor container keyed by the same
    // parameter names the tiny variant uses.
    NamedTensors loaded;
    try {
        loaded = read_tensor_file(spec_.checkpoint_path);
    } catch (const SerializeError& e) {
        throw BackboneLoadError(std::string("backbone checkpoint: ") + e.what());
    }
    for (auto& [name, t] : loaded) add(name, std::move(t));
    // Spot-check the layout before first use.
    const char* required[] = {"patch.w", "patch.b", "cls", "pos"};
    for (const char* r : required) {
        bool found = false;
        for (const auto& [name, v] : params_) found = found || name == r;
        if (!found) {
            throw BackboneLoadError("backbone checkpoint " + spec_.checkpoint_path +
                                    " lacks tensor '" + std::string(r) + "'");
        }
    }
    if (param("patch.w").value().size(0) != D || param("pos").value().size(0) != N + 1) {
        throw BackboneLoadError("backbone checkpoint " + spec_.checkpoint_path +
                                " does not match the spec's embed_dim/grid layout");
    }
    for (int b = 0; b < spec_.num_blocks; ++b) {
        param("blk" + std::to_string(b) + ".wq"); // throws if missing
    }
}

Var VisionBackbone::param(const std::string& name) const {
    for (const auto& [n, v] : params_) {
        if (n == name) return v;
    }
    throw BackboneLoadError("backbone parameter '" + name + "' not found");
}

Var VisionBackbone::prepare_input(const Var& image_batch) const {
    const Tensor& t = image_batch.value();
    if (t.dim() != 4 || t.size(1) != 1) {
        throw std::invalid_argument("prepare_input: want [B,1,H,W]");
    }
    Var three = concat_channels(concat_channels(image_batch, image_batch), image_batch);
    Var resized = resize_bilinear(three, spec_.input_size, spec_.input_size);
    std::vector<double> scale(3), shift(3);
    for (int c = 0; c < 3; ++c) {
        scale[static_cast<size_t>(c)] = 1.0 / spec_.norm_std[static_cast<size_t>(c)];
        shift[static_cast<size_t>(c)] =
            -spec_.norm_mean[static_cast<size_t>(c)] / spec_.norm_std[static_cast<size_t>(c)];
    }
    return channel_affine(resized, scale, shift);
}

std::vector<Var> VisionBackbone::forward_taps(const Var& image_batch) const {
    const int D = spec_.embed_dim;
    const int g = spec_.grid_size();
    const int heads = spec_.num_heads;

    Var x = prepare_input(image_batch);
    Var patches = conv2d(x, param("patch.w"), param("patch.b"), spec_.patch_size, 0); // [B,D,g,g]
    Var tokens = tokens_from_map(patches);                                            // [B,N,D]
    tokens = prepend_token(tokens, param("cls"));
    tokens = add_position(tokens, param("pos"));

    std::vector<Var> taps;
    taps.reserve(spec_.tap_blocks.size());
    for (int b = 0; b < spec_.num_blocks; ++b) {
        const std::string p = "blk" + std::to_string(b) + ".";
        // Pre-LN block: x + MHSA(LN(x)), then x + MLP(LN(x)).
        Var h = layer_norm(tokens, param(p + "ln1.g"), param(p + "ln1.b"));
        Var q = split_heads(linear_lastdim(h, param(p + "wq"), param(p + "bq")), heads);
        Var k = split_heads(linear_lastdim(h, param(p + "wk"), param(p + "bk")), heads);
        Var v = split_heads(linear_lastdim(h, param(p + "wv"), param(p + "bv")), heads);
        Var attn = merge_heads(scaled_dot_attention_batched(q, k, v), heads);
        attn = linear_lastdim(attn, param(p + "wo"), param(p + "bo"));
        tokens = add(tokens, attn);

        Var h2 = layer_norm(tokens, param(p + "ln2.g"), param(p + "ln2.b"));
        Var m = gelu(linear_lastdim(h2, param(p + "mlp1.w"), param(p + "mlp1.b")));
        m = linear_lastdim(m, param(p + "mlp2.w"), param(p + "mlp2.b"));
        tokens = add(tokens, m);

        for (int tap : spec_.tap_blocks) {
            if (tap == b + 1) {
                taps.push_back(map_from_tokens(drop_first_token(tokens), g, g));
            }
        }
    }
    return taps;
}

FeaturePyramid VisionBackbone::extract_hierarchy(const Var& image_batch) const {
    std::vector<Var> taps = forward_taps(image_batch);
    FeaturePyramid pyr;
    pyr.low = {taps[0], LevelTag::Low};
    pyr.mid = {taps[1], LevelTag::Mid};
    pyr.high = {taps[2], LevelTag::High};
    return pyr;
}

Var VisionBackbone::extract_dense(const Var& image_batch) const {
    return forward_taps(image_batch).back();
}

std::uint64_t VisionBackbone::parameter_checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [name, v] : params_) {
        h = fnv1a_bytes(name.data(), name.size(), h);
        h = tensor_checksum(v.value(), h);
    }
    return h;
}

std::vector<std::pair<int, int>> token_coordinates(const BackboneSpec& spec) {
    spec.validate();
    const int g = spec.grid_size();
    std::vector<std::pair<int, int>> coords;
    coords.reserve(static_cast<size_t>(g) * g);
    for (int y = 0; y < g; ++y)
        for (int x = 0; x < g; ++x) coords.emplace_back(x, y);
    return coords;
}

} // namespace alden::nn
