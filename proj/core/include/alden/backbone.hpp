#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "alden/ct_image.hpp"
#include "alden/ops.hpp"

namespace alden::nn {

struct BackboneLoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class BackboneKind { TinyTest, ExternalCheckpoint };

/// Frozen vision-transformer feature extractor. The tiny-test variant is a
/// 12-block transformer with fixed-seed parameters so the full test suite
/// never needs a downloaded checkpoint; external ViT weights converted into
/// the tensor-container format load through the same interface.
struct BackboneSpec {
    BackboneKind kind = BackboneKind::TinyTest;
    int patch_size = 8;
    int embed_dim = 32;
    int num_blocks = 12;
    std::array<int, 3> tap_blocks{4, 8, 12};
    int input_size = 64;
    int num_heads = 2;
    std::uint64_t init_seed = 1234;
    std::string checkpoint_path;
    std::array<double, 3> norm_mean{0.5, 0.5, 0.5};
    std::array<double, 3> norm_std{0.5, 0.5, 0.5};

    void validate() const;
    int grid_size() const { return input_size / patch_size; }
};

enum class LevelTag { Low, Mid, High, Dense };

/// [B,C,Hf,Wf] feature grid tapped from the backbone.
struct FeatureMap {
    Var values;
    LevelTag tag = LevelTag::Dense;
};

struct FeaturePyramid {
    FeatureMap low, mid, high;
};

class VisionBackbone {
public:
    explicit VisionBackbone(const BackboneSpec& spec);

    const BackboneSpec& spec() const { return spec_; }

    /// [B,1,H,W] in [0,1] -> 3-channel, resized, standardized backbone input.
    Var prepare_input(const Var& image_batch) const;

    /// Tap features of the configured blocks, class token dropped, reshaped
    /// to (embed_dim, grid, grid). Gradients flow to the input when the
    /// input requires them; parameters never receive gradients.
    FeaturePyramid extract_hierarchy(const Var& image_batch) const;

    /// Final tap block's features (level tag Dense). Equals the pyramid's
    /// high level exactly.
    Var extract_dense(const Var& image_batch) const;

    const std::vector<std::pair<std::string, Var>>& parameters() const { return params_; }
    std::uint64_t parameter_checksum() const;

private:
    std::vector<Var> forward_taps(const Var& image_batch) const;
    Var param(const std::string& name) const;

    BackboneSpec spec_;
    std::vector<std::pair<std::string, Var>> params_;
};

/// Row-major enumeration of all (x, y) token positions on the feature grid.
std::vector<std::pair<int, int>> token_coordinates(const BackboneSpec& spec);

} // namespace alden::nn
