#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "alden/ops.hpp"

namespace alden::loss {

/// Raised when a loss input is numerically unusable (non-finite logits,
/// zero-norm feature vectors, ...). Messages identify the offending term.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ObjectiveConfig {
    double lambda1 = 0.01; // adversarial weight
    double lambda2 = 0.5;  // contrastive weight
    double tau = 0.1;      // InfoNCE temperature
    int K = 256;           // sampled coordinates per image
    int M = 32;            // cross-location negatives per anchor
    bool enable_aad = true;
    bool enable_scl = true;

    void validate() const;
};

/// Mean absolute difference over all elements.
nn::Var l1_loss(const nn::Var& pred, const nn::Var& target);

/// -mean log sigma(real) - mean log(1 - sigma(fake)), evaluated in the
/// softplus form for stability.
nn::Var adversarial_d_loss(const nn::Var& real_logits, const nn::Var& fake_logits);

/// Non-saturating generator term, -mean log sigma(fake).
nn::Var adversarial_g_loss(const nn::Var& fake_logits);

struct AnchorCoord {
    int sample = 0;
    int x = 0;
    int y = 0;
};

/// Sampled anchors plus the three contrast sets. Anchor features come from
/// the denoised-output features and keep their gradient path; the positive
/// and negative features are detached at sampling time.
struct ContrastiveBatch {
    std::vector<AnchorCoord> anchors;     // B*K, grouped by sample
    std::vector<AnchorCoord> neg2_coords; // B*K*M, M per anchor
    nn::Var anchor_feats;                 // [B*K, C]
    nn::Var pos_feats;                    // [B*K, C]  same-location reference features
    nn::Var neg1_feats;                   // [B*K, C]  same-location noisy-input features
    nn::Var neg2_feats;                   // [B*K*M, C] cross-location reference features
    int batch = 0;
    int k = 0;
    int m = 0;
};

/// Uniform without-replacement anchor sampling per image; per anchor, M
/// distinct non-anchor coordinates from the same image. Deterministic in
/// seed.
ContrastiveBatch sample_contrastive_batch(const nn::Var& f_x, const nn::Var& f_yhat,
                                          const nn::Var& f_y, const ObjectiveConfig& cfg,
                                          std::uint64_t seed);

/// InfoNCE over cosine similarities: for each anchor,
/// -log[ e^{s_pos/tau} / (e^{s_pos/tau} + e^{s_neg1/tau} + sum_m e^{s_neg2/tau}) ],
/// averaged over anchors and computed through a stable log-sum-exp.
nn::Var scl_loss(const ContrastiveBatch& batch, const ObjectiveConfig& cfg);

/// l1 + lambda1*adv_g + lambda2*scl; terms disabled by the ablation flags
/// contribute exactly zero.
double total_loss(double l1, double adv_g, double scl, const ObjectiveConfig& cfg);
nn::Var total_loss(const nn::Var& l1, const nn::Var& adv_g, const nn::Var& scl,
                   const ObjectiveConfig& cfg);

} // namespace alden::loss
