#include "alden/objectives.hpp"

#include <cmath>
#include <string>

#include "alden/rng.hpp"

namespace alden::loss {

using nn::Var;

void ObjectiveConfig::validate() const {
    if (!(tau > 0.0)) throw std::invalid_argument("ObjectiveConfig: tau must be > 0");
    if (K < 1) throw std::invalid_argument("ObjectiveConfig: K must be >= 1");
    if (M < 0) throw std::invalid_argument("ObjectiveConfig: M must be >= 0");
    if (lambda1 < 0.0 || lambda2 < 0.0) {
        throw std::invalid_argument("ObjectiveConfig: loss weights must be >= 0");
    }
}

Var l1_loss(const Var& pred, const Var& target) {
    if (!pred.value().same_shape(target.value())) {
        throw std::invalid_argument("l1_loss: shape mismatch " + pred.value().shape_str() +
                                    " vs " + target.value().shape_str());
    }
    return nn::mean_all(nn::abs(nn::sub(pred, target)));
}

namespace {

void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) {
        throw NumericError(std::string(what) + ": non-finite logits");
    }
}

} // namespace

Var adversarial_d_loss(const Var& real_logits, const Var& fake_logits) {
    require_finite(real_logits.value(), "adversarial_d_loss(real)");
    require_finite(fake_logits.value(), "adversarial_d_loss(fake)");
    // -log sigma(r) = softplus(-r); -log(1 - sigma(f)) = softplus(f).
    Var real_term = nn::mean_all(nn::softplus(nn::neg(real_logits)));
    Var fake_term = nn::mean_all(nn::softplus(fake_logits));
    return nn::add(real_term, fake_term);
}

Var adversarial_g_loss(const Var& fake_logits) {
    require_finite(fake_logits.value(), "adversarial_g_loss");
    return nn::mean_all(nn::softplus(nn::neg(fake_logits)));
}

ContrastiveBatch sample_contrastive_batch(const Var& f_x, const Var& f_yhat, const Var& f_y,
                                          const ObjectiveConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const Tensor& fy = f_y.value();
    if (fy.dim() != 4 || !fy.same_shape(f_x.value()) || !fy.same_shape(f_yhat.value())) {
        throw std::invalid_argument("sample_contrastive_batch: feature stacks must share B,C,H,W");
    }
    const int B = fy.size(0), H = fy.size(2), W = fy.size(3);
    const int cells = H * W;
    if (cfg.K > cells) {
        throw std::invalid_argument("sample_contrastive_batch: K=" + std::to_string(cfg.K) +
                                    " exceeds the " + std::to_string(cells) + "-cell grid");
    }
    if (cfg.M > cells - 1) {
        throw std::invalid_argument("sample_contrastive_batch: M=" + std::to_string(cfg.M) +
                                    " exceeds the grid minus the anchor cell");
    }

    Rng rng(derive_seed(seed, 0x73636c /* "scl" */));
    ContrastiveBatch batch;
    batch.batch = B;
    batch.k = cfg.K;
    batch.m = cfg.M;
    batch.anchors.reserve(static_cast<size_t>(B) * cfg.K);
    batch.neg2_coords.reserve(static_cast<size_t>(B) * cfg.K * cfg.M);

    std::vector<std::array<int, 3>> anchor_idx, neg2_idx;
    for (int b = 0; b < B; ++b) {
        const std::vector<int> cells_for_image = rng.sample_without_replacement(cells, cfg.K);
        for (int cell : cells_for_image) {
            const int ax = cell % W, ay = cell / W;
            batch.anchors.push_back({b, ax, ay});
            anchor_idx.push_back({b, ax, ay});
            if (cfg.M > 0) {
                // Distinct non-anchor cells: draw from a grid with the anchor
                // removed, then shift indices past it back up.
                for (int raw : rng.sample_without_replacement(cells - 1, cfg.M)) {
                    const int cell2 = raw >= cell ? raw + 1 : raw;
                    const int nx = cell2 % W, ny = cell2 / W;
                    batch.neg2_coords.push_back({b, nx, ny});
                    neg2_idx.push_back({b, nx, ny});
                }
            }
        }
    }

    // Reference and noisy-input branches are contrast-only: cut their tapes.
    Var fy_const = f_y.requires_grad() ? f_y.detach() : f_y;
    Var fx_const = f_x.requires_grad() ? f_x.detach() : f_x;

    batch.anchor_feats = nn::gather_spatial(f_yhat, anchor_idx);
    batch.pos_feats = nn::gather_spatial(fy_const, anchor_idx);
    batch.neg1_feats = nn::gather_spatial(fx_const, anchor_idx);
    if (cfg.M > 0) batch.neg2_feats = nn::gather_spatial(fy_const, neg2_idx);
    return batch;
}

namespace {

void check_nonzero_rows(const Tensor& rows, const std::vector<AnchorCoord>& coords,
                        const char* set_name) {
    const int n = rows.size(0), c = rows.size(1);
    for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int d = 0; d < c; ++d) s += rows.at2(r, d) * rows.at2(r, d);
        if (s == 0.0) {
            const AnchorCoord& a = coords[static_cast<size_t>(r)];
            throw NumericError(std::string("scl_loss: zero-norm ") + set_name +
                               " feature at sample " + std::to_string(a.sample) + ", (x=" +
                               std::to_string(a.x) + ", y=" + std::to_string(a.y) + ")");
        }
    }
}

} // namespace

Var scl_loss(const ContrastiveBatch& batch, const ObjectiveConfig& cfg) {
    cfg.validate();
    const int bk = static_cast<int>(batch.anchors.size());
    if (bk == 0) throw std::invalid_argument("scl_loss: empty contrastive batch");
    check_nonzero_rows(batch.anchor_feats.value(), batch.anchors, "anchor");
    check_nonzero_rows(batch.pos_feats.value(), batch.anchors, "positive");
    check_nonzero_rows(batch.neg1_feats.value(), batch.anchors, "same-location negative");
    if (batch.m > 0) {
        check_nonzero_rows(batch.neg2_feats.value(), batch.neg2_coords,
                           "cross-location negative");
    }

    const double inv_tau = 1.0 / cfg.tau;
    Var an = nn::l2_normalize_rows(batch.anchor_feats);
    Var s_pos = nn::dot_rows(an, nn::l2_normalize_rows(batch.pos_feats)); // [BK]
    Var s_neg1 = nn::dot_rows(an, nn::l2_normalize_rows(batch.neg1_feats));

    std::vector<Var> cols;
    cols.push_back(nn::reshape(s_pos, {bk, 1}));
    cols.push_back(nn::reshape(s_neg1, {bk, 1}));
    if (batch.m > 0) {
        Var s_neg2 = nn::dot_rows(nn::repeat_rows(an, batch.m),
                                  nn::l2_normalize_rows(batch.neg2_feats)); // [BK*M]
        cols.push_back(nn::reshape(s_neg2, {bk, batch.m}));
    }
    Var scores = nn::scale(nn::concat_cols(cols), inv_tau); // [BK, M+2]
    Var per_anchor = nn::sub(nn::logsumexp_rows(scores), nn::scale(s_pos, inv_tau));
    return nn::mean_all(per_anchor);
}

double total_loss(double l1, double adv_g, double scl, const ObjectiveConfig& cfg) {
    double total = l1;
    if (cfg.enable_aad) total += cfg.lambda1 * adv_g;
    if (cfg.enable_scl) total += cfg.lambda2 * scl;
    return total;
}

Var total_loss(const Var& l1, const Var& adv_g, const Var& scl, const ObjectiveConfig& cfg) {
    Var total = l1;
    if (cfg.enable_aad) total = nn::add(total, nn::scale(adv_g, cfg.lambda1));
    if (cfg.enable_scl) total = nn::add(total, nn::scale(scl, cfg.lambda2));
    return total;
}

} // namespace alden::loss
