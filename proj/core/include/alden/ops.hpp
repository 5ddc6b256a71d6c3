#pragma once

#include <array>
#include <vector>

#include "alden/autodiff.hpp"

namespace alden::nn {

// ---- arithmetic (same-shape elementwise unless noted) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);

/// x[B,C,H,W] + bias[C], broadcast over B,H,W.
Var add_channel_bias(const Var& x, const Var& bias);
/// x[..,D] + bias[D], broadcast over leading dims.
Var add_row_bias(const Var& x, const Var& bias);

// ---- shape ----
Var reshape(const Var& x, std::vector<int> shape);
/// [B,C,H,W] -> [B,H*W,C], row-major token order.
Var tokens_from_map(const Var& x);
/// [B,N,C] -> [B,C,h,w] with N == h*w.
Var map_from_tokens(const Var& x, int h, int w);
/// [B,N,D] -> [B*heads,N,D/heads].
Var split_heads(const Var& x, int heads);
/// [B*heads,N,d] -> [B,N,d*heads].
Var merge_heads(const Var& x, int heads);
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& x, int c0, int c1);
/// [N,C_i] columns side by side -> [N, sum C_i].
Var concat_cols(const std::vector<Var>& xs);
/// [N,C] -> [N*times,C]; row i repeated `times` consecutive rows.
Var repeat_rows(const Var& x, int times);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);

// ---- convolution / resampling ----
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);
Var upsample_nearest2x(const Var& x);
/// Bilinear, half-pixel centers; exact identity when sizes match.
Var resize_bilinear(const Var& x, int out_h, int out_w);

// ---- normalization ----
/// Normalize over the last dim; gamma/beta sized to it.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// x[B,C,H,W], per-(sample,group) statistics, per-channel affine.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);

// ---- activations ----
Var leaky_relu(const Var& x, double slope);
Var gelu(const Var& x);
Var softplus(const Var& x);
Var clamp01(const Var& x);
Var softmax_lastdim(const Var& x);

// ---- reductions / rowwise ----
Var mean_all(const Var& x);
Var sum_all(const Var& x);
Var abs(const Var& x);
/// [N,M] -> [N], numerically stable.
Var logsumexp_rows(const Var& x);
/// [N,D] x [N,D] -> [N].
Var dot_rows(const Var& a, const Var& b);
/// Rows scaled to unit L2 norm; denominator is (||row|| + eps).
Var l2_normalize_rows(const Var& x, double eps = 1e-8);
/// coords are {b, x, y}; yields one C-row per coordinate from x[B,C,H,W].
Var gather_spatial(const Var& x, const std::vector<std::array<int, 3>>& coords);

// ---- token utilities ----
/// Applies W[D,Dout] (+ bias[Dout]) over the last dim of [*,D].
Var linear_lastdim(const Var& x, const Var& w, const Var& bias);
/// Prepends one learned token (broadcast over batch): [B,N,D] -> [B,N+1,D].
Var prepend_token(const Var& tokens, const Var& token);
/// [B,N,D] -> [B,N-1,D], removing the leading token of every sample.
Var drop_first_token(const Var& tokens);
/// x[B,N,D] + pos[N,D], broadcast over batch.
Var add_position(const Var& x, const Var& pos);
/// Per-channel constant affine y = x*scale[c] + shift[c] on [B,C,H,W].
Var channel_affine(const Var& x, const std::vector<double>& scale,
                   const std::vector<double>& shift);

// ---- attention ----
/// Softmax(Q K^T / sqrt(d_k)) V for 2-D token matrices Q[N,dk], K[M,dk], V[M,dv].
Var scaled_dot_attention(const Var& q, const Var& k, const Var& v);
/// Batched form over [B,N,dk] stacks.
Var scaled_dot_attention_batched(const Var& q, const Var& k, const Var& v);

} // namespace alden::nn
