#pragma once

#include <cmath>
#include <cstddef>
#include <tuple>
#include <vector>

#include "coma/common.hpp"
#include "coma/layout.hpp"
#include "coma/ops.hpp"
#include "coma/tensor.hpp"

namespace coma {

// Dynamic Multi-Window Self-Attention. Queries over all visible tokens attend
// to window descriptors produced by per-patch strided convolutions, one branch
// per kernel size; branch outputs are summed and projected.

struct WindowOptions {
    bool include_full{true};  // k = p branch
    bool include_unit{false};  // k = 1 branch (duplicates token-to-token attention)
};

// Kernel set {p, p/2, ..., 2} by default; {1} for the degenerate p = 1 case.
inline std::vector<std::size_t> window_set(std::size_t p, WindowOptions opts = {}) {
    if (p == 1) return {1};
    if (!is_power_of_two(p))
        throw configuration_error("window_set: patch grid side must be a power of two");
    std::vector<std::size_t> ks;
    for (std::size_t k = p; k >= 2; k /= 2) {
        if (k == p && !opts.include_full) continue;
        ks.push_back(k);
    }
    if (opts.include_unit) ks.push_back(1);
    if (ks.empty()) throw configuration_error("window_set: empty kernel set");
    return ks;
}

// One strided conv per kernel size, applied to both K and V (Eq. form uses a
// single Conv_k); weights shared across patches, separate per branch and block.
template <typename T>
struct BranchConv {
    std::size_t kernel{0};
    Tensor<T> w;  // (C, C, k, k)
    Tensor<T> b;  // (C)
};

template <typename T>
struct AttentionParams {
    std::size_t heads{1};
    Tensor<T> w_q, w_k, w_v, w_out;        // (C, C), no bias
    std::vector<BranchConv<T>> branches;   // empty for vanilla global attention
};

template <typename T>
std::tuple<Tensor<T>, Tensor<T>, Tensor<T>> qkv_project(const Tensor<T>& x,
                                                        const AttentionParams<T>& params) {
    return {matmul(x, params.w_q), matmul(x, params.w_k), matmul(x, params.w_v)};
}

// scaled dot-product attention per head over a shared key/value set; heads
// concatenated back to C. sqrt(d) uses the per-head dimension.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               std::size_t heads) {
    const std::size_t C = q.dim(1);
    if (C % heads != 0)
        throw configuration_error("multi_head_attention: C not divisible by heads");
    if (k.dim(1) != C || v.dim(1) != C || k.dim(0) != v.dim(0))
        throw configuration_error("multi_head_attention: K/V shape mismatch");
    const std::size_t d = C / heads;
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
    std::vector<Tensor<T>> parts;
    parts.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> qh = slice_cols(q, h * d, (h + 1) * d);
        Tensor<T> kh = slice_cols(k, h * d, (h + 1) * d);
        Tensor<T> vh = slice_cols(v, h * d, (h + 1) * d);
        Tensor<T> probs = softmax(scale(matmul(qh, transpose2d(kh)), inv_sqrt_d));
        parts.push_back(matmul(probs, vh));
    }
    return heads == 1 ? parts[0] : concat_cols(parts);
}

// One DM-MSA branch: K and V are reduced to (p/k)^2 window descriptors per
// patch by the branch conv (stride k, no padding, patch-local); the softmax is
// global across all visible patches' descriptors.
template <typename T>
Tensor<T> branch_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const BranchConv<T>& conv, std::size_t heads, std::size_t n_visible,
                           std::size_t p) {
    if (p % conv.kernel != 0)
        throw configuration_error("branch_attention: kernel does not divide grid side");
    if (q.dim(0) != n_visible * p * p)
        throw configuration_error("branch_attention: token count != v*p^2");
    Tensor<T> kd = patch_grids_to_rows(
        conv2d(rows_to_patch_grids(k, n_visible, p), conv.w, conv.b, conv.kernel, 0));
    Tensor<T> vd = patch_grids_to_rows(
        conv2d(rows_to_patch_grids(v, n_visible, p), conv.w, conv.b, conv.kernel, 0));
    return multi_head_attention(q, kd, vd, heads);
}

// Sum of all branch attentions, then the output projection.
template <typename T>
Tensor<T> dmmsa_forward(const Tensor<T>& x, const AttentionParams<T>& params,
                        std::size_t n_visible, std::size_t p) {
    if (params.branches.empty())
        throw configuration_error("dmmsa_forward: empty window set");
    auto [q, k, v] = qkv_project(x, params);
    Tensor<T> acc;
    for (const auto& branch : params.branches) {
        Tensor<T> out = branch_attention(q, k, v, branch, params.heads, n_visible, p);
        acc = acc.defined() ? add(acc, out) : out;
    }
    return matmul(acc, params.w_out);
}

// vanilla global attention used by the deeper stages and the decoder
template <typename T>
Tensor<T> global_attention(const Tensor<T>& x, const AttentionParams<T>& params) {
    auto [q, k, v] = qkv_project(x, params);
    return matmul(multi_head_attention(q, k, v, params.heads), params.w_out);
}

// ----------------------------- transformer block -----------------------------

// pre-norm block: X' = t + MLP(LN2(t)), t = X + Attn(LN1(X)); MLP is
// Linear(C->4C), GELU, Linear(4C->C)
template <typename T>
struct TransformerBlock {
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    AttentionParams<T> attn;
    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    bool use_dmmsa{false};
    std::size_t grid_p{1};  // tokens-per-patch side, DM-MSA blocks only
};

template <typename T>
inline constexpr T kLayerNormEps = T(1e-6);

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const TransformerBlock<T>& blk,
                        std::size_t n_visible) {
    Tensor<T> normed = layer_norm(x, blk.ln1_g, blk.ln1_b, kLayerNormEps<T>);
    Tensor<T> attn_out = blk.use_dmmsa
                             ? dmmsa_forward(normed, blk.attn, n_visible, blk.grid_p)
                             : global_attention(normed, blk.attn);
    Tensor<T> t = add(x, attn_out);
    Tensor<T> h = layer_norm(t, blk.ln2_g, blk.ln2_b, kLayerNormEps<T>);
    Tensor<T> mlp = linear(gelu(linear(h, blk.mlp_w1, blk.mlp_b1)), blk.mlp_w2, blk.mlp_b2);
    return add(t, mlp);
}

}  // namespace coma
