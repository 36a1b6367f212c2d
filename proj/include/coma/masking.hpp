#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "coma/common.hpp"
#include "coma/ops.hpp"
#include "coma/rng.hpp"
#include "coma/tensor.hpp"

namespace coma {

// Complementary patch-mask pair. Entries are exactly 0 or 1; 1 marks a
// preserved (visible) patch. adaptive_mask + evaluation_mask == ones(n) by
// construction: one permutation split at the visible count, never two
// independent samples.
struct MaskPair {
    std::size_t n_patches{0};
    std::vector<std::uint8_t> adaptive_mask;
    std::vector<std::uint8_t> evaluation_mask;
    double mask_ratio{0.0};

    std::vector<std::size_t> adaptive_visible() const { return visible_of(adaptive_mask); }
    std::vector<std::size_t> evaluation_visible() const { return visible_of(evaluation_mask); }

    static std::vector<std::size_t> visible_of(const std::vector<std::uint8_t>& m) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < m.size(); ++i)
            if (m[i]) idx.push_back(i);
        return idx;
    }
};

// visible count rule: clamp(round(n*(1-r)), 1, n-1) keeps both branches non-empty
inline std::size_t visible_count(std::size_t n, double ratio) {
    const long long raw = std::llround(static_cast<double>(n) * (1.0 - ratio));
    const long long hi = static_cast<long long>(n) - 1;
    return static_cast<std::size_t>(std::max(1LL, std::min(raw, hi)));
}

inline MaskPair sample_mask_pair(std::size_t n, double ratio, RngStream& rng) {
    if (n < 2) throw configuration_error("sample_mask_pair: need n >= 2 patches");
    if (!(ratio > 0.0 && ratio < 1.0))
        throw configuration_error("sample_mask_pair: ratio must be in (0,1)");
    const std::size_t v = visible_count(n, ratio);
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    // partial Fisher-Yates: the first v entries are a uniform v-subset
    for (std::size_t i = 0; i < v; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(pool[i], pool[j]);
    }
    MaskPair pair;
    pair.n_patches = n;
    pair.mask_ratio = ratio;
    pair.adaptive_mask.assign(n, 0);
    for (std::size_t i = 0; i < v; ++i) pair.adaptive_mask[pool[i]] = 1;
    pair.evaluation_mask.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) pair.evaluation_mask[i] = 1 - pair.adaptive_mask[i];
    return pair;
}

// single-branch random mask (MAE-style comparison mode); complement unused
inline MaskPair sample_single_mask(std::size_t n, double ratio, RngStream& rng) {
    return sample_mask_pair(n, ratio, rng);
}

// nearest-neighbor expansion: each patch bit repeated p^2 times in its block
inline std::vector<std::uint8_t> expand_mask(const std::vector<std::uint8_t>& mask,
                                             std::size_t p) {
    if (p < 1) throw configuration_error("expand_mask: p must be >= 1");
    std::vector<std::uint8_t> out;
    out.reserve(mask.size() * p * p);
    for (std::uint8_t bit : mask)
        for (std::size_t i = 0; i < p * p; ++i) out.push_back(bit);
    return out;
}

// spatial expansion onto a (grid x grid) patch layout of patch_px-sized tiles
inline std::vector<std::uint8_t> expand_mask_spatial(const std::vector<std::uint8_t>& mask,
                                                     std::size_t grid_side,
                                                     std::size_t patch_px) {
    if (mask.size() != grid_side * grid_side)
        throw configuration_error("expand_mask_spatial: mask size != grid^2");
    const std::size_t hw = grid_side * patch_px;
    std::vector<std::uint8_t> out(hw * hw);
    for (std::size_t h = 0; h < hw; ++h)
        for (std::size_t w = 0; w < hw; ++w)
            out[h * hw + w] = mask[(h / patch_px) * grid_side + (w / patch_px)];
    return out;
}

// Visible token rows plus the index map needed to reassemble the sequence.
template <typename T>
struct TokenSet {
    Tensor<T> tokens;                 // (|indices| * p^2) x C
    std::vector<std::size_t> indices;  // strictly increasing patch ids, all < n
    std::size_t p{1};                  // tokens-per-patch side
    std::size_t n{0};                  // total patches
};

// Hadamard-then-drop realized as a gather of whole patch blocks; row order of
// survivors is preserved.
template <typename T>
TokenSet<T> apply_mask(const Tensor<T>& tokens, const std::vector<std::uint8_t>& mask,
                       std::size_t p) {
    if (tokens.rank() != 2) throw configuration_error("apply_mask: tokens must be (n*p^2, C)");
    const std::size_t n = mask.size();
    if (tokens.dim(0) != n * p * p)
        throw configuration_error("apply_mask: sequence length != n*p^2");
    TokenSet<T> set;
    set.p = p;
    set.n = n;
    std::vector<std::size_t> row_ids;
    for (std::size_t patch = 0; patch < n; ++patch) {
        if (!mask[patch]) continue;
        set.indices.push_back(patch);
        for (std::size_t i = 0; i < p * p; ++i) row_ids.push_back(patch * p * p + i);
    }
    set.tokens = gather_rows(tokens, row_ids);
    return set;
}

// Preserved positions carry the encoder outputs, removed positions the shared
// mask token; positional embeddings are added to all positions afterward.
template <typename T>
Tensor<T> reassemble(const TokenSet<T>& set, const Tensor<T>& mask_token,
                     const Tensor<T>& pos_embed) {
    if (set.p != 1)
        throw configuration_error("reassemble: token set must be at p=1 granularity");
    for (std::size_t i = 1; i < set.indices.size(); ++i)
        if (set.indices[i] <= set.indices[i - 1])
            throw internal_error("reassemble: duplicate or unsorted patch indices");
    if (!set.indices.empty() && set.indices.back() >= set.n)
        throw internal_error("reassemble: patch index out of range");
    Tensor<T> templ = broadcast_row(mask_token, set.n);
    Tensor<T> seq = scatter_rows(set.tokens, set.indices, templ);
    return add(seq, pos_embed);
}

namespace detail {

// rows (n, C): one bit per row
template <typename T>
Tensor<T> row_mask_constant(const std::vector<std::uint8_t>& bits, std::size_t cols) {
    std::vector<T> v(bits.size() * cols);
    for (std::size_t r = 0; r < bits.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] = static_cast<T>(bits[r]);
    return from_values<T>({bits.size(), cols}, std::move(v));
}

// image (3, H, W): one bit per pixel, replicated across channels
template <typename T>
Tensor<T> pixel_mask_constant(const std::vector<std::uint8_t>& pixel_bits, std::size_t H,
                              std::size_t W) {
    if (pixel_bits.size() != H * W)
        throw internal_error("pixel_mask_constant: bit count != H*W");
    std::vector<T> v(3 * H * W);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < H * W; ++i)
            v[c * H * W + i] = static_cast<T>(pixel_bits[i]);
    return from_values<T>({3, H, W}, std::move(v));
}

}  // namespace detail

// X_rec = A o evaluation_mask + E o adaptive_mask: every element comes from
// the branch for which it was REMOVED. Patch-granularity form over (n, C) rows.
template <typename T>
Tensor<T> compose_reconstruction(const Tensor<T>& adaptive_out, const Tensor<T>& evaluation_out,
                                 const MaskPair& pair) {
    detail::require_same_shape("compose_reconstruction", adaptive_out, evaluation_out);
    if (adaptive_out.rank() != 2 || adaptive_out.dim(0) != pair.n_patches)
        throw configuration_error("compose_reconstruction: expected (n, C) rows");
    const std::size_t cols = adaptive_out.dim(1);
    Tensor<T> keep_a = detail::row_mask_constant<T>(pair.evaluation_mask, cols);
    Tensor<T> keep_e = detail::row_mask_constant<T>(pair.adaptive_mask, cols);
    return add(mul(adaptive_out, keep_a), mul(evaluation_out, keep_e));
}

// pixel-granularity form over (3, H, W) reconstructions; masks expanded
// spatially onto the patch grid
template <typename T>
Tensor<T> compose_reconstruction_image(const Tensor<T>& adaptive_out,
                                       const Tensor<T>& evaluation_out, const MaskPair& pair,
                                       std::size_t patch_px) {
    detail::require_same_shape("compose_reconstruction", adaptive_out, evaluation_out);
    if (adaptive_out.rank() != 3 || adaptive_out.dim(0) != 3 ||
        adaptive_out.dim(1) != adaptive_out.dim(2))
        throw configuration_error("compose_reconstruction_image: expected square (3,H,W)");
    const std::size_t H = adaptive_out.dim(1);
    if (H % patch_px != 0) throw configuration_error("compose_reconstruction_image: H % patch");
    const std::size_t grid = H / patch_px;
    if (grid * grid != pair.n_patches)
        throw configuration_error("compose_reconstruction_image: patch grid mismatch");
    Tensor<T> keep_a = detail::pixel_mask_constant<T>(
        expand_mask_spatial(pair.evaluation_mask, grid, patch_px), H, H);
    Tensor<T> keep_e = detail::pixel_mask_constant<T>(
        expand_mask_spatial(pair.adaptive_mask, grid, patch_px), H, H);
    return add(mul(adaptive_out, keep_a), mul(evaluation_out, keep_e));
}

// ----------------------------- coverage statistics -----------------------------

// Per-patch masking-frequency accumulator. adaptive_masked counts iterations
// in which a patch was REMOVED for the adaptive branch (the quantity the
// masking-frequency heatmaps show); union_supervised counts iterations in
// which the patch was removed in at least one branch.
struct CoverageStats {
    std::size_t n_patches{0};
    std::size_t iterations{0};
    std::vector<std::uint64_t> adaptive_masked;
    std::vector<std::uint64_t> union_supervised;

    explicit CoverageStats(std::size_t n = 0)
        : n_patches(n), adaptive_masked(n, 0), union_supervised(n, 0) {}
};

inline void coverage_accumulate(CoverageStats& stats, const MaskPair& pair) {
    if (pair.n_patches != stats.n_patches)
        throw configuration_error("coverage_accumulate: patch count mismatch");
    ++stats.iterations;
    for (std::size_t i = 0; i < stats.n_patches; ++i) {
        const bool removed_adaptive = pair.adaptive_mask[i] == 0;
        const bool removed_evaluation = pair.evaluation_mask[i] == 0;
        if (removed_adaptive) ++stats.adaptive_masked[i];
        if (removed_adaptive || removed_evaluation) ++stats.union_supervised[i];
        if (stats.union_supervised[i] != stats.iterations)
            throw internal_error("coverage_accumulate: complementarity violated");
    }
}

// MAE-style comparison mode: only the adaptive mask exists
inline void coverage_accumulate_single(CoverageStats& stats, const MaskPair& pair) {
    if (pair.n_patches != stats.n_patches)
        throw configuration_error("coverage_accumulate_single: patch count mismatch");
    ++stats.iterations;
    for (std::size_t i = 0; i < stats.n_patches; ++i) {
        if (pair.adaptive_mask[i] == 0) {
            ++stats.adaptive_masked[i];
            ++stats.union_supervised[i];
        }
    }
}

struct CoverageSummary {
    double adaptive_mean{0}, adaptive_std{0};
    double union_mean{0}, union_std{0};
};

inline CoverageSummary coverage_report(const CoverageStats& stats) {
    auto moments = [](const std::vector<std::uint64_t>& counts) {
        const double n = static_cast<double>(counts.size());
        double mean = 0;
        for (auto c : counts) mean += static_cast<double>(c);
        mean /= n;
        double ss = 0;
        for (auto c : counts) {
            const double d = static_cast<double>(c) - mean;
            ss += d * d;
        }
        const double var = counts.size() > 1 ? ss / (n - 1.0) : 0.0;  // sample variance
        return std::pair<double, double>{mean, std::sqrt(var)};
    };
    CoverageSummary s;
    std::tie(s.adaptive_mean, s.adaptive_std) = moments(stats.adaptive_masked);
    std::tie(s.union_mean, s.union_std) = moments(stats.union_supervised);
    return s;
}

// CSV columns: patch_row, patch_col, adaptive_count, union_count
inline void write_coverage_csv(const CoverageStats& stats, std::size_t grid_side,
                               const std::string& path) {
    if (grid_side * grid_side != stats.n_patches)
        throw configuration_error("write_coverage_csv: patch count is not a square grid");
    std::ofstream os(path);
    if (!os) throw io_error("cannot open for writing: " + path);
    os << "patch_row,patch_col,adaptive_count,union_count\n";
    for (std::size_t r = 0; r < grid_side; ++r)
        for (std::size_t c = 0; c < grid_side; ++c)
            os << r << "," << c << "," << stats.adaptive_masked[r * grid_side + c] << ","
               << stats.union_supervised[r * grid_side + c] << "\n";
    if (!os) throw io_error("failed writing " + path);
}

// binary PGM heatmap, counts normalized to [0,255]
inline void write_coverage_pgm(const std::vector<std::uint64_t>& counts, std::size_t grid_side,
                               const std::string& path) {
    if (grid_side * grid_side != counts.size())
        throw configuration_error("write_coverage_pgm: patch count is not a square grid");
    std::uint64_t lo = counts[0], hi = counts[0];
    for (auto c : counts) {
        lo = std::min(lo, c);
        hi = std::max(hi, c);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open for writing: " + path);
    os << "P5\n" << grid_side << " " << grid_side << "\n255\n";
    for (auto c : counts) {
        const double norm = hi > lo ? static_cast<double>(c - lo) / static_cast<double>(hi - lo)
                                    : 0.0;
        const unsigned char px = static_cast<unsigned char>(std::lround(255.0 * norm));
        os.write(reinterpret_cast<const char*>(&px), 1);
    }
    if (!os) throw io_error("failed writing " + path);
}

}  // namespace coma
