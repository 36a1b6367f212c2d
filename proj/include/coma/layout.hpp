#pragma once

#include <memory>
#include <vector>

#include "coma/ops.hpp"
#include "coma/tensor.hpp"

namespace coma {

// Index-map constructors for the layout moves the model needs. Token rows are
// always per-patch blocks: row = patch_index * p^2 + local_row * p + local_col,
// and channels are the fastest-varying axis of a row matrix.

// (1,C,H,W) or (C,H,W) feature map -> (H*W, C) rows in raster order
template <typename T>
Tensor<T> chw_to_rows(const Tensor<T>& x) {
    std::size_t C, H, W;
    if (x.rank() == 4 && x.dim(0) == 1) {
        C = x.dim(1), H = x.dim(2), W = x.dim(3);
    } else if (x.rank() == 3) {
        C = x.dim(0), H = x.dim(1), W = x.dim(2);
    } else {
        throw configuration_error("chw_to_rows: expected (1,C,H,W) or (C,H,W)");
    }
    auto map = std::make_shared<std::vector<std::size_t>>(H * W * C);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
            for (std::size_t c = 0; c < C; ++c)
                (*map)[(h * W + w) * C + c] = c * H * W + h * W + w;
    return remap<T>("chw_to_rows", x, std::move(map), {H * W, C});
}

// raster rows over a (gh x gw) token grid -> per-patch block rows, where each
// patch is a (pt x pt) tile of tokens and patches are raster-ordered
template <typename T>
Tensor<T> raster_to_patch_blocks(const Tensor<T>& rows, std::size_t gh, std::size_t gw,
                                 std::size_t pt) {
    if (rows.rank() != 2 || rows.dim(0) != gh * gw)
        throw configuration_error("raster_to_patch_blocks: row count != grid size");
    if (gh % pt != 0 || gw % pt != 0)
        throw configuration_error("raster_to_patch_blocks: grid not divisible by patch side");
    const std::size_t C = rows.dim(1);
    const std::size_t patches_w = gw / pt;
    auto map = std::make_shared<std::vector<std::size_t>>(rows.numel());
    std::size_t dst_row = 0;
    for (std::size_t pr = 0; pr < gh / pt; ++pr)
        for (std::size_t pc = 0; pc < patches_w; ++pc)
            for (std::size_t lr = 0; lr < pt; ++lr)
                for (std::size_t lc = 0; lc < pt; ++lc) {
                    const std::size_t src_row = (pr * pt + lr) * gw + (pc * pt + lc);
                    for (std::size_t c = 0; c < C; ++c)
                        (*map)[dst_row * C + c] = src_row * C + c;
                    ++dst_row;
                }
    return remap<T>("raster_to_patch_blocks", rows, std::move(map), {gh * gw, C});
}

// (v*p^2, C) block rows -> (v, C, p, p) per-patch grids for per-patch convs
template <typename T>
Tensor<T> rows_to_patch_grids(const Tensor<T>& rows, std::size_t v, std::size_t p) {
    if (rows.rank() != 2 || rows.dim(0) != v * p * p)
        throw configuration_error("rows_to_patch_grids: row count != v*p^2");
    const std::size_t C = rows.dim(1);
    auto map = std::make_shared<std::vector<std::size_t>>(rows.numel());
    for (std::size_t patch = 0; patch < v; ++patch)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t lr = 0; lr < p; ++lr)
                for (std::size_t lc = 0; lc < p; ++lc)
                    (*map)[((patch * C + c) * p + lr) * p + lc] =
                        (patch * p * p + lr * p + lc) * C + c;
    return remap<T>("rows_to_patch_grids", rows, std::move(map), {v, C, p, p});
}

// (v, C, g, g) per-patch grids -> (v*g^2, C) block rows
template <typename T>
Tensor<T> patch_grids_to_rows(const Tensor<T>& grids) {
    if (grids.rank() != 4 || grids.dim(2) != grids.dim(3))
        throw configuration_error("patch_grids_to_rows: expected (v,C,g,g)");
    const std::size_t v = grids.dim(0), C = grids.dim(1), g = grids.dim(2);
    auto map = std::make_shared<std::vector<std::size_t>>(grids.numel());
    for (std::size_t patch = 0; patch < v; ++patch)
        for (std::size_t lr = 0; lr < g; ++lr)
            for (std::size_t lc = 0; lc < g; ++lc)
                for (std::size_t c = 0; c < C; ++c)
                    (*map)[(patch * g * g + lr * g + lc) * C + c] =
                        ((patch * C + c) * g + lr) * g + lc;
    return remap<T>("patch_grids_to_rows", grids, std::move(map), {v * g * g, C});
}

// per-token pixel predictions (n, 3*patch^2), token vector laid out
// channel-major, back to an image (3, H, W); patches raster-ordered
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& rows, std::size_t grid_side, std::size_t patch_px) {
    if (rows.rank() != 2 || rows.dim(0) != grid_side * grid_side ||
        rows.dim(1) != 3 * patch_px * patch_px)
        throw configuration_error("unpatchify: expected (n, 3*patch^2)");
    const std::size_t HW = grid_side * patch_px;
    const std::size_t row_w = rows.dim(1);
    auto map = std::make_shared<std::vector<std::size_t>>(3 * HW * HW);
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t h = 0; h < HW; ++h)
            for (std::size_t w = 0; w < HW; ++w) {
                const std::size_t tr = h / patch_px, pr = h % patch_px;
                const std::size_t tc = w / patch_px, pc = w % patch_px;
                const std::size_t token = tr * grid_side + tc;
                (*map)[ch * HW * HW + h * HW + w] =
                    token * row_w + (ch * patch_px + pr) * patch_px + pc;
            }
    return remap<T>("unpatchify", rows, std::move(map), {3, HW, HW});
}

}  // namespace coma
