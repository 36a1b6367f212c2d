#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "coma/attention.hpp"
#include "coma/common.hpp"
#include "coma/layout.hpp"
#include "coma/masking.hpp"
#include "coma/ops.hpp"
#include "coma/rng.hpp"
#include "coma/tensor.hpp"

namespace coma {

// ----------------------------- configuration -----------------------------

enum class FusionMode { cascade, parallel };

struct ModelConfig {
    std::array<std::size_t, 4> channels{16, 32, 64, 128};
    std::array<std::size_t, 4> blocks{1, 1, 2, 1};
    std::array<std::size_t, 4> heads{1, 2, 4, 8};
    std::size_t patch_size{32};
    std::size_t image_size{64};
    std::size_t decoder_depth{8};
    std::size_t decoder_width{64};
    std::size_t decoder_heads{8};
    double mask_ratio{0.6};
    WindowOptions window{};
    FusionMode fusion{FusionMode::cascade};

    std::size_t stem_grid() const { return image_size / 4; }
    std::size_t patch_grid_side() const { return image_size / patch_size; }
    std::size_t n_patches() const { return patch_grid_side() * patch_grid_side(); }
    // per-patch token grid side at stage i (0-based): 8, 4, 2, 1 for patch 32
    std::size_t stage_p(std::size_t stage) const { return (patch_size / 4) >> stage; }
    bool stage_uses_dmmsa(std::size_t stage) const { return stage < 2; }

    void validate() const {
        for (std::size_t i = 0; i < 4; ++i) {
            if (channels[i] == 0 || blocks[i] == 0 || heads[i] == 0)
                throw configuration_error("model config: zero channels/blocks/heads");
            if (channels[i] % heads[i] != 0)
                throw configuration_error("model config: channels not divisible by heads");
        }
        if (patch_size % 32 != 0)
            throw configuration_error("model config: patch_size must be a multiple of 32");
        if (patch_size != 32)
            throw configuration_error(
                "model config: the 4-stage schedule with per-patch grids (8,4,2,1) requires "
                "patch_size 32");
        if (image_size % patch_size != 0)
            throw configuration_error("model config: image_size must divide by patch_size");
        if (n_patches() < 2)
            throw configuration_error("model config: need at least 2 patches for masking");
        if (channels[0] % 4 != 0 || channels[3] % 4 != 0)
            throw configuration_error("model config: C1 and C4 must divide by 4 for sincos");
        if (decoder_width % decoder_heads != 0)
            throw configuration_error("model config: decoder width not divisible by heads");
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
            throw configuration_error("model config: mask_ratio must be in (0,1)");
    }
};

inline ModelConfig dyvit_s() {
    ModelConfig c;
    c.channels = {96, 192, 384, 768};
    c.blocks = {1, 2, 11, 2};
    c.heads = {2, 4, 8, 16};
    c.image_size = 224;
    c.decoder_width = 512;
    c.mask_ratio = 0.6;
    return c;
}

inline ModelConfig dyvit_b() {
    ModelConfig c;
    c.channels = {112, 224, 448, 896};
    c.blocks = {2, 3, 16, 3};
    c.heads = {2, 4, 8, 16};
    c.image_size = 224;
    c.decoder_width = 512;
    c.mask_ratio = 0.6;
    return c;
}

inline ModelConfig dyvit_nano() {
    ModelConfig c;
    c.channels = {16, 32, 64, 128};
    c.blocks = {1, 1, 2, 1};
    c.heads = {1, 2, 4, 8};
    c.image_size = 64;
    c.decoder_width = 64;
    c.mask_ratio = 0.5;
    return c;
}

inline ModelConfig preset_by_name(const std::string& name) {
    if (name == "dyvit-s") return dyvit_s();
    if (name == "dyvit-b") return dyvit_b();
    if (name == "dyvit-nano") return dyvit_nano();
    throw configuration_error("unknown preset: " + name);
}

// ----------------------------- sincos embeddings -----------------------------

// fixed 2-D sinusoidal table over an (gh x gw) grid, raster-ordered rows
template <typename T>
Tensor<T> sincos_2d(std::size_t gh, std::size_t gw, std::size_t dim) {
    if (dim % 4 != 0) throw configuration_error("sincos_2d: dim must divide by 4");
    const std::size_t half = dim / 2;
    auto emb_1d = [half](std::vector<T>& row, std::size_t offset, std::size_t pos) {
        const std::size_t quarter = half / 2;
        for (std::size_t j = 0; j < quarter; ++j) {
            const double omega =
                std::exp(-std::log(10000.0) * static_cast<double>(j) /
                         static_cast<double>(quarter));
            row[offset + j] = static_cast<T>(std::sin(static_cast<double>(pos) * omega));
            row[offset + quarter + j] =
                static_cast<T>(std::cos(static_cast<double>(pos) * omega));
        }
    };
    std::vector<T> values(gh * gw * dim);
    std::vector<T> row(dim);
    for (std::size_t r = 0; r < gh; ++r)
        for (std::size_t c = 0; c < gw; ++c) {
            emb_1d(row, 0, r);
            emb_1d(row, half, c);
            std::copy(row.begin(), row.end(), values.begin() + (r * gw + c) * dim);
        }
    return from_values<T>({gh * gw, dim}, std::move(values));
}

// ----------------------------- parameter registry -----------------------------

template <typename T>
struct ParamEntry {
    std::string name;
    Tensor<T> tensor;
    bool decay{true};    // AdamW weight decay applies
    bool encoder{true};  // counted by param_count
};

template <typename T>
class ParamRegistry {
public:
    Tensor<T>& add(std::string name, Tensor<T> t, bool decay, bool encoder) {
        entries_.push_back({std::move(name), std::move(t), decay, encoder});
        return entries_.back().tensor;
    }
    std::vector<ParamEntry<T>>& entries() { return entries_; }
    const std::vector<ParamEntry<T>>& entries() const { return entries_; }
    std::size_t count(bool encoder_only) const {
        std::size_t total = 0;
        for (const auto& e : entries_)
            if (!encoder_only || e.encoder) total += e.tensor.numel();
        return total;
    }
    const ParamEntry<T>* find(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

private:
    std::vector<ParamEntry<T>> entries_;
};

// ----------------------------- stage outputs -----------------------------

template <typename T>
struct StageOutputs {
    std::array<Tensor<T>, 4> x;        // visible-token rows per stage
    std::vector<std::size_t> indices;  // preserved patch ids
    std::size_t n_visible{0};
};

// ----------------------------- DyViT -----------------------------

// 4-stage hierarchical encoder (scale layer, patch masking, DM-MSA stages,
// global-attention stages, positional downsampling) plus the reconstruction
// decoder. One instance per branch; parameters live in the registry.
template <typename T>
class DyViT {
public:
    DyViT(const ModelConfig& config, std::uint64_t root_seed) : cfg_(config) {
        cfg_.validate();
        build(root_seed);
    }
    DyViT(const DyViT&) = delete;
    DyViT& operator=(const DyViT&) = delete;
    DyViT(DyViT&&) = default;

    const ModelConfig& config() const { return cfg_; }
    ParamRegistry<T>& params() { return params_; }
    const ParamRegistry<T>& params() const { return params_; }

    // conv stem (7x7, stride 4, pad 3) then fixed sincos positions; returns
    // token rows in raster order over the (g x g) grid. The pad-3 is applied
    // only on the top/left edge: symmetric padding leaves H+6-7 indivisible
    // by the stride for any H divisible by 4, and the trailing 3 padded
    // columns are exactly the ones floor-division stems discard.
    Tensor<T> scale_embed(const Tensor<T>& image) const {
        if (image.rank() != 4 || image.dim(0) != 1 || image.dim(1) != 3)
            throw configuration_error("scale_embed: expected (1,3,H,W)");
        if (image.dim(2) % 4 != 0 || image.dim(3) % 4 != 0)
            throw configuration_error("scale_embed: extents must divide by 4");
        Tensor<T> padded = pad2d(image, 3, 3, 0, 0);
        Tensor<T> fmap = conv2d(padded, stem_w_, stem_b_, 4, 0);
        return add(chw_to_rows(fmap), stem_pos_);
    }

    // per-patch 2x2 max pooling then the channel projection C_i -> C_{i+1}
    Tensor<T> stage_downsample(const Tensor<T>& tokens, std::size_t stage,
                               std::size_t n_visible) const {
        const std::size_t p = cfg_.stage_p(stage);
        if (p % 2 != 0) throw configuration_error("stage_downsample: grid side must be even");
        Tensor<T> grids = rows_to_patch_grids(tokens, n_visible, p);
        Tensor<T> pooled = patch_grids_to_rows(maxpool2d(grids));
        return linear(pooled, ds_w_[stage], ds_b_[stage]);
    }

    // stem + positions + patch-level masking, the stage-1 visible token set
    TokenSet<T> tokenize(const Tensor<T>& image, const std::vector<std::uint8_t>& visible) const {
        if (visible.size() != cfg_.n_patches())
            throw configuration_error("encode: mask length != patch count");
        Tensor<T> rows = scale_embed(image);
        const std::size_t g = cfg_.stem_grid();
        Tensor<T> blocks_rows = raster_to_patch_blocks(rows, g, g, cfg_.stage_p(0));
        return apply_mask(blocks_rows, visible, cfg_.stage_p(0));
    }

    // the four stages; no positional term, so outputs are equivariant to
    // permutations of the visible patch blocks
    StageOutputs<T> run_stages(const TokenSet<T>& ts) const {
        StageOutputs<T> out;
        out.indices = ts.indices;
        out.n_visible = ts.indices.size();
        Tensor<T> x = ts.tokens;
        for (std::size_t stage = 0; stage < 4; ++stage) {
            for (std::size_t b = 0; b < cfg_.blocks[stage]; ++b)
                x = block_forward(x, stage_blocks_[stage][b], out.n_visible);
            out.x[stage] = x;
            if (stage < 3) x = stage_downsample(x, stage, out.n_visible);
        }
        return out;
    }

    StageOutputs<T> encode(const Tensor<T>& image, const std::vector<std::uint8_t>& visible) const {
        return run_stages(tokenize(image, visible));
    }

    // multi-scale fusion to one row per visible patch (v x C4)
    Tensor<T> positional_downsample(const StageOutputs<T>& stages) const {
        const std::size_t v = stages.n_visible;
        if (cfg_.fusion == FusionMode::cascade) {
            // Y_i = Conv_{2,2}(Y_{i-1}) + X_{i+1}, Y_0 = X_1
            Tensor<T> y = stages.x[0];
            for (std::size_t i = 0; i < 3; ++i) {
                const std::size_t p = cfg_.stage_p(i);
                Tensor<T> grids = rows_to_patch_grids(y, v, p);
                Tensor<T> conv = conv2d(grids, pd_w_[i], pd_b_[i], 2, 0);
                y = add(patch_grids_to_rows(conv), stages.x[i + 1]);
            }
            return y;
        }
        // literal stride schedule: X_out = sum_i Conv_{2^(4-i)}(X_i) + X_4
        Tensor<T> y = stages.x[3];
        for (std::size_t i = 0; i < 3; ++i) {
            const std::size_t p = cfg_.stage_p(i);
            Tensor<T> grids = rows_to_patch_grids(stages.x[i], v, p);
            Tensor<T> conv = conv2d(grids, pd_w_[i], pd_b_[i], p, 0);
            y = add(y, patch_grids_to_rows(conv));
        }
        return y;
    }

    // encode -> fuse -> final norm, as a p=1 token set ready for reassembly
    TokenSet<T> encode_fused(const Tensor<T>& image,
                             const std::vector<std::uint8_t>& visible) const {
        StageOutputs<T> stages = encode(image, visible);
        Tensor<T> fused = layer_norm(positional_downsample(stages), enc_norm_g_, enc_norm_b_,
                                     kLayerNormEps<T>);
        TokenSet<T> ts;
        ts.tokens = fused;
        ts.indices = stages.indices;
        ts.p = 1;
        ts.n = cfg_.n_patches();
        return ts;
    }

    // reassembled (n x C4) sequence -> decoder blocks -> per-patch pixels
    Tensor<T> decode(const Tensor<T>& full_sequence) const {
        if (full_sequence.rank() != 2 || full_sequence.dim(0) != cfg_.n_patches() ||
            full_sequence.dim(1) != cfg_.channels[3])
            throw configuration_error("decode: expected (n, C4) sequence");
        Tensor<T> h = linear(full_sequence, dec_embed_w_, dec_embed_b_);
        for (const auto& blk : decoder_blocks_) h = block_forward(h, blk, 0);
        h = layer_norm(h, dec_norm_g_, dec_norm_b_, kLayerNormEps<T>);
        h = linear(h, head_w_, head_b_);
        return unpatchify(h, cfg_.patch_grid_side(), cfg_.patch_size);
    }

    // one branch end to end: image + visible set -> full reconstruction
    Tensor<T> reconstruct(const Tensor<T>& image,
                          const std::vector<std::uint8_t>& visible) const {
        TokenSet<T> ts = encode_fused(image, visible);
        Tensor<T> seq = reassemble(ts, mask_token_, dec_pos_);
        return decode(seq);
    }

    const Tensor<T>& mask_token() const { return mask_token_; }
    const Tensor<T>& decoder_pos() const { return dec_pos_; }

private:
    void build(std::uint64_t root_seed) {
        std::size_t index = 0;
        auto init_weight = [&](std::vector<std::size_t> shape) {
            RngStream rng(root_seed, StreamId::weight_init, index);
            const std::size_t n = shape_numel(shape);
            std::vector<T> v(n);
            for (auto& x : v) x = static_cast<T>(rng.truncated_normal(0.02));
            return make_parameter<T>(std::move(shape), std::move(v));
        };
        auto init_const = [&](std::vector<std::size_t> shape, T value) {
            const std::size_t n = shape_numel(shape);
            Tensor<T> t = make_parameter<T>(std::move(shape), std::vector<T>(n, value));
            return t;
        };
        auto add_weight = [&](const std::string& name, std::vector<std::size_t> shape,
                              bool encoder) -> Tensor<T> {
            Tensor<T> t = params_.add(name, init_weight(std::move(shape)), true, encoder);
            ++index;
            return t;
        };
        auto add_bias = [&](const std::string& name, std::size_t n, bool encoder) -> Tensor<T> {
            Tensor<T> t = params_.add(name, init_const({n}, T(0)), true, encoder);
            ++index;
            return t;
        };
        auto add_norm = [&](const std::string& name, std::size_t n, bool encoder,
                            Tensor<T>& g, Tensor<T>& b) {
            g = params_.add(name + ".g", init_const({n}, T(1)), false, encoder);
            ++index;
            b = params_.add(name + ".b", init_const({n}, T(0)), false, encoder);
            ++index;
        };

        const auto& ch = cfg_.channels;

        stem_w_ = add_weight("enc.stem.w", {ch[0], 3, 7, 7}, true);
        stem_b_ = add_bias("enc.stem.b", ch[0], true);
        stem_pos_ = sincos_2d<T>(cfg_.stem_grid(), cfg_.stem_grid(), ch[0]);

        auto build_block = [&](const std::string& prefix, std::size_t C, std::size_t heads,
                               bool dmmsa, std::size_t p, bool encoder) {
            TransformerBlock<T> blk;
            blk.use_dmmsa = dmmsa;
            blk.grid_p = p;
            add_norm(prefix + ".ln1", C, encoder, blk.ln1_g, blk.ln1_b);
            blk.attn.heads = heads;
            blk.attn.w_q = add_weight(prefix + ".wq", {C, C}, encoder);
            blk.attn.w_k = add_weight(prefix + ".wk", {C, C}, encoder);
            blk.attn.w_v = add_weight(prefix + ".wv", {C, C}, encoder);
            blk.attn.w_out = add_weight(prefix + ".wo", {C, C}, encoder);
            if (dmmsa) {
                for (std::size_t k : window_set(p, cfg_.window)) {
                    BranchConv<T> bc;
                    bc.kernel = k;
                    const std::string kname = prefix + ".conv" + std::to_string(k);
                    bc.w = add_weight(kname + ".w", {C, C, k, k}, encoder);
                    bc.b = add_bias(kname + ".b", C, encoder);
                    blk.attn.branches.push_back(std::move(bc));
                }
            }
            add_norm(prefix + ".ln2", C, encoder, blk.ln2_g, blk.ln2_b);
            blk.mlp_w1 = add_weight(prefix + ".mlp.w1", {C, 4 * C}, encoder);
            blk.mlp_b1 = add_bias(prefix + ".mlp.b1", 4 * C, encoder);
            blk.mlp_w2 = add_weight(prefix + ".mlp.w2", {4 * C, C}, encoder);
            blk.mlp_b2 = add_bias(prefix + ".mlp.b2", C, encoder);
            return blk;
        };

        for (std::size_t s = 0; s < 4; ++s) {
            for (std::size_t b = 0; b < cfg_.blocks[s]; ++b) {
                const std::string prefix =
                    "enc.s" + std::to_string(s + 1) + ".b" + std::to_string(b);
                stage_blocks_[s].push_back(build_block(prefix, ch[s], cfg_.heads[s],
                                                       cfg_.stage_uses_dmmsa(s),
                                                       cfg_.stage_p(s), true));
            }
            if (s < 3) {
                const std::string prefix = "enc.ds" + std::to_string(s + 1);
                ds_w_[s] = add_weight(prefix + ".w", {ch[s], ch[s + 1]}, true);
                ds_b_[s] = add_bias(prefix + ".b", ch[s + 1], true);
            }
        }

        for (std::size_t i = 0; i < 3; ++i) {
            const std::string prefix = "enc.pd" + std::to_string(i + 1);
            if (cfg_.fusion == FusionMode::cascade) {
                pd_w_[i] = add_weight(prefix + ".w", {ch[i + 1], ch[i], 2, 2}, true);
                pd_b_[i] = add_bias(prefix + ".b", ch[i + 1], true);
            } else {
                const std::size_t k = cfg_.stage_p(i);
                pd_w_[i] = add_weight(prefix + ".w", {ch[3], ch[i], k, k}, true);
                pd_b_[i] = add_bias(prefix + ".b", ch[3], true);
            }
        }
        add_norm("enc.norm", ch[3], true, enc_norm_g_, enc_norm_b_);

        // decoder side (excluded from the transferred-encoder count)
        {
            RngStream rng(root_seed, StreamId::weight_init, index);
            std::vector<T> v(ch[3]);
            for (auto& x : v) x = static_cast<T>(rng.normal(0.0, 0.02));
            mask_token_ = params_.add("dec.mask_token", make_parameter<T>({ch[3]}, std::move(v)),
                                      false, false);
            ++index;
        }
        dec_pos_ = sincos_2d<T>(cfg_.patch_grid_side(), cfg_.patch_grid_side(), ch[3]);
        dec_embed_w_ = add_weight("dec.embed.w", {ch[3], cfg_.decoder_width}, false);
        dec_embed_b_ = add_bias("dec.embed.b", cfg_.decoder_width, false);
        for (std::size_t b = 0; b < cfg_.decoder_depth; ++b) {
            const std::string prefix = "dec.b" + std::to_string(b);
            decoder_blocks_.push_back(build_block(prefix, cfg_.decoder_width, cfg_.decoder_heads,
                                                  false, 1, false));
        }
        add_norm("dec.norm", cfg_.decoder_width, false, dec_norm_g_, dec_norm_b_);
        const std::size_t out_dim = 3 * cfg_.patch_size * cfg_.patch_size;
        head_w_ = add_weight("dec.head.w", {cfg_.decoder_width, out_dim}, false);
        head_b_ = add_bias("dec.head.b", out_dim, false);
    }

    ModelConfig cfg_;
    ParamRegistry<T> params_;

    Tensor<T> stem_w_, stem_b_, stem_pos_;
    std::array<std::vector<TransformerBlock<T>>, 4> stage_blocks_;
    std::array<Tensor<T>, 3> ds_w_, ds_b_;
    std::array<Tensor<T>, 3> pd_w_, pd_b_;
    Tensor<T> enc_norm_g_, enc_norm_b_;
    Tensor<T> mask_token_, dec_pos_;
    Tensor<T> dec_embed_w_, dec_embed_b_;
    std::vector<TransformerBlock<T>> decoder_blocks_;
    Tensor<T> dec_norm_g_, dec_norm_b_;
    Tensor<T> head_w_, head_b_;
};

// exact encoder parameter count from the configuration alone (the decoder is
// excluded, matching the transferred-encoder convention)
inline std::size_t param_count(const ModelConfig& cfg) {
    cfg.validate();
    const auto& ch = cfg.channels;
    std::size_t total = 3 * ch[0] * 7 * 7 + ch[0];  // stem
    for (std::size_t s = 0; s < 4; ++s) {
        const std::size_t C = ch[s];
        std::size_t block = 4 * C;           // two layer norms
        block += 4 * C * C;                  // q, k, v, out projections
        if (cfg.stage_uses_dmmsa(s))
            for (std::size_t k : window_set(cfg.stage_p(s), cfg.window))
                block += C * C * k * k + C;  // shared K/V branch conv
        block += C * 4 * C + 4 * C + 4 * C * C + C;  // MLP
        total += cfg.blocks[s] * block;
        if (s < 3) total += ch[s] * ch[s + 1] + ch[s + 1];  // downsample projection
    }
    for (std::size_t i = 0; i < 3; ++i) {
        if (cfg.fusion == FusionMode::cascade)
            total += ch[i + 1] * ch[i] * 4 + ch[i + 1];
        else {
            const std::size_t k = cfg.stage_p(i);
            total += ch[3] * ch[i] * k * k + ch[3];
        }
    }
    total += 2 * ch[3];  // final norm
    return total;
}

}  // namespace coma
