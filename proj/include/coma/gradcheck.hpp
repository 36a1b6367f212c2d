#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "coma/attention.hpp"
#include "coma/dataset.hpp"
#include "coma/masking.hpp"
#include "coma/model.hpp"
#include "coma/ops.hpp"
#include "coma/rng.hpp"
#include "coma/tensor.hpp"

namespace coma {

// Central finite-difference validation of every differentiable kernel and of
// the end-to-end model: gradients must match (f(t+h) - f(t-h)) / 2h with
// h = 1e-5 * max(1, |t|) at float64 within relative error 1e-4.

namespace gradcheck {

inline double rel_err(double analytic, double numeric) {
    const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
    return std::fabs(analytic - numeric) / denom;
}

// scalar loss rebuilt from scratch on every call so perturbations propagate
using LossFn = std::function<Tensor<double>()>;

inline double numeric_grad(const LossFn& loss_fn, Tensor<double>& param, std::size_t index) {
    double& slot = param.values()[index];
    const double saved = slot;
    const double h = 1e-5 * std::max(1.0, std::fabs(saved));
    slot = saved + h;
    const double fp = loss_fn().item();
    slot = saved - h;
    const double fm = loss_fn().item();
    slot = saved;
    return (fp - fm) / (2.0 * h);
}

// worst relative error across every element of every listed parameter
inline double check_params(const LossFn& loss_fn, std::vector<Tensor<double>> params) {
    Tensor<double> loss = loss_fn();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params)
        analytic.push_back(p.grad().empty() ? std::vector<double>(p.numel(), 0.0) : p.grad());
    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        for (std::size_t i = 0; i < params[pi].numel(); ++i) {
            const double num = numeric_grad(loss_fn, params[pi], i);
            worst = std::max(worst, rel_err(analytic[pi][i], num));
        }
    return worst;
}

struct KernelReport {
    std::string kernel;
    std::size_t cases{0};
    double max_rel_err{0};
};

namespace detail {

inline Tensor<double> random_param(RngStream& rng, std::vector<std::size_t> shape, double lo,
                                   double hi) {
    const std::size_t n = shape_numel(shape);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return make_parameter<double>(std::move(shape), std::move(v));
}

// Probes the op with a fixed random weighting so the scalar loss is sensitive
// to every output element. The op must be a pure function of its captured
// parameter tensors (no rng draws inside).
template <class OpFn>
double check_op(RngStream& rng, OpFn&& op, std::vector<Tensor<double>> params) {
    Tensor<double> shape_probe = op();
    std::vector<double> w(shape_probe.numel());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    Tensor<double> weights = from_values<double>(shape_probe.shape(), std::move(w));
    auto loss_fn = [&op, weights]() { return sum_all(mul(op(), weights)); };
    return check_params(loss_fn, std::move(params));
}

// inputs for maxpool need separated window values so the finite-difference
// step cannot cross an argmax boundary
inline Tensor<double> pool_safe_input(RngStream& rng, std::size_t B, std::size_t C,
                                      std::size_t H, std::size_t W) {
    for (;;) {
        Tensor<double> x = random_param(rng, {B, C, H, W}, 0.0, 1.0);
        bool ok = true;
        for (std::size_t bc = 0; bc < B * C && ok; ++bc)
            for (std::size_t oh = 0; oh < H / 2 && ok; ++oh)
                for (std::size_t ow = 0; ow < W / 2 && ok; ++ow) {
                    double top = -1.0, second = -1.0;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const double v =
                                x.values()[bc * H * W + (2 * oh + dy) * W + (2 * ow + dx)];
                            if (v > top) {
                                second = top;
                                top = v;
                            } else if (v > second) {
                                second = v;
                            }
                        }
                    if (top - second < 1e-3) ok = false;
                }
        if (ok) return x;
    }
}

}  // namespace detail

// randomized finite-difference suites, one per differentiable kernel
inline std::vector<KernelReport> kernel_suite(std::uint64_t seed, std::size_t cases) {
    std::vector<KernelReport> reports;
    std::uint64_t kernel_id = 0;

    auto run = [&](const std::string& name,
                   const std::function<double(RngStream&)>& one_case) {
        KernelReport rep{name, cases, 0.0};
        for (std::size_t c = 0; c < cases; ++c) {
            RngStream rng(seed, StreamId::test, kernel_id * 1000003ULL + c);
            rep.max_rel_err = std::max(rep.max_rel_err, one_case(rng));
        }
        ++kernel_id;
        reports.push_back(rep);
    };

    using detail::check_op;
    using detail::random_param;

    run("add", [](RngStream& rng) {
        auto a = random_param(rng, {3, 4}, -2, 2);
        auto b = random_param(rng, {3, 4}, -2, 2);
        return check_op(rng, [&] { return add(a, b); }, {a, b});
    });
    run("sub", [](RngStream& rng) {
        auto a = random_param(rng, {3, 4}, -2, 2);
        auto b = random_param(rng, {3, 4}, -2, 2);
        return check_op(rng, [&] { return sub(a, b); }, {a, b});
    });
    run("mul", [](RngStream& rng) {
        auto a = random_param(rng, {3, 4}, -2, 2);
        auto b = random_param(rng, {3, 4}, -2, 2);
        return check_op(rng, [&] { return mul(a, b); }, {a, b});
    });
    run("scale", [](RngStream& rng) {
        auto a = random_param(rng, {4, 3}, -2, 2);
        const double c = rng.uniform(-2.0, 2.0);
        return check_op(rng, [&] { return scale(a, c); }, {a});
    });
    run("add_row_vector", [](RngStream& rng) {
        auto x = random_param(rng, {3, 5}, -2, 2);
        auto b = random_param(rng, {5}, -2, 2);
        return check_op(rng, [&] { return add_row_vector(x, b); }, {x, b});
    });
    run("broadcast_row", [](RngStream& rng) {
        auto v = random_param(rng, {6}, -2, 2);
        return check_op(rng, [&] { return broadcast_row(v, 4); }, {v});
    });
    run("matmul", [](RngStream& rng) {
        const std::size_t m = 2 + rng.below(3), k = 2 + rng.below(3), n = 2 + rng.below(3);
        auto a = random_param(rng, {m, k}, -1, 1);
        auto b = random_param(rng, {k, n}, -1, 1);
        return check_op(rng, [&] { return matmul(a, b); }, {a, b});
    });
    run("transpose2d", [](RngStream& rng) {
        auto a = random_param(rng, {3, 5}, -2, 2);
        return check_op(rng, [&] { return transpose2d(a); }, {a});
    });
    run("reshape", [](RngStream& rng) {
        auto a = random_param(rng, {3, 4}, -2, 2);
        return check_op(rng, [&] { return reshape(a, {2, 6}); }, {a});
    });
    run("gather_rows", [](RngStream& rng) {
        auto a = random_param(rng, {6, 3}, -2, 2);
        std::vector<std::size_t> idx{5, 1, 3};
        return check_op(rng, [&] { return gather_rows(a, idx); }, {a});
    });
    run("scatter_rows", [](RngStream& rng) {
        auto rows = random_param(rng, {2, 3}, -2, 2);
        auto tmpl = random_param(rng, {5, 3}, -2, 2);
        std::vector<std::size_t> idx{4, 1};
        return check_op(rng, [&] { return scatter_rows(rows, idx, tmpl); }, {rows, tmpl});
    });
    run("slice_concat_cols", [](RngStream& rng) {
        auto a = random_param(rng, {3, 6}, -2, 2);
        return check_op(
            rng,
            [&] {
                std::vector<Tensor<double>> parts{slice_cols(a, 4, 6), slice_cols(a, 0, 4)};
                return concat_cols(parts);
            },
            {a});
    });
    run("softmax", [](RngStream& rng) {
        auto a = random_param(rng, {3, 5}, -3, 3);
        return check_op(rng, [&] { return softmax(a); }, {a});
    });
    run("layer_norm", [](RngStream& rng) {
        auto x = random_param(rng, {3, 6}, -2, 2);
        auto g = random_param(rng, {6}, 0.5, 1.5);
        auto b = random_param(rng, {6}, -0.5, 0.5);
        return check_op(rng, [&] { return layer_norm(x, g, b, 1e-6); }, {x, g, b});
    });
    run("gelu", [](RngStream& rng) {
        auto a = random_param(rng, {4, 4}, -3, 3);
        return check_op(rng, [&] { return gelu(a); }, {a});
    });
    run("conv2d", [](RngStream& rng) {
        const std::size_t k = 1 + rng.below(3);
        const std::size_t s = 1 + rng.below(2);
        const std::size_t q = rng.below(2);
        const std::size_t cin = 1 + rng.below(2), cout = 1 + rng.below(2);
        const std::size_t m = 2 * q + 1 + rng.below(3);  // H = k + s*m - 2q >= 2
        const std::size_t H = k + s * m - 2 * q;
        const std::size_t W = k + s * (2 * q + 1 + rng.below(3)) - 2 * q;
        auto x = random_param(rng, {1 + rng.below(2), cin, H, W}, -1, 1);
        auto w = random_param(rng, {cout, cin, k, k}, -1, 1);
        auto b = random_param(rng, {cout}, -1, 1);
        return check_op(rng, [&] { return conv2d(x, w, b, s, q); }, {x, w, b});
    });
    run("pad2d", [](RngStream& rng) {
        auto x = random_param(rng, {1 + rng.below(2), 1 + rng.below(2), 3, 4}, -1, 1);
        const std::size_t t = rng.below(3), l = rng.below(3), b = rng.below(2),
                          r = rng.below(2);
        return check_op(rng, [&] { return pad2d(x, t, l, b, r); }, {x});
    });
    run("maxpool2d", [](RngStream& rng) {
        auto x = detail::pool_safe_input(rng, 1 + rng.below(2), 1 + rng.below(2), 4, 4);
        return check_op(rng, [&] { return maxpool2d(x); }, {x});
    });
    run("sum_mean", [](RngStream& rng) {
        auto a = random_param(rng, {3, 4}, -2, 2);
        return check_params([&] { return mean_all(a); }, {a});
    });
    run("layout_roundtrip", [](RngStream& rng) {
        auto a = random_param(rng, {2 * 4 * 4, 3}, -2, 2);
        return check_op(
            rng, [&] { return patch_grids_to_rows(rows_to_patch_grids(a, 2, 4)); }, {a});
    });
    run("multi_head_attention", [](RngStream& rng) {
        auto q = random_param(rng, {5, 4}, -1, 1);
        auto k = random_param(rng, {3, 4}, -1, 1);
        auto v = random_param(rng, {3, 4}, -1, 1);
        return check_op(rng, [&] { return multi_head_attention(q, k, v, 2); }, {q, k, v});
    });
    run("mse_loss", [](RngStream& rng) {
        auto a = random_param(rng, {3, 4}, -1, 1);
        auto b = random_param(rng, {3, 4}, -1, 1);
        return check_params([&] { return mse_loss(a, b); }, {a, b});
    });

    return reports;
}

struct ModelCheckResult {
    double max_rel_err{0};
    std::size_t samples{0};
};

// End-to-end: composite CoMA loss on one synthetic image, gradients of
// `samples` randomly chosen parameter elements across the adaptive model.
// The evaluation branch is constant in theta_A, so it is precomputed once.
inline ModelCheckResult model_check(const ModelConfig& config, std::uint64_t seed,
                                    std::size_t samples) {
    DyViT<double> adaptive(config, seed);
    DyViT<double> evaluation(config, seed + 1);  // deliberately different weights
    Tensor<double> image = synth_image<double>(seed, 0, config.image_size);
    Tensor<double> img4 = reshape(image, {1, 3, config.image_size, config.image_size});
    RngStream mask_rng(seed, StreamId::mask, 0);
    const MaskPair pair = sample_mask_pair(config.n_patches(), config.mask_ratio, mask_rng);

    Tensor<double> recon_e;
    {
        NoGradGuard no_grad;
        recon_e = evaluation.reconstruct(img4, pair.evaluation_mask);
    }
    auto loss_fn = [&]() {
        Tensor<double> recon_a = adaptive.reconstruct(img4, pair.adaptive_mask);
        Tensor<double> composed =
            compose_reconstruction_image(recon_a, recon_e, pair, config.patch_size);
        return mse_loss(composed, image);
    };

    Tensor<double> loss = loss_fn();
    backward(loss);

    auto& entries = adaptive.params().entries();
    RngStream pick(seed, StreamId::test, 777);
    ModelCheckResult result;
    result.samples = samples;
    for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t pi = static_cast<std::size_t>(pick.below(entries.size()));
        auto& p = entries[pi].tensor;
        const std::size_t ei = static_cast<std::size_t>(pick.below(p.numel()));
        const double analytic = p.grad().empty() ? 0.0 : p.grad()[ei];
        const double numeric = numeric_grad(loss_fn, p, ei);
        result.max_rel_err = std::max(result.max_rel_err, rel_err(analytic, numeric));
    }
    return result;
}

}  // namespace gradcheck

}  // namespace coma
