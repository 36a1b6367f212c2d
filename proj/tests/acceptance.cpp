// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. An optional argument selects a single criterion by number.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "coma/coma.hpp"
#include "oracle_attention.hpp"

using namespace coma;

namespace {

struct Harness {
    int failures = 0;
    int selected = 0;  // 0 = run everything

    template <class Fn>
    void criterion(int number, const std::string& title, Fn&& body) {
        if (selected != 0 && selected != number) return;
        const auto t0 = std::chrono::steady_clock::now();
        std::string detail;
        bool ok = false;
        try {
            detail = body();
            ok = true;
        } catch (const std::exception& e) {
            detail = e.what();
        }
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("%s  criterion %2d  [%6.1fs]  %s%s%s\n", ok ? "PASS" : "FAIL", number,
                    secs, title.c_str(), detail.empty() ? "" : " -- ", detail.c_str());
        std::fflush(stdout);
        if (!ok) ++failures;
    }
};

struct check_failure : std::runtime_error {
    explicit check_failure(const std::string& m) : std::runtime_error(m) {}
};

void expect(bool cond, const std::string& message) {
    if (!cond) throw check_failure(message);
}

std::string fmt(const char* pattern, double a, double b = 0, double c = 0) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), pattern, a, b, c);
    return buf;
}

template <typename T>
std::vector<std::vector<T>> snapshot(const ParamRegistry<T>& reg) {
    std::vector<std::vector<T>> out;
    for (const auto& e : reg.entries()) out.push_back(e.tensor.values());
    return out;
}

// ---------------------------------------------------------------------------

std::string criterion_mask_complementarity() {
    const std::vector<std::size_t> ns{4, 49, 196};
    const std::vector<double> ratios{0.4, 0.5, 0.6, 0.75};
    std::size_t pairs = 0;
    RngStream rng(1001, StreamId::test, 0);
    while (pairs < 10000)
        for (std::size_t n : ns)
            for (double r : ratios) {
                const MaskPair pair = sample_mask_pair(n, r, rng);
                std::size_t visible = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    expect(pair.adaptive_mask[i] + pair.evaluation_mask[i] == 1,
                           "mask sum is not the all-ones vector");
                    visible += pair.adaptive_mask[i];
                }
                expect(visible == visible_count(n, r), "visible count violates the rule");
                ++pairs;
            }
    return fmt("%.0f pairs, element-wise sum always ones", static_cast<double>(pairs));
}

std::string criterion_coverage() {
    const std::size_t n = 196, T = 1600;
    const double ratio = 0.6;
    CoverageStats comp(n);
    for (std::size_t t = 0; t < T; ++t) {
        RngStream rng(2024, StreamId::mask, t);
        coverage_accumulate(comp, sample_mask_pair(n, ratio, rng));
    }
    for (std::size_t i = 0; i < n; ++i)
        expect(comp.union_supervised[i] == T, "union-supervision count != iterations");

    CoverageStats single(n);
    for (std::size_t t = 0; t < T; ++t) {
        RngStream rng(2025, StreamId::mask, t);
        coverage_accumulate_single(single, sample_single_mask(n, ratio, rng));
    }
    const CoverageSummary s = coverage_report(single);
    const double sigma = std::sqrt(static_cast<double>(T) * 0.24);  // ~19.6
    expect(s.union_std >= 0.8 * sigma && s.union_std <= 1.2 * sigma,
           fmt("single-branch union std %.2f outside 20%% of %.2f", s.union_std, sigma));
    return fmt("union == 1600 for all patches; single-branch std %.2f vs %.2f", s.union_std,
               sigma);
}

std::string criterion_gradients() {
    double worst = 0;
    std::string worst_kernel = "none";
    for (const auto& r : gradcheck::kernel_suite(4242, 100)) {
        if (r.max_rel_err > worst) {
            worst = r.max_rel_err;
            worst_kernel = r.kernel;
        }
        expect(r.max_rel_err <= 1e-4, r.kernel + " rel err > 1e-4");
    }
    const auto model = gradcheck::model_check(dyvit_nano(), 4242, 20);
    expect(model.max_rel_err <= 1e-4, "end-to-end rel err > 1e-4");
    return fmt("worst kernel %.2e, end-to-end %.2e", worst, model.max_rel_err) + " (" +
           worst_kernel + ")";
}

std::string criterion_branch_gradient_equivalence() {
    const ModelConfig config = dyvit_nano();
    double worst = 0;
    for (std::uint64_t inst = 0; inst < 10; ++inst) {
        DyViT<double> adaptive(config, 3000 + inst);
        DyViT<double> evaluation(config, 4000 + inst);
        Tensor<double> image = synth_image<double>(5000 + inst, 0, config.image_size);
        Tensor<double> img4 = reshape(image, {1, 3, config.image_size, config.image_size});
        RngStream mask_rng(6000 + inst, StreamId::mask, 0);
        const MaskPair pair =
            sample_mask_pair(config.n_patches(), config.mask_ratio, mask_rng);

        Tensor<double> recon_e;
        {
            NoGradGuard no_grad;
            recon_e = evaluation.reconstruct(img4, pair.evaluation_mask);
        }
        backward(mse_loss(
            compose_reconstruction_image(adaptive.reconstruct(img4, pair.adaptive_mask),
                                         recon_e, pair, config.patch_size),
            image));
        std::vector<std::vector<double>> composite;
        for (auto& e : adaptive.params().entries())
            composite.push_back(e.tensor.grad().empty()
                                    ? std::vector<double>(e.tensor.numel(), 0.0)
                                    : e.tensor.grad());

        const auto removed =
            expand_mask_spatial(pair.evaluation_mask, config.patch_grid_side(),
                                config.patch_size);
        std::vector<double> mv(image.numel());
        const std::size_t hw = config.image_size * config.image_size;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < hw; ++i)
                mv[c * hw + i] = static_cast<double>(removed[i]);
        Tensor<double> mask_const = from_values<double>(image.shape(), std::move(mv));
        Tensor<double> diff =
            mul(sub(adaptive.reconstruct(img4, pair.adaptive_mask), image), mask_const);
        backward(scale(sum_all(mul(diff, diff)), 1.0 / static_cast<double>(image.numel())));

        auto& entries = adaptive.params().entries();
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& g = entries[i].tensor.grad();
            for (std::size_t j = 0; j < g.size(); ++j) {
                worst = std::max(worst, std::fabs(g[j] - composite[i][j]));
                expect(std::fabs(g[j] - composite[i][j]) <= 1e-10,
                       "composite vs masked-only gradient diverges");
            }
        }
    }
    return fmt("10 instances, max |grad diff| %.2e", worst);
}

std::string criterion_dmmsa_oracle() {
    RngStream rng(7777, StreamId::test, 1);
    auto rand_vec = [&rng](std::size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = rng.uniform(-1.0, 1.0);
        return v;
    };
    const std::size_t C = 8;
    double worst = 0;
    for (std::size_t p : {std::size_t{2}, std::size_t{4}, std::size_t{8}})
        for (std::size_t v_cnt : {std::size_t{1}, std::size_t{2}, std::size_t{4}})
            for (std::size_t heads : {std::size_t{1}, std::size_t{2}}) {
                AttentionParams<double> params;
                params.heads = heads;
                params.w_q = from_values<double>({C, C}, rand_vec(C * C));
                params.w_k = from_values<double>({C, C}, rand_vec(C * C));
                params.w_v = from_values<double>({C, C}, rand_vec(C * C));
                params.w_out = from_values<double>({C, C}, rand_vec(C * C));
                for (std::size_t k : window_set(p)) {
                    BranchConv<double> bc;
                    bc.kernel = k;
                    bc.w = from_values<double>({C, C, k, k}, rand_vec(C * C * k * k));
                    bc.b = from_values<double>({C}, rand_vec(C));
                    params.branches.push_back(std::move(bc));
                }
                const std::size_t m = v_cnt * p * p;
                auto x = from_values<double>({m, C}, rand_vec(m * C));
                auto got = dmmsa_forward(x, params, v_cnt, p);

                auto qv = oracle::matmul(x.values(), params.w_q.values(), m, C, C);
                auto kv = oracle::matmul(x.values(), params.w_k.values(), m, C, C);
                auto vv = oracle::matmul(x.values(), params.w_v.values(), m, C, C);
                std::vector<double> acc(m * C, 0.0);
                for (const auto& br : params.branches) {
                    auto one = oracle::branch_attention(qv, kv, vv, v_cnt, p, C, heads,
                                                        br.w.values(), br.b.values(),
                                                        br.kernel);
                    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += one[i];
                }
                auto want = oracle::matmul(acc, params.w_out.values(), m, C, C);
                for (std::size_t i = 0; i < want.size(); ++i) {
                    worst = std::max(worst, std::fabs(got.values()[i] - want[i]));
                    expect(std::fabs(got.values()[i] - want[i]) <= 1e-10,
                           "dmmsa_forward deviates from the brute-force oracle");
                }
            }

    // k=1 identity convs against vanilla multi-head attention
    double worst_vanilla = 0;
    for (std::size_t heads : {std::size_t{1}, std::size_t{2}}) {
        const std::size_t v_cnt = 2, p = 2, m = v_cnt * p * p;
        auto q = from_values<double>({m, C}, rand_vec(m * C));
        auto k = from_values<double>({m, C}, rand_vec(m * C));
        auto v = from_values<double>({m, C}, rand_vec(m * C));
        std::vector<double> eye(C * C * 1 * 1, 0.0);
        for (std::size_t i = 0; i < C; ++i) eye[i * C + i] = 1.0;
        BranchConv<double> bc;
        bc.kernel = 1;
        bc.w = from_values<double>({C, C, 1, 1}, std::move(eye));
        bc.b = zeros<double>({C});
        auto via_branch = branch_attention(q, k, v, bc, heads, v_cnt, p);
        auto vanilla = multi_head_attention(q, k, v, heads);
        for (std::size_t i = 0; i < vanilla.numel(); ++i) {
            worst_vanilla =
                std::max(worst_vanilla, std::fabs(via_branch.values()[i] - vanilla.values()[i]));
            expect(std::fabs(via_branch.values()[i] - vanilla.values()[i]) <= 1e-6,
                   "k=1 identity-conv branch deviates from vanilla attention");
        }
    }
    return fmt("max |oracle diff| %.2e; k=1 vs vanilla %.2e", worst, worst_vanilla);
}

std::string criterion_param_counts() {
    const double s = static_cast<double>(param_count(dyvit_s()));
    const double b = static_cast<double>(param_count(dyvit_b()));
    expect(s >= 29.75e6 && s <= 40.25e6, fmt("DyViT-S count %.2fM outside [29.75M, 40.25M]",
                                             s / 1e6));
    expect(b >= 59.5e6 && b <= 80.5e6, fmt("DyViT-B count %.2fM outside [59.5M, 80.5M]",
                                           b / 1e6));
    const double ratio = b / s;
    expect(ratio >= 1.8 && ratio <= 2.2, fmt("B/S ratio %.2f outside 2.0 +- 0.2", ratio));
    return fmt("S %.2fM, B %.2fM, ratio %.2f", s / 1e6, b / 1e6, ratio);
}

std::string criterion_frozen_evaluation() {
    RunConfig cfg;
    cfg.preset = "dyvit-nano";
    cfg.model = dyvit_nano();
    cfg.seed = 777;
    cfg.steps = 50;
    cfg.batch_size = 2;
    cfg.dtype = "float64";
    Trainer<double> trainer(cfg);
    auto images = synth_images<double>(cfg.seed, 4, 64);

    for (int s = 0; s < 50; ++s) {
        const auto theta_a_before = snapshot(trainer.adaptive().params());
        const auto idx = select_batch(images.size(), cfg.batch_size, cfg.seed, s);
        trainer.train_step({images[idx[0]], images[idx[1]]});
        // sync ran before the forward, the optimizer after: theta_E must be
        // exactly theta_A(t-1) and bit-untouched by the update
        expect(snapshot(trainer.evaluation().params()) == theta_a_before,
               "theta_E != theta_A(t-1) after step " + std::to_string(s + 1));
    }
    trainer.sync_evaluation();
    const auto once = snapshot(trainer.evaluation().params());
    trainer.sync_evaluation();
    expect(snapshot(trainer.evaluation().params()) == once, "sync is not idempotent");
    return "theta_E bit-exact across 50 steps; sync idempotent";
}

std::string criterion_overfit() {
    RunConfig cfg;
    cfg.preset = "dyvit-nano";
    cfg.model = dyvit_nano();
    cfg.seed = 2026;
    cfg.steps = 500;
    cfg.batch_size = 16;
    cfg.dtype = "float32";
    Trainer<float> trainer(cfg);
    const auto images = synth_images<float>(cfg.seed, 16, 64);  // fixed batch

    double first = 0, last = 0;
    for (int s = 0; s < 500; ++s) {
        const StepMetrics m = trainer.train_step(images);
        if (s == 0) first = m.loss;
        last = m.loss;
    }
    expect(last < 0.1 * first,
           fmt("final loss %.5f not below 10%% of first %.5f", last, first));
    return fmt("loss %.4f -> %.4f (%.1f%%)", first, last, 100.0 * last / first);
}

std::string criterion_determinism_persistence() {
    RunConfig cfg;
    cfg.preset = "dyvit-nano";
    cfg.model = dyvit_nano();
    cfg.seed = 99;
    cfg.steps = 5;
    cfg.batch_size = 2;
    cfg.dtype = "float64";
    auto images = synth_images<double>(cfg.seed, 4, 64);
    auto batch_for = [&](std::uint64_t step) {
        const auto idx = select_batch(images.size(), cfg.batch_size, cfg.seed, step);
        return std::vector<Tensor<double>>{images[idx[0]], images[idx[1]]};
    };

    std::vector<double> trace_a, trace_b, trace_c;
    Trainer<double> run_a(cfg);
    for (int s = 0; s < 5; ++s) trace_a.push_back(run_a.train_step(batch_for(s)).loss);
    Trainer<double> run_b(cfg);
    for (int s = 0; s < 5; ++s) trace_b.push_back(run_b.train_step(batch_for(s)).loss);
    expect(trace_a == trace_b, "seeded runs are not bit-identical");

    const std::string ckpt = "acceptance_checkpoint.cma";
    Trainer<double> run_c(cfg);
    for (int s = 0; s < 2; ++s) trace_c.push_back(run_c.train_step(batch_for(s)).loss);
    run_c.save_checkpoint(ckpt);
    Trainer<double> resumed = Trainer<double>::load_checkpoint(ckpt);
    for (int s = 2; s < 5; ++s) trace_c.push_back(resumed.train_step(batch_for(s)).loss);
    expect(trace_a == trace_c, "checkpoint resume diverges from the uninterrupted run");
    expect(snapshot(resumed.adaptive().params()) == snapshot(run_a.adaptive().params()),
           "resumed parameters differ bit-wise");
    std::remove(ckpt.c_str());
    return "5-step traces bit-identical; resume bit-exact";
}

std::string criterion_shape_schedule() {
    const ModelConfig cfg = dyvit_nano();
    expect(cfg.stage_p(0) == 8 && cfg.stage_p(1) == 4 && cfg.stage_p(2) == 2 &&
               cfg.stage_p(3) == 1,
           "per-patch grid sides are not (8,4,2,1)");
    expect(window_set(cfg.stage_p(0), cfg.window) == std::vector<std::size_t>{8, 4, 2},
           "stage-1 window set is not [8,4,2]");
    expect(window_set(cfg.stage_p(1), cfg.window) == std::vector<std::size_t>{4, 2},
           "stage-2 window set is not [4,2]");
    return "grids (8,4,2,1); windows [8,4,2]/[4,2]";
}

}  // namespace

int main(int argc, char** argv) {
    Harness h;
    if (argc > 1) h.selected = std::atoi(argv[1]);

    h.criterion(1, "mask complementarity and visible-count rule",
                criterion_mask_complementarity);
    h.criterion(2, "coverage reproduction (1600-iteration masking frequency)",
                criterion_coverage);
    h.criterion(3, "gradient correctness (kernels + end-to-end)", criterion_gradients);
    h.criterion(4, "branch-gradient equivalence", criterion_branch_gradient_equivalence);
    h.criterion(5, "DM-MSA brute-force oracle equivalence", criterion_dmmsa_oracle);
    h.criterion(6, "parameter-count reconciliation", criterion_param_counts);
    h.criterion(7, "frozen-evaluation contract", criterion_frozen_evaluation);
    h.criterion(8, "overfit smoke test (500 steps)", criterion_overfit);
    h.criterion(9, "determinism and checkpoint persistence",
                criterion_determinism_persistence);
    h.criterion(10, "shape schedule", criterion_shape_schedule);

    if (h.failures > 0) {
        std::printf("%d criterion(s) FAILED\n", h.failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
