// coma: pre-training, masking statistics, gradient checks, and file tooling
// for the complementary-masked DyViT models.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "coma/coma.hpp"

namespace fs = std::filesystem;
using namespace coma;

namespace {

struct CliOptions {
    std::string config_file;
    std::string preset = "dyvit-nano";
    std::string out_dir = "out";
    std::string data_dir;
    std::string dtype;
    std::string fusion;
    std::uint64_t seed = 42;
    std::size_t steps = 100;
    std::size_t batch = 16;
    std::size_t count = 64;
    double ratio = -1.0;
    double lr = -1.0;
    std::size_t save_every = 0;
};

RunConfig resolve_config(const CliOptions& opt, bool preset_given, bool seed_given,
                         bool steps_given, bool batch_given, bool count_given) {
    RunConfig cfg;
    if (!opt.config_file.empty()) cfg = load_config_file(opt.config_file);
    if (opt.config_file.empty() || preset_given) {
        cfg.preset = opt.preset;
        cfg.model = preset_by_name(opt.preset);
    }
    if (seed_given || opt.config_file.empty()) cfg.seed = opt.seed;
    if (steps_given || opt.config_file.empty()) cfg.steps = opt.steps;
    if (batch_given || opt.config_file.empty()) cfg.batch_size = opt.batch;
    if (count_given || opt.config_file.empty()) cfg.data_count = opt.count;
    if (opt.ratio >= 0.0) cfg.model.mask_ratio = opt.ratio;
    if (opt.lr > 0.0) cfg.lr = opt.lr;
    if (!opt.out_dir.empty()) cfg.out_dir = opt.out_dir;
    if (!opt.data_dir.empty()) cfg.data_dir = opt.data_dir;
    if (!opt.dtype.empty()) cfg.dtype = opt.dtype;
    if (!opt.fusion.empty()) {
        if (opt.fusion == "cascade")
            cfg.model.fusion = FusionMode::cascade;
        else if (opt.fusion == "parallel")
            cfg.model.fusion = FusionMode::parallel;
        else
            throw configuration_error("--fusion must be cascade or parallel");
    }
    cfg.validate();
    return cfg;
}

template <typename T>
int run_pretrain(const RunConfig& cfg, std::size_t save_every) {
    fs::create_directories(cfg.out_dir);
    std::vector<Tensor<T>> images;
    if (!cfg.data_dir.empty())
        images = load_dataset<T>(cfg.data_dir);
    else
        images = synth_images<T>(cfg.seed, cfg.data_count, cfg.model.image_size);

    Trainer<T> trainer(cfg);
    MetricsWriter metrics(cfg.out_dir + "/metrics.csv");
    const std::string ckpt = cfg.out_dir + "/checkpoint.cma";
    while (trainer.step() < cfg.steps) {
        const auto idx =
            select_batch(images.size(), cfg.batch_size, cfg.seed, trainer.step());
        std::vector<Tensor<T>> batch;
        batch.reserve(idx.size());
        for (std::size_t i : idx) batch.push_back(images[i]);
        const StepMetrics m = trainer.train_step(batch);
        metrics.append(m);
        if (m.step % 10 == 0 || m.step == cfg.steps)
            std::printf("step %6llu  loss %.6f  (adaptive %.6f, evaluation %.6f)\n",
                        static_cast<unsigned long long>(m.step), m.loss, m.loss_adaptive,
                        m.loss_evaluation);
        if (save_every > 0 && m.step % save_every == 0) trainer.save_checkpoint(ckpt);
    }
    trainer.save_checkpoint(ckpt);
    std::printf("checkpoint written to %s\n", ckpt.c_str());
    return 0;
}

int cmd_pretrain(const RunConfig& cfg, std::size_t save_every) {
    if (cfg.dtype == "float64") return run_pretrain<double>(cfg, save_every);
    return run_pretrain<float>(cfg, save_every);
}

int cmd_mask_stats(std::size_t n, double ratio, std::size_t iters, std::uint64_t seed,
                   const std::string& out_dir) {
    const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
    if (side * side != n)
        throw configuration_error("mask-stats: --n must be a perfect square for the heatmap");
    fs::create_directories(out_dir);

    CoverageStats comp(n), single(n);
    for (std::size_t t = 0; t < iters; ++t) {
        RngStream rng(seed, StreamId::mask, t);
        coverage_accumulate(comp, sample_mask_pair(n, ratio, rng));
        RngStream rng2(seed + 1, StreamId::mask, t);
        coverage_accumulate_single(single, sample_single_mask(n, ratio, rng2));
    }
    write_coverage_csv(comp, side, out_dir + "/coverage_complementary.csv");
    write_coverage_csv(single, side, out_dir + "/coverage_single.csv");
    write_coverage_pgm(comp.adaptive_masked, side, out_dir + "/adaptive_complementary.pgm");
    write_coverage_pgm(comp.union_supervised, side, out_dir + "/union_complementary.pgm");
    write_coverage_pgm(single.adaptive_masked, side, out_dir + "/adaptive_single.pgm");
    write_coverage_pgm(single.union_supervised, side, out_dir + "/union_single.pgm");

    const CoverageSummary cs = coverage_report(comp);
    const CoverageSummary ss = coverage_report(single);
    std::printf("complementary: adaptive mean %.2f std %.2f | union mean %.2f std %.2f\n",
                cs.adaptive_mean, cs.adaptive_std, cs.union_mean, cs.union_std);
    std::printf("single-branch: adaptive mean %.2f std %.2f | union mean %.2f std %.2f\n",
                ss.adaptive_mean, ss.adaptive_std, ss.union_mean, ss.union_std);
    std::printf("outputs in %s\n", out_dir.c_str());
    return 0;
}

int cmd_gradcheck(const std::string& preset, std::size_t cases, std::size_t samples,
                  std::uint64_t seed) {
    const double tolerance = 1e-4;
    double worst = 0.0;
    std::printf("%-22s %8s %14s\n", "kernel", "cases", "max rel err");
    for (const auto& r : gradcheck::kernel_suite(seed, cases)) {
        std::printf("%-22s %8zu %14.3e%s\n", r.kernel.c_str(), r.cases, r.max_rel_err,
                    r.max_rel_err <= tolerance ? "" : "  FAIL");
        worst = std::max(worst, r.max_rel_err);
    }
    const auto model = gradcheck::model_check(preset_by_name(preset), seed, samples);
    std::printf("%-22s %8zu %14.3e%s\n", ("model:" + preset).c_str(), model.samples,
                model.max_rel_err, model.max_rel_err <= tolerance ? "" : "  FAIL");
    worst = std::max(worst, model.max_rel_err);
    if (worst > tolerance)
        throw numerical_error("gradient check failed: max rel err " + std::to_string(worst));
    std::printf("all gradients within %.1e\n", tolerance);
    return 0;
}

template <typename T>
int run_reconstruct(const std::string& ckpt_path, const std::string& out_dir,
                    std::size_t count) {
    Trainer<T> trainer = Trainer<T>::load_checkpoint(ckpt_path);
    const RunConfig& cfg = trainer.config();
    fs::create_directories(out_dir);
    std::vector<Tensor<T>> images;
    if (!cfg.data_dir.empty())
        images = load_dataset<T>(cfg.data_dir);
    else
        images = synth_images<T>(cfg.seed, std::max(count, cfg.data_count),
                                 cfg.model.image_size);
    count = std::min(count, images.size());

    trainer.sync_evaluation();
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < count; ++i) {
        RngStream rng(cfg.seed, StreamId::mask, 1000000000ULL + i);
        const MaskPair pair =
            sample_mask_pair(cfg.model.n_patches(), cfg.model.mask_ratio, rng);
        auto img4 = reshape(images[i],
                            {1, 3, cfg.model.image_size, cfg.model.image_size});
        auto recon_a = trainer.adaptive().reconstruct(img4, pair.adaptive_mask);
        auto recon_e = trainer.evaluation().reconstruct(img4, pair.evaluation_mask);
        auto composed =
            compose_reconstruction_image(recon_a, recon_e, pair, cfg.model.patch_size);
        char orig_name[32], recon_name[32];
        std::snprintf(orig_name, sizeof(orig_name), "orig_%04zu.cmt", i);
        std::snprintf(recon_name, sizeof(recon_name), "recon_%04zu.cmt", i);
        save_tensor((fs::path(out_dir) / orig_name).string(), images[i]);
        save_tensor((fs::path(out_dir) / recon_name).string(), composed);
        const double err = mse_loss(composed, images[i]).item();
        std::printf("image %zu: reconstruction mse %.6f\n", i, err);
    }
    std::printf("side-by-side tensors in %s\n", out_dir.c_str());
    return 0;
}

int cmd_reconstruct(const std::string& ckpt_path, const std::string& out_dir,
                    std::size_t count) {
    if (peek_checkpoint_config(ckpt_path).dtype == "float64")
        return run_reconstruct<double>(ckpt_path, out_dir, count);
    return run_reconstruct<float>(ckpt_path, out_dir, count);
}

int cmd_params(const std::string& preset) {
    const ModelConfig cfg = preset_by_name(preset);
    const std::size_t count = param_count(cfg);
    std::printf("%s encoder parameters: %zu (%.2f M)\n", preset.c_str(), count,
                static_cast<double>(count) / 1e6);
    return 0;
}

int cmd_bench(std::size_t steps, std::size_t batch, std::uint64_t seed) {
    RunConfig cfg;
    cfg.preset = "dyvit-nano";
    cfg.model = dyvit_nano();
    cfg.seed = seed;
    cfg.steps = steps;
    cfg.batch_size = batch;
    Trainer<float> trainer(cfg);
    auto images = synth_images<float>(seed, batch, cfg.model.image_size);

    double total = 0.0, best = 1e30;
    for (std::size_t s = 0; s < steps; ++s) {
        const StepMetrics m = trainer.train_step(images);
        total += m.seconds;
        best = std::min(best, m.seconds);
    }
    std::printf("nano config, batch %zu: %zu steps, mean %.1f ms/step, best %.1f ms\n", batch,
                steps, 1e3 * total / static_cast<double>(steps), 1e3 * best);
    return 0;
}

int cmd_synth(std::uint64_t seed, std::size_t count, std::size_t size,
              const std::string& out_dir) {
    synth_dataset(seed, count, size, out_dir);
    std::printf("wrote %zu images (3x%zux%zu) and manifest to %s\n", count, size, size,
                out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CoMA pre-training and DyViT tooling"};
    app.require_subcommand(1);
    CliOptions opt;

    auto* pretrain = app.add_subcommand("pretrain", "run the dual-branch training loop");
    pretrain->add_option("--config", opt.config_file, "config file (key = value sections)");
    auto* po_preset = pretrain->add_option("--preset", opt.preset, "dyvit-s|dyvit-b|dyvit-nano");
    auto* po_seed = pretrain->add_option("--seed", opt.seed, "root rng seed");
    auto* po_steps = pretrain->add_option("--steps", opt.steps, "training steps");
    auto* po_batch = pretrain->add_option("--batch", opt.batch, "batch size");
    auto* po_count = pretrain->add_option("--count", opt.count, "synthetic image count");
    pretrain->add_option("--ratio", opt.ratio, "adaptive-branch mask ratio");
    pretrain->add_option("--lr", opt.lr, "learning rate");
    pretrain->add_option("--out", opt.out_dir, "output directory");
    pretrain->add_option("--data", opt.data_dir, "dataset directory (CMT1 + manifest)");
    pretrain->add_option("--dtype", opt.dtype, "float32|float64");
    pretrain->add_option("--fusion", opt.fusion, "cascade|parallel");
    pretrain->add_option("--save-every", opt.save_every, "checkpoint every N steps");

    std::size_t ms_n = 196, ms_iters = 1600;
    double ms_ratio = 0.6;
    std::uint64_t ms_seed = 42;
    std::string ms_out = "out/mask-stats";
    auto* mask_stats = app.add_subcommand("mask-stats", "coverage statistics and heatmaps");
    mask_stats->add_option("--n", ms_n, "patch count (perfect square)");
    mask_stats->add_option("--ratio", ms_ratio, "mask ratio");
    mask_stats->add_option("--iters", ms_iters, "iterations to accumulate");
    mask_stats->add_option("--seed", ms_seed, "root rng seed");
    mask_stats->add_option("--out", ms_out, "output directory");

    std::string gc_preset = "dyvit-nano";
    std::size_t gc_cases = 100, gc_samples = 20;
    std::uint64_t gc_seed = 42;
    auto* gradcheck_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    gradcheck_cmd->add_option("--preset", gc_preset, "model preset for the end-to-end check");
    gradcheck_cmd->add_option("--cases", gc_cases, "randomized cases per kernel");
    gradcheck_cmd->add_option("--samples", gc_samples, "sampled end-to-end parameters");
    gradcheck_cmd->add_option("--seed", gc_seed, "root rng seed");

    std::string rc_ckpt, rc_out = "out/reconstruct";
    std::size_t rc_count = 4;
    auto* reconstruct = app.add_subcommand("reconstruct", "write original/reconstruction pairs");
    reconstruct->add_option("--checkpoint", rc_ckpt, "checkpoint file")->required();
    reconstruct->add_option("--out", rc_out, "output directory");
    reconstruct->add_option("--count", rc_count, "number of images");

    std::string pa_preset = "dyvit-nano";
    auto* params = app.add_subcommand("params", "exact encoder parameter count");
    params->add_option("--preset", pa_preset, "dyvit-s|dyvit-b|dyvit-nano");

    std::size_t be_steps = 10, be_batch = 4;
    std::uint64_t be_seed = 42;
    auto* bench = app.add_subcommand("bench", "per-step wall time on the nano config");
    bench->add_option("--steps", be_steps, "steps to time");
    bench->add_option("--batch", be_batch, "batch size");
    bench->add_option("--seed", be_seed, "root rng seed");

    std::uint64_t sy_seed = 42;
    std::size_t sy_count = 64, sy_size = 64;
    std::string sy_out = "out/data";
    auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
    synth->add_option("--seed", sy_seed, "root rng seed");
    synth->add_option("--count", sy_count, "image count");
    synth->add_option("--size", sy_size, "image side in pixels");
    synth->add_option("--out", sy_out, "output directory");

    try {
        app.parse(argc, argv);
        if (pretrain->parsed()) {
            const RunConfig cfg =
                resolve_config(opt, po_preset->count() > 0, po_seed->count() > 0,
                               po_steps->count() > 0, po_batch->count() > 0,
                               po_count->count() > 0);
            return cmd_pretrain(cfg, opt.save_every);
        }
        if (mask_stats->parsed())
            return cmd_mask_stats(ms_n, ms_ratio, ms_iters, ms_seed, ms_out);
        if (gradcheck_cmd->parsed())
            return cmd_gradcheck(gc_preset, gc_cases, gc_samples, gc_seed);
        if (reconstruct->parsed()) return cmd_reconstruct(rc_ckpt, rc_out, rc_count);
        if (params->parsed()) return cmd_params(pa_preset);
        if (bench->parsed()) return cmd_bench(be_steps, be_batch, be_seed);
        if (synth->parsed()) return cmd_synth(sy_seed, sy_count, sy_size, sy_out);
        return 1;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const configuration_error& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const usage_error& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const numerical_error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
