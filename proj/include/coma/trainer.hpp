#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "coma/config.hpp"
#include "coma/dataset.hpp"
#include "coma/io.hpp"
#include "coma/masking.hpp"
#include "coma/model.hpp"
#include "coma/optim.hpp"
#include "coma/tensor.hpp"

namespace coma {

struct StepMetrics {
    std::uint64_t step{0};
    double loss{0};
    double loss_adaptive{0};    // contribution of adaptive-removed positions
    double loss_evaluation{0};  // contribution of evaluation-removed positions
    double lr{0};
    double seconds{0};
};

// Dual-branch CoMA training loop. The adaptive model receives gradients and
// optimizer updates; the evaluation model is frozen and overwritten with the
// adaptive parameters of the previous step (parameter sharing, not EMA).
template <typename T>
class Trainer {
public:
    explicit Trainer(const RunConfig& cfg)
        : cfg_(cfg),
          adaptive_(cfg.model, cfg.seed),
          evaluation_(cfg.model, cfg.seed),
          opt_(adaptive_.params(),
               AdamWConfig{cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay}) {
        cfg_.validate();
    }

    const RunConfig& config() const { return cfg_; }
    DyViT<T>& adaptive() { return adaptive_; }
    DyViT<T>& evaluation() { return evaluation_; }
    AdamW<T>& optimizer() { return opt_; }
    std::uint64_t step() const { return step_; }

    double lr_at(std::uint64_t t) const {
        if (cfg_.lr_decay_start == 0 || t <= cfg_.lr_decay_start) return cfg_.lr;
        const double span =
            static_cast<double>(cfg_.steps > cfg_.lr_decay_start ? cfg_.steps - cfg_.lr_decay_start
                                                                 : 1);
        const double done = static_cast<double>(t - cfg_.lr_decay_start);
        return cfg_.lr * std::max(0.0, 1.0 - done / span);
    }

    // full parameter copy theta_E <- theta_A; idempotent, no blending
    void sync_evaluation() {
        auto& src = adaptive_.params().entries();
        auto& dst = evaluation_.params().entries();
        if (src.size() != dst.size()) throw internal_error("sync: registry size mismatch");
        for (std::size_t i = 0; i < src.size(); ++i) {
            if (src[i].name != dst[i].name) throw internal_error("sync: registry order mismatch");
            dst[i].tensor.values() = src[i].tensor.values();
        }
    }

    StepMetrics train_step(const std::vector<Tensor<T>>& batch) {
        const auto t0 = std::chrono::steady_clock::now();
        if (batch.empty()) throw configuration_error("train_step: empty batch");
        if (step_ % cfg_.sync_every == 0) sync_evaluation();  // theta_E(t) = theta_A(t-1)

        const std::size_t n = cfg_.model.n_patches();
        RngStream mask_rng(cfg_.seed, StreamId::mask, step_);

        Tensor<T> total;
        double loss_a = 0.0, loss_e = 0.0;
        std::string last_mask_desc = "(none sampled)";
        double loss_value = 0.0;
        try {
            for (const auto& image : batch) {
                if (image.rank() != 3 || image.dim(1) != cfg_.model.image_size ||
                    image.dim(2) != cfg_.model.image_size)
                    throw configuration_error(
                        "train_step: image does not match config resolution");
                const MaskPair pair = sample_mask_pair(n, cfg_.model.mask_ratio, mask_rng);
                last_mask_desc = mask_desc(pair);

                Tensor<T> img4 = reshape(constant_view(image),
                                         {1, 3, cfg_.model.image_size, cfg_.model.image_size});
                Tensor<T> recon_a = adaptive_.reconstruct(img4, pair.adaptive_mask);
                Tensor<T> recon_e;
                {
                    NoGradGuard no_grad;  // the evaluation branch records nothing
                    recon_e = evaluation_.reconstruct(img4, pair.evaluation_mask);
                }
                Tensor<T> composed =
                    compose_reconstruction_image(recon_a, recon_e, pair, cfg_.model.patch_size);
                Tensor<T> loss = mse_loss(composed, constant_view(image));
                total = total.defined() ? add(total, loss) : loss;
                accumulate_split(recon_a, recon_e, image, pair, loss_a, loss_e);
            }
            total = scale(total, T(1) / static_cast<T>(batch.size()));
            loss_value = static_cast<double>(total.item());
            if (std::isnan(loss_value)) throw numerical_error("loss is NaN");
        } catch (const numerical_error& err) {
            std::ostringstream os;
            os << "NaN loss at step " << (step_ + 1) << " seed " << cfg_.seed << " mask "
               << last_mask_desc << ": " << err.what();
            throw numerical_error(os.str());
        }
        backward(total);
        const double lr = lr_at(step_ + 1);
        opt_.step(adaptive_.params(), lr);
        ++step_;

        StepMetrics m;
        m.step = step_;
        m.loss = loss_value;
        m.loss_adaptive = loss_a / static_cast<double>(batch.size());
        m.loss_evaluation = loss_e / static_cast<double>(batch.size());
        m.lr = lr;
        m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return m;
    }

    // ----------------------------- checkpointing -----------------------------
    // "CMA1", u32 version, u64 step, length-prefixed config text, rng state,
    // then a named tensor table; written atomically (temp file + rename)

    static constexpr std::uint32_t kCheckpointVersion = 1;

    void save_checkpoint(const std::string& path) {
        namespace fs = std::filesystem;
        const std::string tmp = path + ".tmp";
        {
            std::ofstream os(tmp, std::ios::binary);
            if (!os) throw io_error("cannot open for writing: " + tmp);
            os.write("CMA1", 4);
            io::write_u32(os, kCheckpointVersion);
            io::write_u64(os, step_);
            const std::string cfg_text = serialize_config(cfg_);
            io::write_u32(os, static_cast<std::uint32_t>(cfg_text.size()));
            os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
            io::write_u64(os, cfg_.seed);  // rng state: root seed + reserved word
            io::write_u64(os, 0);

            const auto& entries = adaptive_.params().entries();
            const std::uint32_t per = static_cast<std::uint32_t>(entries.size());
            io::write_u32(os, 4 * per);
            auto write_entry = [&os](const std::string& name, const Tensor<T>& t) {
                io::write_u32(os, static_cast<std::uint32_t>(name.size()));
                os.write(name.data(), static_cast<std::streamsize>(name.size()));
                write_tensor_stream(os, t);
            };
            for (const auto& e : entries) write_entry("A." + e.name, e.tensor);
            for (const auto& e : evaluation_.params().entries())
                write_entry("E." + e.name, e.tensor);
            for (std::size_t i = 0; i < entries.size(); ++i)
                write_entry("m." + entries[i].name,
                            from_values<T>(entries[i].tensor.shape(), opt_.first_moments()[i]));
            for (std::size_t i = 0; i < entries.size(); ++i)
                write_entry("v." + entries[i].name,
                            from_values<T>(entries[i].tensor.shape(), opt_.second_moments()[i]));
            if (!os) throw io_error("failed writing checkpoint " + tmp);
        }
        fs::rename(tmp, path);
    }

    static Trainer load_checkpoint(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw io_error("cannot open checkpoint: " + path);
        char magic[4];
        if (!is.read(magic, 4)) throw io_error("truncated checkpoint header");
        if (std::memcmp(magic, "CMA1", 4) != 0) throw io_error("checkpoint magic mismatch");
        const std::uint32_t version = io::read_u32(is, "version");
        if (version != kCheckpointVersion)
            throw io_error("unsupported checkpoint version " + std::to_string(version));
        const std::uint64_t step = io::read_u64(is, "step");
        const std::uint32_t cfg_len = io::read_u32(is, "config length");
        std::string cfg_text(cfg_len, '\0');
        if (!is.read(cfg_text.data(), cfg_len)) throw io_error("truncated config text");
        const std::uint64_t seed = io::read_u64(is, "rng root seed");
        (void)io::read_u64(is, "rng reserved");

        RunConfig cfg = parse_config(cfg_text);
        if (cfg.seed != seed) throw io_error("checkpoint rng state disagrees with config");
        Trainer trainer(cfg);
        trainer.step_ = step;
        trainer.opt_.set_t(step);

        const std::uint32_t count = io::read_u32(is, "tensor table size");
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint32_t name_len = io::read_u32(is, "tensor name length");
            std::string name(name_len, '\0');
            if (!is.read(name.data(), name_len)) throw io_error("truncated tensor name");
            Tensor<T> t = read_tensor_stream<T>(is);
            trainer.restore_entry(name, t);
        }
        return trainer;
    }

private:
    static Tensor<T> constant_view(const Tensor<T>& image) {
        // training images are plain data tensors; guard against accidentally
        // recording into them
        if (image.requires_grad())
            throw usage_error("train_step: batch images must not require gradients");
        return image;
    }

    static std::string mask_desc(const MaskPair& pair) {
        std::ostringstream os;
        os << "visible[";
        bool first = true;
        for (std::size_t i : pair.adaptive_visible()) {
            if (!first) os << " ";
            os << i;
            first = false;
        }
        os << "]";
        return os.str();
    }

    void accumulate_split(const Tensor<T>& recon_a, const Tensor<T>& recon_e,
                          const Tensor<T>& image, const MaskPair& pair, double& loss_a,
                          double& loss_e) const {
        const std::size_t px = cfg_.model.image_size;
        const std::size_t grid = cfg_.model.patch_grid_side();
        const auto a_removed =
            expand_mask_spatial(pair.evaluation_mask, grid, cfg_.model.patch_size);
        const double norm = static_cast<double>(3 * px * px);
        double sa = 0.0, se = 0.0;
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < px * px; ++i) {
                const std::size_t idx = c * px * px + i;
                const double da = static_cast<double>(recon_a.values()[idx]) -
                                  static_cast<double>(image.values()[idx]);
                const double de = static_cast<double>(recon_e.values()[idx]) -
                                  static_cast<double>(image.values()[idx]);
                if (a_removed[i])
                    sa += da * da;
                else
                    se += de * de;
            }
        loss_a += sa / norm;
        loss_e += se / norm;
    }

    void restore_entry(const std::string& name, const Tensor<T>& t) {
        auto assign = [&](std::vector<T>& dst) {
            if (dst.size() != t.numel())
                throw io_error("checkpoint tensor size mismatch for " + name);
            dst = t.values();
        };
        if (name.size() < 3 || name[1] != '.') throw io_error("malformed tensor name " + name);
        const std::string body = name.substr(2);
        auto locate = [&](ParamRegistry<T>& reg) -> std::vector<T>& {
            auto& entries = reg.entries();
            for (std::size_t i = 0; i < entries.size(); ++i)
                if (entries[i].name == body) {
                    moment_index_ = i;
                    return entries[i].tensor.values();
                }
            throw io_error("checkpoint names unknown parameter " + body);
        };
        switch (name[0]) {
            case 'A': assign(locate(adaptive_.params())); break;
            case 'E': assign(locate(evaluation_.params())); break;
            case 'm': {
                locate(adaptive_.params());
                assign(opt_.first_moments()[moment_index_]);
                break;
            }
            case 'v': {
                locate(adaptive_.params());
                assign(opt_.second_moments()[moment_index_]);
                break;
            }
            default: throw io_error("unknown tensor table prefix in " + name);
        }
    }

    RunConfig cfg_;
    DyViT<T> adaptive_;
    DyViT<T> evaluation_;
    AdamW<T> opt_;
    std::uint64_t step_{0};
    std::size_t moment_index_{0};
};

// reads only the header of a checkpoint, enough to pick the dtype before
// instantiating a Trainer<T>
inline RunConfig peek_checkpoint_config(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open checkpoint: " + path);
    char magic[4];
    if (!is.read(magic, 4)) throw io_error("truncated checkpoint header");
    if (std::memcmp(magic, "CMA1", 4) != 0) throw io_error("checkpoint magic mismatch");
    (void)io::read_u32(is, "version");
    (void)io::read_u64(is, "step");
    const std::uint32_t cfg_len = io::read_u32(is, "config length");
    std::string cfg_text(cfg_len, '\0');
    if (!is.read(cfg_text.data(), cfg_len)) throw io_error("truncated config text");
    return parse_config(cfg_text);
}

// deterministic batch selection for step t: uniform indices with replacement
inline std::vector<std::size_t> select_batch(std::size_t n_images, std::size_t batch_size,
                                             std::uint64_t seed, std::uint64_t step) {
    RngStream rng(seed, StreamId::batch_order, step);
    std::vector<std::size_t> idx(batch_size);
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n_images));
    return idx;
}

// append-only metrics CSV: step,loss,loss_adaptive,loss_evaluation,lr,seconds
class MetricsWriter {
public:
    explicit MetricsWriter(const std::string& path) {
        const bool fresh = !std::filesystem::exists(path);
        os_.open(path, std::ios::app);
        if (!os_) throw io_error("cannot open metrics file: " + path);
        if (fresh) os_ << "step,loss,loss_adaptive,loss_evaluation,lr,seconds\n";
    }
    void append(const StepMetrics& m) {
        char line[256];
        std::snprintf(line, sizeof(line), "%llu,%.17g,%.17g,%.17g,%.17g,%.6f\n",
                      static_cast<unsigned long long>(m.step), m.loss, m.loss_adaptive,
                      m.loss_evaluation, m.lr, m.seconds);
        os_ << line;
        os_.flush();
    }

private:
    std::ofstream os_;
};

}  // namespace coma
