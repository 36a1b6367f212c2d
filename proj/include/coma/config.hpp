#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "coma/common.hpp"
#include "coma/model.hpp"

namespace coma {

// Run configuration: flat `key = value` text with bracketed section headers.
// Unknown sections or keys are rejected. serialize() emits every resolved
// field in a fixed order, so save -> load -> save is byte-identical.

struct RunConfig {
    std::string preset{"dyvit-nano"};
    ModelConfig model{dyvit_nano()};
    std::uint64_t seed{42};
    std::size_t steps{100};
    std::size_t batch_size{16};
    double lr{1e-3};
    double beta1{0.9};
    double beta2{0.95};
    double eps{1e-8};
    double weight_decay{0.05};
    std::size_t sync_every{1};
    std::size_t lr_decay_start{0};  // 0 disables the linear decay tail
    std::string dtype{"float32"};
    std::string out_dir{"out"};
    std::string data_dir{};
    std::size_t data_count{64};

    void validate() const {
        model.validate();
        if (batch_size == 0) throw configuration_error("run config: batch_size must be >= 1");
        if (sync_every == 0) throw configuration_error("run config: sync_every must be >= 1");
        if (dtype != "float32" && dtype != "float64")
            throw configuration_error("run config: dtype must be float32 or float64");
        if (!(lr > 0.0)) throw configuration_error("run config: lr must be positive");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
            throw configuration_error("run config: betas must lie in [0,1)");
        if (!(eps > 0.0)) throw configuration_error("run config: eps must be positive");
        if (weight_decay < 0.0)
            throw configuration_error("run config: weight_decay must be >= 0");
        if (data_count == 0) throw configuration_error("run config: data_count must be >= 1");
    }
};

namespace cfgdetail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::string join4(const std::array<std::size_t, 4>& a) {
    std::ostringstream os;
    os << a[0] << "," << a[1] << "," << a[2] << "," << a[3];
    return os.str();
}

inline std::array<std::size_t, 4> parse4(const std::string& s, const std::string& key) {
    std::array<std::size_t, 4> out{};
    std::istringstream is(s);
    std::string tok;
    std::size_t i = 0;
    while (std::getline(is, tok, ',')) {
        if (i >= 4) throw configuration_error("config: " + key + " needs exactly 4 entries");
        out[i++] = static_cast<std::size_t>(std::stoull(trim(tok)));
    }
    if (i != 4) throw configuration_error("config: " + key + " needs exactly 4 entries");
    return out;
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw configuration_error("config: " + key + " must be true/false");
}

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace cfgdetail

inline std::string serialize_config(const RunConfig& c) {
    using cfgdetail::fmt_double;
    std::ostringstream os;
    os << "[model]\n";
    os << "preset = " << c.preset << "\n";
    os << "channels = " << cfgdetail::join4(c.model.channels) << "\n";
    os << "blocks = " << cfgdetail::join4(c.model.blocks) << "\n";
    os << "heads = " << cfgdetail::join4(c.model.heads) << "\n";
    os << "patch_size = " << c.model.patch_size << "\n";
    os << "image_size = " << c.model.image_size << "\n";
    os << "decoder_depth = " << c.model.decoder_depth << "\n";
    os << "decoder_width = " << c.model.decoder_width << "\n";
    os << "decoder_heads = " << c.model.decoder_heads << "\n";
    os << "mask_ratio = " << fmt_double(c.model.mask_ratio) << "\n";
    os << "fusion_mode = " << (c.model.fusion == FusionMode::cascade ? "cascade" : "parallel")
       << "\n";
    os << "window_include_full = " << (c.model.window.include_full ? "true" : "false") << "\n";
    os << "window_include_unit = " << (c.model.window.include_unit ? "true" : "false") << "\n";
    os << "[train]\n";
    os << "seed = " << c.seed << "\n";
    os << "steps = " << c.steps << "\n";
    os << "batch_size = " << c.batch_size << "\n";
    os << "lr = " << fmt_double(c.lr) << "\n";
    os << "beta1 = " << fmt_double(c.beta1) << "\n";
    os << "beta2 = " << fmt_double(c.beta2) << "\n";
    os << "eps = " << fmt_double(c.eps) << "\n";
    os << "weight_decay = " << fmt_double(c.weight_decay) << "\n";
    os << "sync_every = " << c.sync_every << "\n";
    os << "lr_decay_start = " << c.lr_decay_start << "\n";
    os << "dtype = " << c.dtype << "\n";
    os << "[data]\n";
    os << "out = " << c.out_dir << "\n";
    os << "dir = " << c.data_dir << "\n";
    os << "count = " << c.data_count << "\n";
    return os.str();
}

inline RunConfig parse_config(const std::string& text) {
    RunConfig c;
    std::istringstream is(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const std::string t = cfgdetail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t.front() == '[' && t.back() == ']') {
            section = t.substr(1, t.size() - 2);
            if (section != "model" && section != "train" && section != "data")
                throw configuration_error("config: unknown section [" + section + "]");
            continue;
        }
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw configuration_error("config: line " + std::to_string(line_no) +
                                      " is not key = value");
        const std::string key = cfgdetail::trim(t.substr(0, eq));
        const std::string val = cfgdetail::trim(t.substr(eq + 1));
        if (section == "model") {
            if (key == "preset") {
                c.preset = val;
                c.model = preset_by_name(val);
            } else if (key == "channels")
                c.model.channels = cfgdetail::parse4(val, key);
            else if (key == "blocks")
                c.model.blocks = cfgdetail::parse4(val, key);
            else if (key == "heads")
                c.model.heads = cfgdetail::parse4(val, key);
            else if (key == "patch_size")
                c.model.patch_size = std::stoull(val);
            else if (key == "image_size")
                c.model.image_size = std::stoull(val);
            else if (key == "decoder_depth")
                c.model.decoder_depth = std::stoull(val);
            else if (key == "decoder_width")
                c.model.decoder_width = std::stoull(val);
            else if (key == "decoder_heads")
                c.model.decoder_heads = std::stoull(val);
            else if (key == "mask_ratio")
                c.model.mask_ratio = std::stod(val);
            else if (key == "fusion_mode") {
                if (val == "cascade")
                    c.model.fusion = FusionMode::cascade;
                else if (val == "parallel")
                    c.model.fusion = FusionMode::parallel;
                else
                    throw configuration_error("config: fusion_mode must be cascade|parallel");
            } else if (key == "window_include_full")
                c.model.window.include_full = cfgdetail::parse_bool(val, key);
            else if (key == "window_include_unit")
                c.model.window.include_unit = cfgdetail::parse_bool(val, key);
            else
                throw configuration_error("config: unknown key '" + key + "' in [model]");
        } else if (section == "train") {
            if (key == "seed")
                c.seed = std::stoull(val);
            else if (key == "steps")
                c.steps = std::stoull(val);
            else if (key == "batch_size")
                c.batch_size = std::stoull(val);
            else if (key == "lr")
                c.lr = std::stod(val);
            else if (key == "beta1")
                c.beta1 = std::stod(val);
            else if (key == "beta2")
                c.beta2 = std::stod(val);
            else if (key == "eps")
                c.eps = std::stod(val);
            else if (key == "weight_decay")
                c.weight_decay = std::stod(val);
            else if (key == "sync_every")
                c.sync_every = std::stoull(val);
            else if (key == "lr_decay_start")
                c.lr_decay_start = std::stoull(val);
            else if (key == "dtype")
                c.dtype = val;
            else
                throw configuration_error("config: unknown key '" + key + "' in [train]");
        } else if (section == "data") {
            if (key == "out")
                c.out_dir = val;
            else if (key == "dir")
                c.data_dir = val;
            else if (key == "count")
                c.data_count = std::stoull(val);
            else
                throw configuration_error("config: unknown key '" + key + "' in [data]");
        } else {
            throw configuration_error("config: key before any [section]");
        }
    }
    c.validate();
    return c;
}

inline RunConfig load_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

}  // namespace coma
