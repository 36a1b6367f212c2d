#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "coma/common.hpp"
#include "coma/io.hpp"
#include "coma/rng.hpp"
#include "coma/tensor.hpp"

namespace coma {

// Deterministic procedural images: linear gradients, checkerboards, Gaussian
// blobs and frequency gratings, all clamped to [0,1]. Image i depends only on
// (seed, i, size).

template <typename T>
Tensor<T> synth_image(std::uint64_t seed, std::uint64_t index, std::size_t size) {
    RngStream rng(seed, StreamId::data_synth, index);
    const std::size_t kind = static_cast<std::size_t>(rng.below(4));
    std::vector<T> v(3 * size * size);
    auto at = [&](std::size_t c, std::size_t y, std::size_t x) -> T& {
        return v[c * size * size + y * size + x];
    };
    const double inv = 1.0 / static_cast<double>(size);
    if (kind == 0) {  // linear gradient
        for (std::size_t c = 0; c < 3; ++c) {
            const double ax = rng.uniform(-1.0, 1.0), ay = rng.uniform(-1.0, 1.0);
            const double b = rng.uniform01();
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double val = 0.5 * (ax * x * inv + ay * y * inv) + b * 0.5;
                    at(c, y, x) = static_cast<T>(std::clamp(val, 0.0, 1.0));
                }
        }
    } else if (kind == 1) {  // checkerboard
        const std::size_t cell = std::size_t{1} << (1 + rng.below(3));
        for (std::size_t c = 0; c < 3; ++c) {
            const double lo = rng.uniform(0.0, 0.45), hi = rng.uniform(0.55, 1.0);
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x)
                    at(c, y, x) = static_cast<T>(((x / cell + y / cell) % 2) ? hi : lo);
        }
    } else if (kind == 2) {  // Gaussian blobs on a flat background
        const std::size_t blobs = 1 + rng.below(4);
        std::vector<double> cx(blobs), cy(blobs), sg(blobs), amp[3];
        for (auto& a : amp) a.resize(blobs);
        for (std::size_t bi = 0; bi < blobs; ++bi) {
            cx[bi] = rng.uniform01();
            cy[bi] = rng.uniform01();
            sg[bi] = rng.uniform(0.05, 0.25);
            for (std::size_t c = 0; c < 3; ++c) amp[c][bi] = rng.uniform(0.3, 1.0);
        }
        const double bg = rng.uniform(0.0, 0.3);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    double val = bg;
                    for (std::size_t bi = 0; bi < blobs; ++bi) {
                        const double dx = x * inv - cx[bi], dy = y * inv - cy[bi];
                        val += amp[c][bi] *
                               std::exp(-(dx * dx + dy * dy) / (2.0 * sg[bi] * sg[bi]));
                    }
                    at(c, y, x) = static_cast<T>(std::clamp(val, 0.0, 1.0));
                }
    } else {  // frequency grating
        for (std::size_t c = 0; c < 3; ++c) {
            const double fx = rng.uniform(0.5, 4.0), fy = rng.uniform(0.5, 4.0);
            const double phase = rng.uniform(0.0, 6.2831853);
            const double amp = rng.uniform(0.3, 0.5);
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) {
                    const double val =
                        0.5 + amp * std::sin(6.2831853 * (fx * x * inv + fy * y * inv) + phase);
                    at(c, y, x) = static_cast<T>(std::clamp(val, 0.0, 1.0));
                }
        }
    }
    return from_values<T>({3, size, size}, std::move(v));
}

template <typename T>
std::vector<Tensor<T>> synth_images(std::uint64_t seed, std::size_t count, std::size_t size) {
    std::vector<Tensor<T>> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(synth_image<T>(seed, i, size));
    return out;
}

// on-disk dataset: img_NNNN.cmt files (CMT1, float32) plus manifest.txt lines
// "<filename>\t<fnv1a hex>"; the checksum is validated on load
inline void synth_dataset(std::uint64_t seed, std::size_t count, std::size_t size,
                          const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(dir + "/manifest.txt");
    if (!manifest) throw io_error("cannot write manifest in " + dir);
    for (std::size_t i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "img_%04zu.cmt", i);
        const std::string path = dir + "/" + name;
        save_tensor<float>(path, synth_image<float>(seed, i, size));
        char hex[20];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(fnv1a_file(path)));
        manifest << name << "\t" << hex << "\n";
    }
    if (!manifest) throw io_error("failed writing manifest in " + dir);
}

template <typename T>
std::vector<Tensor<T>> load_dataset(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.txt");
    if (!manifest) throw io_error("cannot open manifest in " + dir);
    std::vector<Tensor<T>> images;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) throw io_error("malformed manifest line: " + line);
        const std::string name = line.substr(0, tab);
        const std::string path = dir + "/" + name;
        const std::uint64_t expect = std::stoull(line.substr(tab + 1), nullptr, 16);
        if (fnv1a_file(path) != expect)
            throw io_error("manifest checksum mismatch for " + name);
        images.push_back(load_tensor<T>(path));
    }
    if (images.empty()) throw io_error("dataset is empty: " + dir);
    return images;
}

}  // namespace coma
