#pragma once

#include <cmath>
#include <cstdint>

#include "coma/common.hpp"

namespace coma {

// Deterministic, toolchain-independent RNG. One root seed; every consumer
// draws from an independent stream keyed by (root seed, stream id, step).
// std distributions are implementation-defined, so uniform/normal/shuffle
// are built directly on the raw engine.

enum class StreamId : std::uint64_t {
    weight_init = 1,
    mask = 2,
    data_synth = 3,
    batch_order = 4,
    test = 100,
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& s) {
    s += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace detail

class RngStream {
public:
    RngStream(std::uint64_t root_seed, StreamId id, std::uint64_t step)
        : RngStream(root_seed, static_cast<std::uint64_t>(id), step) {}

    RngStream(std::uint64_t root_seed, std::uint64_t id, std::uint64_t step) {
        std::uint64_t s = root_seed;
        std::uint64_t k = detail::splitmix64(s) ^ (id * 0xC2B2AE3D27D4EB4FULL);
        k = detail::splitmix64(k) ^ (step * 0x165667B19E3779F9ULL);
        (void)detail::splitmix64(k);
        for (auto& word : state_) word = detail::splitmix64(k);
    }

    // xoshiro256++
    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl(state_[3], 45);
        return result;
    }

    // uniform in [0, 1) with 53 significant bits
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // unbiased integer in [0, m)
    std::uint64_t below(std::uint64_t m) {
        if (m == 0) throw usage_error("RngStream::below: m must be positive");
        const std::uint64_t threshold = (0 - m) % m;
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) return r % m;
        }
    }

    // Box-Muller with cached spare
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = 1.0 - uniform01();
        const double theta = 6.283185307179586476925286766559 * uniform01();
        const double radius = std::sqrt(-2.0 * std::log(u));
        spare_ = radius * std::sin(theta);
        has_spare_ = true;
        return radius * std::cos(theta);
    }

    double normal(double mean, double sigma) { return mean + sigma * normal(); }

    // normal truncated to +-2 sigma, the usual transformer init
    double truncated_normal(double sigma) {
        for (;;) {
            const double z = normal();
            if (z >= -2.0 && z <= 2.0) return sigma * z;
        }
    }

private:
    std::uint64_t state_[4]{};
    bool has_spare_{false};
    double spare_{0.0};
};

}  // namespace coma
