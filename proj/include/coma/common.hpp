#pragma once

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace coma {

// ----------------------------- error taxonomy -----------------------------
// configuration_error: bad shapes/flags/config values (CLI exit 1)
// usage_error:         API misuse, e.g. backward on a non-scalar (CLI exit 1)
// numerical_error:     NaN loss, failed numeric contract (CLI exit 2)
// io_error:            file format / filesystem failures (CLI exit 3)
// internal_error:      broken internal invariant

struct configuration_error : std::runtime_error {
    explicit configuration_error(const std::string& m) : std::runtime_error(m) {}
};
struct usage_error : std::runtime_error {
    explicit usage_error(const std::string& m) : std::runtime_error(m) {}
};
struct numerical_error : std::runtime_error {
    explicit numerical_error(const std::string& m) : std::runtime_error(m) {}
};
struct io_error : std::runtime_error {
    explicit io_error(const std::string& m) : std::runtime_error(m) {}
};
struct internal_error : std::runtime_error {
    explicit internal_error(const std::string& m) : std::runtime_error(m) {}
};

// ----------------------------- worker threads -----------------------------
// COMA_THREADS caps intra-op parallelism. Every parallel loop writes disjoint
// output elements, each computed by the same sequential inner loop, so results
// are bit-identical for any thread count.

inline int max_threads() {
    static const int n = [] {
        if (const char* e = std::getenv("COMA_THREADS")) {
            const int v = std::atoi(e);
            if (v >= 1) return v;
        }
        return 1;
    }();
    return n;
}

template <class F>
void parallel_for(std::size_t n, F&& body) {
    const std::size_t tn = static_cast<std::size_t>(max_threads());
    if (tn <= 1 || n < 2 * tn) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    const std::size_t workers = tn < n ? tn : n;
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = lo + chunk < n ? lo + chunk : n;
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

inline bool is_power_of_two(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

inline std::size_t ilog2(std::size_t v) {
    std::size_t r = 0;
    while (v > 1) {
        v >>= 1;
        ++r;
    }
    return r;
}

}  // namespace coma
