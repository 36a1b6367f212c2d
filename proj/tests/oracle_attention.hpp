#pragma once

// Test-only brute-force oracles: explicit-loop window summation and
// row-by-row softmax attention, independent of the library's tensor path.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  std::size_t m, std::size_t k, std::size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0;
            for (std::size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            out[i * n + j] = acc;
        }
    return out;
}

// one DM-MSA branch: K', V' materialized by explicit window summation with the
// shared branch conv, then per-head scaled dot-product attention
inline std::vector<double> branch_attention(const std::vector<double>& Q,
                                            const std::vector<double>& K,
                                            const std::vector<double>& V, std::size_t v,
                                            std::size_t p, std::size_t C, std::size_t heads,
                                            const std::vector<double>& w,
                                            const std::vector<double>& b, std::size_t k) {
    const std::size_t g = p / k;
    const std::size_t nk = v * g * g;
    std::vector<double> kp(nk * C), vp(nk * C);
    for (std::size_t patch = 0; patch < v; ++patch)
        for (std::size_t wr = 0; wr < g; ++wr)
            for (std::size_t wc = 0; wc < g; ++wc)
                for (std::size_t co = 0; co < C; ++co) {
                    double acc_k = b[co], acc_v = b[co];
                    for (std::size_t ci = 0; ci < C; ++ci)
                        for (std::size_t dr = 0; dr < k; ++dr)
                            for (std::size_t dc = 0; dc < k; ++dc) {
                                const std::size_t row =
                                    patch * p * p + (wr * k + dr) * p + (wc * k + dc);
                                const double wv = w[((co * C + ci) * k + dr) * k + dc];
                                acc_k += wv * K[row * C + ci];
                                acc_v += wv * V[row * C + ci];
                            }
                    kp[(patch * g * g + wr * g + wc) * C + co] = acc_k;
                    vp[(patch * g * g + wr * g + wc) * C + co] = acc_v;
                }
    const std::size_t m = v * p * p;
    const std::size_t d = C / heads;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> out(m * C, 0.0);
    std::vector<double> scores(nk);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < nk; ++j) {
                double s = 0;
                for (std::size_t dd = 0; dd < d; ++dd)
                    s += Q[i * C + h * d + dd] * kp[j * C + h * d + dd];
                scores[j] = s * inv_sqrt_d;
            }
            double mx = scores[0];
            for (double s : scores) mx = std::max(mx, s);
            double denom = 0;
            for (auto& s : scores) {
                s = std::exp(s - mx);
                denom += s;
            }
            for (auto& s : scores) s /= denom;
            for (std::size_t dd = 0; dd < d; ++dd) {
                double acc = 0;
                for (std::size_t j = 0; j < nk; ++j) acc += scores[j] * vp[j * C + h * d + dd];
                out[i * C + h * d + dd] = acc;
            }
        }
    return out;
}

}  // namespace oracle
