#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "coma/common.hpp"
#include "coma/model.hpp"

namespace coma {

struct AdamWConfig {
    double lr{1e-3};
    double beta1{0.9};
    double beta2{0.95};
    double eps{1e-8};
    double weight_decay{0.05};
};

// one AdamW update over flat buffers; decoupled weight decay on the
// pre-update value, bias-corrected moments, t counts from 1
template <typename T>
void adamw_update(std::vector<T>& values, const std::vector<T>& grads, std::vector<T>& m,
                  std::vector<T>& v, double lr, double beta1, double beta2, double eps,
                  double weight_decay, std::uint64_t t) {
    if (t < 1) throw usage_error("adamw_update: t must be >= 1");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grads.empty() ? 0.0 : static_cast<double>(grads[i]);
        const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * g;
        const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double mhat = mi / bc1;
        const double vhat = vi / bc2;
        const double p = static_cast<double>(values[i]);
        values[i] =
            static_cast<T>(p - lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p));
    }
}

// AdamW over a parameter registry; moments keyed by registration order.
// Norm gains/offsets and the mask token register with decay=false.
template <typename T>
class AdamW {
public:
    AdamW(const ParamRegistry<T>& params, AdamWConfig cfg) : cfg_(cfg) {
        for (const auto& e : params.entries()) {
            m_.emplace_back(e.tensor.numel(), T(0));
            v_.emplace_back(e.tensor.numel(), T(0));
        }
    }

    void step(ParamRegistry<T>& params) { step(params, cfg_.lr); }

    void step(ParamRegistry<T>& params, double lr) {
        ++t_;
        auto& entries = params.entries();
        if (entries.size() != m_.size())
            throw internal_error("AdamW: registry size changed");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            auto& e = entries[i];
            adamw_update<T>(e.tensor.values(), e.tensor.grad(), m_[i], v_[i], lr, cfg_.beta1,
                            cfg_.beta2, cfg_.eps, e.decay ? cfg_.weight_decay : 0.0, t_);
        }
    }

    std::uint64_t t() const { return t_; }
    void set_t(std::uint64_t t) { t_ = t; }
    std::vector<std::vector<T>>& first_moments() { return m_; }
    std::vector<std::vector<T>>& second_moments() { return v_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    std::uint64_t t_{0};
};

}  // namespace coma
