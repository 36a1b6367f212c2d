#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "coma/common.hpp"
#include "coma/tensor.hpp"

namespace coma {

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw configuration_error(std::string(op) + ": shape mismatch " +
                                  shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ----------------------------- elementwise -----------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("add", a, b);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto pa = a.impl, pb = b.impl;
    return make_op<T>("add", a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorImpl<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            pa->grad[i] += self.grad[i];
            pb->grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("sub", a, b);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
    auto pa = a.impl, pb = b.impl;
    return make_op<T>("sub", a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorImpl<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            pa->grad[i] += self.grad[i];
            pb->grad[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape("mul", a, b);
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto pa = a.impl, pb = b.impl;
    return make_op<T>("mul", a.shape(), std::move(out), {pa, pb}, [pa, pb](TensorImpl<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            pa->grad[i] += self.grad[i] * pb->value[i];
            pb->grad[i] += self.grad[i] * pa->value[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
    auto pa = a.impl;
    return make_op<T>("scale", a.shape(), std::move(out), {pa}, [pa, c](TensorImpl<T>& self) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
    });
}

// rows (r x C) + bias (C), broadcast over rows
template <typename T>
Tensor<T> add_row_vector(const Tensor<T>& x, const Tensor<T>& bias) {
    if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
        throw configuration_error("add_row_vector: expected (r,C) + (C)");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = x.values()[r * cols + c] + bias.values()[c];
    auto px = x.impl, pb = bias.impl;
    return make_op<T>("add_row_vector", x.shape(), std::move(out), {px, pb},
                      [px, pb, rows, cols](TensorImpl<T>& self) {
                          for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < cols; ++c) {
                                  px->grad[r * cols + c] += self.grad[r * cols + c];
                                  pb->grad[c] += self.grad[r * cols + c];
                              }
                      });
}

// vector (C) -> (n x C), every row a copy
template <typename T>
Tensor<T> broadcast_row(const Tensor<T>& v, std::size_t n) {
    if (v.rank() != 1) throw configuration_error("broadcast_row: expected rank-1 input");
    const std::size_t cols = v.dim(0);
    std::vector<T> out(n * cols);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = v.values()[c];
    auto pv = v.impl;
    return make_op<T>("broadcast_row", {n, cols}, std::move(out), {pv},
                      [pv, n, cols](TensorImpl<T>& self) {
                          for (std::size_t r = 0; r < n; ++r)
                              for (std::size_t c = 0; c < cols; ++c)
                                  pv->grad[c] += self.grad[r * cols + c];
                      });
}

// ----------------------------- matmul / transpose -----------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw configuration_error("matmul: incompatible shapes " + detail::shape_str(a.shape()) +
                                  " x " + detail::shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<T> out(m * n, T(0));
    const T* av = a.values().data();
    const T* bv = b.values().data();
    T* ov = out.data();
    parallel_for(m, [&](std::size_t i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T aik = av[i * k + kk];
            const T* brow = bv + kk * n;
            T* orow = ov + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    });
    auto pa = a.impl, pb = b.impl;
    return make_op<T>("matmul", {m, n}, std::move(out), {pa, pb},
                      [pa, pb, m, k, n](TensorImpl<T>& self) {
                          const T* g = self.grad.data();
                          // dA = dC * B^T
                          parallel_for(m, [&](std::size_t i) {
                              for (std::size_t kk = 0; kk < k; ++kk) {
                                  T acc = T(0);
                                  const T* grow = g + i * n;
                                  const T* brow = pb->value.data() + kk * n;
                                  for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                                  pa->grad[i * k + kk] += acc;
                              }
                          });
                          // dB = A^T * dC
                          parallel_for(k, [&](std::size_t kk) {
                              for (std::size_t i = 0; i < m; ++i) {
                                  const T aik = pa->value[i * k + kk];
                                  const T* grow = g + i * n;
                                  T* brow = pb->grad.data() + kk * n;
                                  for (std::size_t j = 0; j < n; ++j) brow[j] += aik * grow[j];
                              }
                          });
                      });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.rank() != 2) throw configuration_error("transpose2d: expected rank-2 input");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
    auto pa = a.impl;
    return make_op<T>("transpose2d", {n, m}, std::move(out), {pa},
                      [pa, m, n](TensorImpl<T>& self) {
                          for (std::size_t i = 0; i < m; ++i)
                              for (std::size_t j = 0; j < n; ++j)
                                  pa->grad[i * n + j] += self.grad[j * m + i];
                      });
}

// ----------------------------- layout (index-map) ops -----------------------------

// out[i] = x[map[i]]; the workhorse behind reshape/gather/permute ops.
// Backward scatter-adds through the same map, so it is exact for any map.
template <typename T>
Tensor<T> remap(const char* op, const Tensor<T>& x,
                std::shared_ptr<const std::vector<std::size_t>> map,
                std::vector<std::size_t> out_shape) {
    std::vector<T> out(map->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[(*map)[i]];
    auto px = x.impl;
    return make_op<T>(op, std::move(out_shape), std::move(out), {px},
                      [px, map](TensorImpl<T>& self) {
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                              px->grad[(*map)[i]] += self.grad[i];
                      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<std::size_t> new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw configuration_error("reshape: element count mismatch");
    std::vector<T> out = x.values();
    auto px = x.impl;
    return make_op<T>("reshape", std::move(new_shape), std::move(out), {px},
                      [px](TensorImpl<T>& self) {
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                              px->grad[i] += self.grad[i];
                      });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& indices) {
    if (x.rank() != 2) throw configuration_error("gather_rows: expected rank-2 input");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    auto map = std::make_shared<std::vector<std::size_t>>();
    map->reserve(indices.size() * cols);
    for (std::size_t idx : indices) {
        if (idx >= rows) throw configuration_error("gather_rows: index out of range");
        for (std::size_t c = 0; c < cols; ++c) map->push_back(idx * cols + c);
    }
    return remap<T>("gather_rows", x, std::move(map), {indices.size(), cols});
}

// out = copy of template_rows with out[indices[i], :] = rows[i, :]
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& rows, const std::vector<std::size_t>& indices,
                       const Tensor<T>& template_rows) {
    if (rows.rank() != 2 || template_rows.rank() != 2 || rows.dim(1) != template_rows.dim(1))
        throw configuration_error("scatter_rows: expected rank-2 inputs with equal width");
    if (rows.dim(0) != indices.size())
        throw configuration_error("scatter_rows: row count != index count");
    const std::size_t n = template_rows.dim(0), cols = template_rows.dim(1);
    std::unordered_set<std::size_t> seen;
    for (std::size_t idx : indices) {
        if (idx >= n) throw configuration_error("scatter_rows: index out of range");
        if (!seen.insert(idx).second) throw configuration_error("scatter_rows: duplicate index");
    }
    std::vector<T> out = template_rows.values();
    for (std::size_t i = 0; i < indices.size(); ++i)
        for (std::size_t c = 0; c < cols; ++c)
            out[indices[i] * cols + c] = rows.values()[i * cols + c];
    auto filled = std::make_shared<std::vector<bool>>(n, false);
    for (std::size_t idx : indices) (*filled)[idx] = true;
    auto idx_copy = std::make_shared<std::vector<std::size_t>>(indices);
    auto pr = rows.impl, pt = template_rows.impl;
    return make_op<T>("scatter_rows", {n, cols}, std::move(out), {pr, pt},
                      [pr, pt, idx_copy, filled, n, cols](TensorImpl<T>& self) {
                          for (std::size_t i = 0; i < idx_copy->size(); ++i)
                              for (std::size_t c = 0; c < cols; ++c)
                                  pr->grad[i * cols + c] += self.grad[(*idx_copy)[i] * cols + c];
                          for (std::size_t r = 0; r < n; ++r)
                              if (!(*filled)[r])
                                  for (std::size_t c = 0; c < cols; ++c)
                                      pt->grad[r * cols + c] += self.grad[r * cols + c];
                      });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t c0, std::size_t c1) {
    if (x.rank() != 2 || c0 >= c1 || c1 > x.dim(1))
        throw configuration_error("slice_cols: bad column range");
    const std::size_t rows = x.dim(0), cols = x.dim(1), w = c1 - c0;
    auto map = std::make_shared<std::vector<std::size_t>>();
    map->reserve(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = c0; c < c1; ++c) map->push_back(r * cols + c);
    return remap<T>("slice_cols", x, std::move(map), {rows, w});
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw configuration_error("concat_cols: no inputs");
    const std::size_t rows = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(0) != rows)
            throw configuration_error("concat_cols: row count mismatch");
        total += p.dim(1);
    }
    std::vector<T> out(rows * total);
    std::vector<TensorPtr<T>> inputs;
    auto widths = std::make_shared<std::vector<std::size_t>>();
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c)
                out[r * total + off + c] = p.values()[r * w + c];
        inputs.push_back(p.impl);
        widths->push_back(w);
        off += w;
    }
    auto impls = std::make_shared<std::vector<TensorPtr<T>>>(inputs);
    return make_op<T>("concat_cols", {rows, total}, std::move(out), std::move(inputs),
                      [impls, widths, rows, total](TensorImpl<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < impls->size(); ++k) {
                              const std::size_t w = (*widths)[k];
                              auto& g = (*impls)[k]->grad;
                              for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t c = 0; c < w; ++c)
                                      g[r * w + c] += self.grad[r * total + off + c];
                              off += w;
                          }
                      });
}

// ----------------------------- nonlinearities -----------------------------

// softmax along the last axis, max-subtracted; leading axes flattened to rows
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    if (x.rank() < 1) throw configuration_error("softmax: rank must be >= 1");
    const std::size_t cols = x.dim(x.rank() - 1);
    const std::size_t rows = x.numel() / cols;
    for (T v : x.values())
        if (std::isnan(v)) throw numerical_error("softmax: NaN input");
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = x.values().data() + r * cols;
        T mx = row[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
        T denom = T(0);
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = std::exp(row[c] - mx);
            denom += out[r * cols + c];
        }
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= denom;
    }
    auto px = x.impl;
    auto y = std::make_shared<std::vector<T>>(out);
    return make_op<T>("softmax", x.shape(), std::move(out), {px},
                      [px, y, rows, cols](TensorImpl<T>& self) {
                          // dx = y * (g - sum(g*y)) per row
                          for (std::size_t r = 0; r < rows; ++r) {
                              const T* yr = y->data() + r * cols;
                              const T* gr = self.grad.data() + r * cols;
                              T dot = T(0);
                              for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                              for (std::size_t c = 0; c < cols; ++c)
                                  px->grad[r * cols + c] += yr[c] * (gr[c] - dot);
                          }
                      });
}

// per-row zero mean / unit variance (population), then gamma*xhat + beta
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
    if (x.rank() != 2) throw configuration_error("layer_norm: expected rank-2 input");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (gamma.rank() != 1 || gamma.dim(0) != cols || beta.rank() != 1 || beta.dim(0) != cols)
        throw configuration_error("layer_norm: gamma/beta must have row width");
    if (eps < T(0)) throw configuration_error("layer_norm: eps must be >= 0");
    std::vector<T> out(x.numel());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = x.values().data() + r * cols;
        T mean = T(0);
        for (std::size_t c = 0; c < cols; ++c) mean += row[c];
        mean /= T(cols);
        T var = T(0);
        for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
        var /= T(cols);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            (*xhat)[r * cols + c] = (row[c] - mean) * is;
            out[r * cols + c] = gamma.values()[c] * (*xhat)[r * cols + c] + beta.values()[c];
        }
    }
    auto px = x.impl, pg = gamma.impl, pb = beta.impl;
    return make_op<T>("layer_norm", x.shape(), std::move(out), {px, pg, pb},
                      [px, pg, pb, xhat, inv_std, rows, cols](TensorImpl<T>& self) {
                          for (std::size_t r = 0; r < rows; ++r) {
                              const T* g = self.grad.data() + r * cols;
                              const T* xh = xhat->data() + r * cols;
                              T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
                              for (std::size_t c = 0; c < cols; ++c) {
                                  const T dxhat = g[c] * pg->value[c];
                                  sum_dxhat += dxhat;
                                  sum_dxhat_xhat += dxhat * xh[c];
                                  pg->grad[c] += g[c] * xh[c];
                                  pb->grad[c] += g[c];
                              }
                              const T inv_n = T(1) / T(cols);
                              for (std::size_t c = 0; c < cols; ++c) {
                                  const T dxhat = g[c] * pg->value[c];
                                  px->grad[r * cols + c] +=
                                      (*inv_std)[r] *
                                      (dxhat - inv_n * sum_dxhat - xh[c] * inv_n * sum_dxhat_xhat);
                              }
                          }
                      });
}

// exact erf formulation: y = x * Phi(x)
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(0.7071067811865475244008443621048490393);
    constexpr T inv_sqrt2pi = T(0.3989422804014326779399460599343818685);
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T v = x.values()[i];
        out[i] = v * T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
    }
    auto px = x.impl;
    return make_op<T>("gelu", x.shape(), std::move(out), {px},
                      [px, inv_sqrt2, inv_sqrt2pi](TensorImpl<T>& self) {
                          for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              const T v = px->value[i];
                              const T phi_cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
                              const T phi_pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                              px->grad[i] += self.grad[i] * (phi_cdf + v * phi_pdf);
                          }
                      });
}

// ----------------------------- conv / pool -----------------------------

// standard cross-correlation, direct summation
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
    if (input.rank() != 4 || weight.rank() != 4)
        throw configuration_error("conv2d: input and weight must be rank-4");
    const std::size_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t Cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != Cin || weight.dim(3) != k)
        throw configuration_error("conv2d: weight shape mismatch, expected (Cout,Cin,k,k)");
    if (bias.rank() != 1 || bias.dim(0) != Cout)
        throw configuration_error("conv2d: bias must have Cout entries");
    if (stride == 0) throw configuration_error("conv2d: stride must be positive");
    if (H + 2 * padding < k || W + 2 * padding < k)
        throw configuration_error("conv2d: kernel larger than padded input");
    if ((H + 2 * padding - k) % stride != 0 || (W + 2 * padding - k) % stride != 0)
        throw configuration_error("conv2d: extent minus kernel not divisible by stride");
    const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
    const std::size_t Wo = (W + 2 * padding - k) / stride + 1;

    std::vector<T> out(B * Cout * Ho * Wo);
    const T* xv = input.values().data();
    const T* wv = weight.values().data();
    const T* bv = bias.values().data();
    parallel_for(B * Cout, [&](std::size_t bc) {
        const std::size_t b = bc / Cout, co = bc % Cout;
        T* obase = out.data() + (b * Cout + co) * Ho * Wo;
        for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                T acc = bv[co];
                for (std::size_t ci = 0; ci < Cin; ++ci) {
                    const T* xplane = xv + (b * Cin + ci) * H * W;
                    const T* wplane = wv + (co * Cin + ci) * k * k;
                    for (std::size_t kh = 0; kh < k; ++kh) {
                        const std::ptrdiff_t ih =
                            static_cast<std::ptrdiff_t>(oh * stride + kh) -
                            static_cast<std::ptrdiff_t>(padding);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const std::ptrdiff_t iw =
                                static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                            acc += xplane[ih * static_cast<std::ptrdiff_t>(W) + iw] *
                                   wplane[kh * k + kw];
                        }
                    }
                }
                obase[oh * Wo + ow] = acc;
            }
    });

    auto px = input.impl, pw = weight.impl, pb = bias.impl;
    return make_op<T>(
        "conv2d", {B, Cout, Ho, Wo}, std::move(out), {px, pw, pb},
        [px, pw, pb, B, Cin, H, W, Cout, k, Ho, Wo, stride, padding](TensorImpl<T>& self) {
            const T* g = self.grad.data();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t co = 0; co < Cout; ++co)
                    for (std::size_t oh = 0; oh < Ho; ++oh)
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            const T go = g[((b * Cout + co) * Ho + oh) * Wo + ow];
                            pb->grad[co] += go;
                            for (std::size_t ci = 0; ci < Cin; ++ci)
                                for (std::size_t kh = 0; kh < k; ++kh) {
                                    const std::ptrdiff_t ih =
                                        static_cast<std::ptrdiff_t>(oh * stride + kh) -
                                        static_cast<std::ptrdiff_t>(padding);
                                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t kw = 0; kw < k; ++kw) {
                                        const std::ptrdiff_t iw =
                                            static_cast<std::ptrdiff_t>(ow * stride + kw) -
                                            static_cast<std::ptrdiff_t>(padding);
                                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W))
                                            continue;
                                        const std::size_t xi =
                                            (b * Cin + ci) * H * W +
                                            static_cast<std::size_t>(ih) * W +
                                            static_cast<std::size_t>(iw);
                                        const std::size_t wi =
                                            (co * Cin + ci) * k * k + kh * k + kw;
                                        px->grad[xi] += pw->value[wi] * go;
                                        pw->grad[wi] += px->value[xi] * go;
                                    }
                                }
                        }
        });
}

// zero padding with independent extents per edge; the conv stem needs
// top/left-only padding to keep strides exactly divisible
template <typename T>
Tensor<T> pad2d(const Tensor<T>& input, std::size_t top, std::size_t left, std::size_t bottom,
                std::size_t right) {
    if (input.rank() != 4) throw configuration_error("pad2d: input must be rank-4");
    const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::size_t Ho = H + top + bottom, Wo = W + left + right;
    std::vector<T> out(B * C * Ho * Wo, T(0));
    for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w)
                out[bc * Ho * Wo + (h + top) * Wo + (w + left)] =
                    input.values()[bc * H * W + h * W + w];
    auto px = input.impl;
    return make_op<T>("pad2d", {B, C, Ho, Wo}, std::move(out), {px},
                      [px, B, C, H, W, Ho, Wo, top, left](TensorImpl<T>& self) {
                          for (std::size_t bc = 0; bc < B * C; ++bc)
                              for (std::size_t h = 0; h < H; ++h)
                                  for (std::size_t w = 0; w < W; ++w)
                                      px->grad[bc * H * W + h * W + w] +=
                                          self.grad[bc * Ho * Wo + (h + top) * Wo +
                                                    (w + left)];
                      });
}

// 2x2 stride-2 max pooling; gradient routed to the first maximum in row-major
// order within each window
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input) {
    if (input.rank() != 4) throw configuration_error("maxpool2d: input must be rank-4");
    const std::size_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw configuration_error("maxpool2d: height and width must be even");
    const std::size_t Ho = H / 2, Wo = W / 2;
    std::vector<T> out(B * C * Ho * Wo);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    for (std::size_t bc = 0; bc < B * C; ++bc) {
        const T* plane = input.values().data() + bc * H * W;
        for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow) {
                T best = plane[(2 * oh) * W + 2 * ow];
                std::size_t best_idx = (2 * oh) * W + 2 * ow;
                const std::size_t cand[3] = {(2 * oh) * W + 2 * ow + 1,
                                             (2 * oh + 1) * W + 2 * ow,
                                             (2 * oh + 1) * W + 2 * ow + 1};
                for (std::size_t ci : cand)
                    if (plane[ci] > best) {  // strict: ties keep the earlier index
                        best = plane[ci];
                        best_idx = ci;
                    }
                out[bc * Ho * Wo + oh * Wo + ow] = best;
                (*argmax)[bc * Ho * Wo + oh * Wo + ow] = bc * H * W + best_idx;
            }
    }
    auto px = input.impl;
    return make_op<T>("maxpool2d", {B, C, Ho, Wo}, std::move(out), {px},
                      [px, argmax](TensorImpl<T>& self) {
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                              px->grad[(*argmax)[i]] += self.grad[i];
                      });
}

// ----------------------------- reductions -----------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.values()) acc += v;
    auto px = x.impl;
    return make_op<T>("sum_all", {1}, {acc}, {px}, [px](TensorImpl<T>& self) {
        for (std::size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    return scale(sum_all(x), T(1) / T(x.numel()));
}

// mean of squared differences (Frobenius norm squared over element count)
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
    detail::require_same_shape("mse_loss", prediction, target);
    Tensor<T> diff = sub(prediction, target);
    return mean_all(mul(diff, diff));
}

// ----------------------------- linear helper -----------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_row_vector(matmul(x, w), b);
}

}  // namespace coma
