// Copyright (c) 2026 The bevlift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <memory>

#include "bevlift/tensor.hpp"

#include <cblas.h>

namespace bev {

// ---------------------------------------------------------------------------
// BLAS glue

/// C = alpha * op(A) @ op(B) + beta * C, row-major.
/// A and B are passed in their stored layout; trans flags select op().
template <typename T>
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, const T* b,
                 T beta, T* c) {
    const int lda = trans_a ? m : k;
    const int ldb = trans_b ? k : n;
    if constexpr (std::is_same_v<T, float>) {
        cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                    trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, n);
    } else {
        cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                    trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb, beta, c, n);
    }
}

namespace detail {

inline void check_same_shape(const char* op, const Shape& a, const Shape& b) {
    if (a != b)
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                    shape_str(b));
}

struct AxisRuns {
    std::int64_t outer, len, inner;
};

inline AxisRuns axis_runs(const Shape& s, int axis) {
    if (axis < 0) axis += static_cast<int>(s.size());
    if (axis < 0 || axis >= static_cast<int>(s.size()))
        throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " +
                                    shape_str(s));
    AxisRuns r{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) r.inner *= s[static_cast<std::size_t>(i)];
    return r;
}

// Right-aligned numpy broadcasting.
inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
    const int r = std::max(ra, rb);
    Shape out(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const int da = i < r - ra ? 1 : a[static_cast<std::size_t>(i - (r - ra))];
        const int db = i < r - rb ? 1 : b[static_cast<std::size_t>(i - (r - rb))];
        if (da != db && da != 1 && db != 1)
            throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_str(a) +
                                        " with " + shape_str(b));
        out[static_cast<std::size_t>(i)] = std::max(da, db);
    }
    return out;
}

// Strides of `s` expanded to broadcast shape `out` (0 where broadcast).
inline std::vector<std::int64_t> broadcast_strides(const Shape& s, const Shape& out) {
    const int r = static_cast<int>(out.size()), rs = static_cast<int>(s.size());
    std::vector<std::int64_t> strides(static_cast<std::size_t>(r), 0);
    std::int64_t acc = 1;
    for (int i = rs - 1; i >= 0; --i) {
        const int d = s[static_cast<std::size_t>(i)];
        strides[static_cast<std::size_t>(i + r - rs)] = d == 1 ? 0 : acc;
        acc *= d;
    }
    return strides;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Matrix products

/// Batched matrix product. Both operands are [batch..., m, k] and
/// [batch..., k, n] with identical batch dims (possibly none).
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
        throw std::invalid_argument("matmul: ranks must match and be >= 2, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int r = a.rank();
    const int m = a.dim(r - 2), k = a.dim(r - 1), k2 = b.dim(r - 2), n = b.dim(r - 1);
    std::int64_t batch = 1;
    Shape out_shape;
    for (int i = 0; i < r - 2; ++i) {
        if (a.dim(i) != b.dim(i))
            throw std::invalid_argument("matmul: batch dims differ, " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
        batch *= a.dim(i);
        out_shape.push_back(a.dim(i));
    }
    if (k != k2)
        throw std::invalid_argument("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    out_shape.push_back(m);
    out_shape.push_back(n);

    TensorT<T> out(out_shape);
    for (std::int64_t i = 0; i < batch; ++i)
        gemm<T>(false, false, m, n, k, T(1), a.ptr() + i * m * k, b.ptr() + i * k * n, T(0),
                out.ptr() + i * m * n);

    autodiff::attach<T>(out, "matmul", {a, b}, [a, b, batch, m, n, k](TensorImpl<T>& o) {
        auto ai = a.impl();
        auto bi = b.impl();
        for (std::int64_t i = 0; i < batch; ++i) {
            const T* g = o.grad.data() + i * m * n;
            if (ai->needs_grad) {
                autodiff::ensure_grad(*ai);
                gemm<T>(false, true, m, k, n, T(1), g, bi->data.data() + i * k * n, T(1),
                        ai->grad.data() + i * m * k);
            }
            if (bi->needs_grad) {
                autodiff::ensure_grad(*bi);
                gemm<T>(true, false, k, n, m, T(1), ai->data.data() + i * m * k, g, T(1),
                        bi->grad.data() + i * k * n);
            }
        }
    });
    return out;
}

/// Batched a @ b^T: [batch..., m, k] x [batch..., n, k] -> [batch..., m, n].
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank())
        throw std::invalid_argument("matmul_nt: ranks must match and be >= 2, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int r = a.rank();
    const int m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 2), k2 = b.dim(r - 1);
    std::int64_t batch = 1;
    Shape out_shape;
    for (int i = 0; i < r - 2; ++i) {
        if (a.dim(i) != b.dim(i))
            throw std::invalid_argument("matmul_nt: batch dims differ, " + shape_str(a.shape()) +
                                        " vs " + shape_str(b.shape()));
        batch *= a.dim(i);
        out_shape.push_back(a.dim(i));
    }
    if (k != k2)
        throw std::invalid_argument("matmul_nt: inner dims differ, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    out_shape.push_back(m);
    out_shape.push_back(n);

    TensorT<T> out(out_shape);
    for (std::int64_t i = 0; i < batch; ++i)
        gemm<T>(false, true, m, n, k, T(1), a.ptr() + i * m * k, b.ptr() + i * n * k, T(0),
                out.ptr() + i * m * n);

    autodiff::attach<T>(out, "matmul_nt", {a, b}, [a, b, batch, m, n, k](TensorImpl<T>& o) {
        auto ai = a.impl();
        auto bi = b.impl();
        for (std::int64_t i = 0; i < batch; ++i) {
            const T* g = o.grad.data() + i * m * n;
            if (ai->needs_grad) {
                autodiff::ensure_grad(*ai);
                gemm<T>(false, false, m, k, n, T(1), g, bi->data.data() + i * n * k, T(1),
                        ai->grad.data() + i * m * k);
            }
            if (bi->needs_grad) {
                autodiff::ensure_grad(*bi);
                gemm<T>(true, false, n, k, m, T(1), g, ai->data.data() + i * m * k, T(1),
                        bi->grad.data() + i * n * k);
            }
        }
    });
    return out;
}

/// Affine map x @ W^T + b over the last axis. x: [..., in], w: [out, in],
/// b: [out] or undefined for no bias.
template <typename T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b = {}) {
    if (w.rank() != 2)
        throw std::invalid_argument("linear: weight must be 2-d, got " + shape_str(w.shape()));
    const int in = w.dim(1), out_dim = w.dim(0);
    if (x.rank() < 1 || x.dim(x.rank() - 1) != in)
        throw std::invalid_argument("linear: input " + shape_str(x.shape()) +
                                    " incompatible with weight " + shape_str(w.shape()));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != out_dim))
        throw std::invalid_argument("linear: bias " + shape_str(b.shape()) +
                                    " incompatible with weight " + shape_str(w.shape()));
    const std::int64_t rows = x.numel() / in;

    Shape out_shape = x.shape();
    out_shape.back() = out_dim;
    TensorT<T> out(out_shape);
    gemm<T>(false, true, static_cast<int>(rows), out_dim, in, T(1), x.ptr(), w.ptr(), T(0), out.ptr());
    if (b.defined()) {
        T* op = out.ptr();
        for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < out_dim; ++j) op[r * out_dim + j] += b.ptr()[j];
    }

    std::vector<TensorT<T>> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    autodiff::attach<T>(out, "linear", parents, [x, w, b, rows, in, out_dim](TensorImpl<T>& o) {
        auto xi = x.impl();
        auto wi = w.impl();
        const T* g = o.grad.data();
        if (xi->needs_grad) {
            autodiff::ensure_grad(*xi);
            gemm<T>(false, false, static_cast<int>(rows), in, out_dim, T(1), g, wi->data.data(),
                    T(1), xi->grad.data());
        }
        if (wi->needs_grad) {
            autodiff::ensure_grad(*wi);
            gemm<T>(true, false, out_dim, in, static_cast<int>(rows), T(1), g, xi->data.data(),
                    T(1), wi->grad.data());
        }
        if (b.defined() && b.impl()->needs_grad) {
            auto bi = b.impl();
            autodiff::ensure_grad(*bi);
            for (std::int64_t r = 0; r < rows; ++r)
                for (int j = 0; j < out_dim; ++j) bi->grad[static_cast<std::size_t>(j)] += g[r * out_dim + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// Shared add/mul implementation with numpy broadcasting. Same-shape inputs
// take a fused linear loop; anything else goes through strided indexing.
template <typename T, bool kMul>
TensorT<T> binary_broadcast(const char* name, const TensorT<T>& a, const TensorT<T>& b) {
    const Shape out_shape = broadcast_shape(name, a.shape(), b.shape());
    TensorT<T> out(out_shape);
    const std::int64_t n = out.numel();

    if (a.shape() == b.shape()) {
        const T* pa = a.ptr();
        const T* pb = b.ptr();
        T* po = out.ptr();
        for (std::int64_t i = 0; i < n; ++i) po[i] = kMul ? pa[i] * pb[i] : pa[i] + pb[i];
    } else {
        const auto sa = broadcast_strides(a.shape(), out_shape);
        const auto sb = broadcast_strides(b.shape(), out_shape);
        const int r = static_cast<int>(out_shape.size());
        std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
        const T* pa = a.ptr();
        const T* pb = b.ptr();
        T* po = out.ptr();
        std::int64_t ia = 0, ib = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            po[i] = kMul ? pa[ia] * pb[ib] : pa[ia] + pb[ib];
            for (int d = r - 1; d >= 0; --d) {
                ia += sa[static_cast<std::size_t>(d)];
                ib += sb[static_cast<std::size_t>(d)];
                if (++idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
                idx[static_cast<std::size_t>(d)] = 0;
                ia -= sa[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
                ib -= sb[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
            }
        }
    }

    auto accumulate = [out_shape](TensorImpl<T>& dst, const Shape& dst_shape,
                                  const std::vector<T>& grad_out, const std::vector<T>* scale_data,
                                  const std::vector<std::int64_t>* scale_strides) {
        // dst.grad += grad_out (* scale broadcast), reduced over broadcast axes.
        const auto sd = broadcast_strides(dst_shape, out_shape);
        const int r = static_cast<int>(out_shape.size());
        std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
        std::int64_t id = 0, is = 0;
        const std::int64_t n = static_cast<std::int64_t>(grad_out.size());
        for (std::int64_t i = 0; i < n; ++i) {
            const T s = scale_data ? (*scale_data)[static_cast<std::size_t>(is)] : T(1);
            dst.grad[static_cast<std::size_t>(id)] += grad_out[static_cast<std::size_t>(i)] * s;
            for (int d = r - 1; d >= 0; --d) {
                id += sd[static_cast<std::size_t>(d)];
                if (scale_strides) is += (*scale_strides)[static_cast<std::size_t>(d)];
                if (++idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
                idx[static_cast<std::size_t>(d)] = 0;
                id -= sd[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
                if (scale_strides) is -= (*scale_strides)[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
            }
        }
    };

    autodiff::attach<T>(out, name, {a, b}, [a, b, out_shape, accumulate](TensorImpl<T>& o) {
        auto ai = a.impl();
        auto bi = b.impl();
        const bool same = ai->shape == bi->shape;
        if (ai->needs_grad) {
            autodiff::ensure_grad(*ai);
            if (same) {
                const std::int64_t n = static_cast<std::int64_t>(o.grad.size());
                for (std::int64_t i = 0; i < n; ++i)
                    ai->grad[static_cast<std::size_t>(i)] +=
                        kMul ? o.grad[static_cast<std::size_t>(i)] * bi->data[static_cast<std::size_t>(i)]
                             : o.grad[static_cast<std::size_t>(i)];
            } else if (kMul) {
                const auto sb = broadcast_strides(bi->shape, out_shape);
                accumulate(*ai, ai->shape, o.grad, &bi->data, &sb);
            } else {
                accumulate(*ai, ai->shape, o.grad, nullptr, nullptr);
            }
        }
        if (bi->needs_grad) {
            autodiff::ensure_grad(*bi);
            if (same) {
                const std::int64_t n = static_cast<std::int64_t>(o.grad.size());
                for (std::int64_t i = 0; i < n; ++i)
                    bi->grad[static_cast<std::size_t>(i)] +=
                        kMul ? o.grad[static_cast<std::size_t>(i)] * ai->data[static_cast<std::size_t>(i)]
                             : o.grad[static_cast<std::size_t>(i)];
            } else if (kMul) {
                const auto sa = broadcast_strides(ai->shape, out_shape);
                accumulate(*bi, bi->shape, o.grad, &ai->data, &sa);
            } else {
                accumulate(*bi, bi->shape, o.grad, nullptr, nullptr);
            }
        }
    });
    return out;
}

} // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_broadcast<T, false>("add", a, b);
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    return detail::binary_broadcast<T, true>("mul", a, b);
}

/// Multiply by a compile-time constant scalar.
template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
    TensorT<T> out(x.shape());
    const std::int64_t n = x.numel();
    const T* px = x.ptr();
    T* po = out.ptr();
    for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] * c;
    autodiff::attach<T>(out, "scale", {x}, [x, c](TensorImpl<T>& o) {
        auto xi = x.impl();
        if (!xi->needs_grad) return;
        autodiff::ensure_grad(*xi);
        const std::int64_t n = static_cast<std::int64_t>(o.grad.size());
        for (std::int64_t i = 0; i < n; ++i)
            xi->grad[static_cast<std::size_t>(i)] += o.grad[static_cast<std::size_t>(i)] * c;
    });
    return out;
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
    TensorT<T> out(x.shape());
    const std::int64_t n = x.numel();
    const T* px = x.ptr();
    T* po = out.ptr();
    const T inv_sqrt2 = T(0.70710678118654752440);
    for (std::int64_t i = 0; i < n; ++i)
        po[i] = T(0.5) * px[i] * (T(1) + std::erf(px[i] * inv_sqrt2));
    autodiff::attach<T>(out, "gelu", {x}, [x](TensorImpl<T>& o) {
        auto xi = x.impl();
        if (!xi->needs_grad) return;
        autodiff::ensure_grad(*xi);
        const T inv_sqrt2 = T(0.70710678118654752440);
        const T inv_sqrt2pi = T(0.39894228040143267794);
        const std::int64_t n = static_cast<std::int64_t>(o.grad.size());
        for (std::int64_t i = 0; i < n; ++i) {
            const T z = xi->data[static_cast<std::size_t>(i)];
            const T phi_cdf = T(0.5) * (T(1) + std::erf(z * inv_sqrt2));
            const T phi_pdf = inv_sqrt2pi * std::exp(T(-0.5) * z * z);
            xi->grad[static_cast<std::size_t>(i)] +=
                o.grad[static_cast<std::size_t>(i)] * (phi_cdf + z * phi_pdf);
        }
    });
    return out;
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    TensorT<T> out(x.shape());
    const std::int64_t n = x.numel();
    const T* px = x.ptr();
    T* po = out.ptr();
    for (std::int64_t i = 0; i < n; ++i) {
        const T z = px[i];
        po[i] = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
    }
    autodiff::attach<T>(out, "sigmoid", {x}, [x](TensorImpl<T>& o) {
        auto xi = x.impl();
        if (!xi->needs_grad) return;
        autodiff::ensure_grad(*xi);
        const std::int64_t n = static_cast<std::int64_t>(o.grad.size());
        for (std::int64_t i = 0; i < n; ++i) {
            const T y = o.data[static_cast<std::size_t>(i)];
            xi->grad[static_cast<std::size_t>(i)] += o.grad[static_cast<std::size_t>(i)] * y * (T(1) - y);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Normalisation

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis) {
    const auto runs = detail::axis_runs(x.shape(), axis);
    TensorT<T> out(x.shape());
    const T* px = x.ptr();
    T* po = out.ptr();
    for (std::int64_t o = 0; o < runs.outer; ++o) {
        for (std::int64_t in = 0; in < runs.inner; ++in) {
            const std::int64_t base = o * runs.len * runs.inner + in;
            T mx = px[base];
            for (std::int64_t l = 1; l < runs.len; ++l)
                mx = std::max(mx, px[base + l * runs.inner]);
            T sum = T(0);
            for (std::int64_t l = 0; l < runs.len; ++l) {
                const T e = std::exp(px[base + l * runs.inner] - mx);
                po[base + l * runs.inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::int64_t l = 0; l < runs.len; ++l) po[base + l * runs.inner] *= inv;
        }
    }
    autodiff::attach<T>(out, "softmax", {x}, [x, runs](TensorImpl<T>& o) {
        auto xi = x.impl();
        if (!xi->needs_grad) return;
        autodiff::ensure_grad(*xi);
        for (std::int64_t ou = 0; ou < runs.outer; ++ou) {
            for (std::int64_t in = 0; in < runs.inner; ++in) {
                const std::int64_t base = ou * runs.len * runs.inner + in;
                T dot = T(0);
                for (std::int64_t l = 0; l < runs.len; ++l) {
                    const std::int64_t i = base + l * runs.inner;
                    dot += o.grad[static_cast<std::size_t>(i)] * o.data[static_cast<std::size_t>(i)];
                }
                for (std::int64_t l = 0; l < runs.len; ++l) {
                    const std::int64_t i = base + l * runs.inner;
                    xi->grad[static_cast<std::size_t>(i)] +=
                        o.data[static_cast<std::size_t>(i)] *
                        (o.grad[static_cast<std::size_t>(i)] - dot);
                }
            }
        }
    });
    return out;
}

/// Normalise along `axis`, then scale/shift by gain/bias of that axis length.
template <typename T>
TensorT<T> layer_norm(const TensorT<T>& x, int axis, const TensorT<T>& gain, const TensorT<T>& bias,
                      T eps = T(1e-5)) {
    const auto runs = detail::axis_runs(x.shape(), axis);
    if (gain.numel() != runs.len || bias.numel() != runs.len)
        throw std::invalid_argument("layer_norm: gain/bias must have the axis length " +
                                    std::to_string(runs.len) + ", got " + shape_str(gain.shape()) +
                                    " and " + shape_str(bias.shape()));
    TensorT<T> out(x.shape());
    // Normalised values (pre gain/bias), reused by the backward pass.
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(runs.outer * runs.inner));
    const T* px = x.ptr();
    const T* pg = gain.ptr();
    const T* pb = bias.ptr();
    T* po = out.ptr();
    for (std::int64_t o = 0; o < runs.outer; ++o) {
        for (std::int64_t in = 0; in < runs.inner; ++in) {
            const std::int64_t base = o * runs.len * runs.inner + in;
            T mean = T(0);
            for (std::int64_t l = 0; l < runs.len; ++l) mean += px[base + l * runs.inner];
            mean /= T(runs.len);
            T var = T(0);
            for (std::int64_t l = 0; l < runs.len; ++l) {
                const T d = px[base + l * runs.inner] - mean;
                var += d * d;
            }
            var /= T(runs.len);
            const T istd = T(1) / std::sqrt(var + eps);
            (*inv_std)[static_cast<std::size_t>(o * runs.inner + in)] = istd;
            for (std::int64_t l = 0; l < runs.len; ++l) {
                const std::int64_t i = base + l * runs.inner;
                const T h = (px[i] - mean) * istd;
                (*xhat)[static_cast<std::size_t>(i)] = h;
                po[i] = h * pg[l] + pb[l];
            }
        }
    }
    autodiff::attach<T>(out, "layer_norm", {x, gain, bias},
                        [x, gain, bias, runs, xhat, inv_std](TensorImpl<T>& o) {
        auto xi = x.impl();
        auto gi = gain.impl();
        auto bi = bias.impl();
        if (gi->needs_grad) autodiff::ensure_grad(*gi);
        if (bi->needs_grad) autodiff::ensure_grad(*bi);
        if (xi->needs_grad) autodiff::ensure_grad(*xi);
        const T* pg = gi->data.data();
        for (std::int64_t ou = 0; ou < runs.outer; ++ou) {
            for (std::int64_t in = 0; in < runs.inner; ++in) {
                const std::int64_t base = ou * runs.len * runs.inner + in;
                const T istd = (*inv_std)[static_cast<std::size_t>(ou * runs.inner + in)];
                T mean_gy = T(0), mean_gyh = T(0);
                for (std::int64_t l = 0; l < runs.len; ++l) {
                    const std::int64_t i = base + l * runs.inner;
                    const T gy = o.grad[static_cast<std::size_t>(i)] * pg[l];
                    const T h = (*xhat)[static_cast<std::size_t>(i)];
                    mean_gy += gy;
                    mean_gyh += gy * h;
                    if (gi->needs_grad)
                        gi->grad[static_cast<std::size_t>(l)] +=
                            o.grad[static_cast<std::size_t>(i)] * h;
                    if (bi->needs_grad)
                        bi->grad[static_cast<std::size_t>(l)] += o.grad[static_cast<std::size_t>(i)];
                }
                if (!xi->needs_grad) continue;
                mean_gy /= T(runs.len);
                mean_gyh /= T(runs.len);
                for (std::int64_t l = 0; l < runs.len; ++l) {
                    const std::int64_t i = base + l * runs.inner;
                    const T gy = o.grad[static_cast<std::size_t>(i)] * pg[l];
                    const T h = (*xhat)[static_cast<std::size_t>(i)];
                    xi->grad[static_cast<std::size_t>(i)] += (gy - mean_gy - h * mean_gyh) * istd;
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Convolution

/// 2-d convolution on a single image. x: [Cin, H, W], w: [Cout, Cin, kh, kw],
/// optional bias [Cout]. Zero padding, symmetric stride.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int padding) {
    if (x.rank() != 3 || w.rank() != 4)
        throw std::invalid_argument("conv2d: expected x [C,H,W] and w [Co,Ci,kh,kw], got " +
                                    shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin)
        throw std::invalid_argument("conv2d: channel mismatch, x " + shape_str(x.shape()) + " vs w " +
                                    shape_str(w.shape()));
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
    const int ho = (h + 2 * padding - kh) / stride + 1;
    const int wo = (wd + 2 * padding - kw) / stride + 1;
    if (ho <= 0 || wo <= 0)
        throw std::invalid_argument("conv2d: kernel " + shape_str(w.shape()) +
                                    " does not fit input " + shape_str(x.shape()));
    if (b.defined() && (b.rank() != 1 || b.dim(0) != cout))
        throw std::invalid_argument("conv2d: bias " + shape_str(b.shape()) + " must be [" +
                                    std::to_string(cout) + "]");

    const std::int64_t k_sz = static_cast<std::int64_t>(cin) * kh * kw;
    const std::int64_t m_sz = static_cast<std::int64_t>(ho) * wo;
    auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(k_sz * m_sz), T(0));
    const T* px = x.ptr();
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const std::int64_t row = (static_cast<std::int64_t>(c) * kh + ky) * kw + kx;
                T* dst = cols->data() + row * m_sz;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - padding + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - padding + kx;
                        if (ix < 0 || ix >= wd) continue;
                        dst[static_cast<std::int64_t>(oy) * wo + ox] =
                            px[(static_cast<std::int64_t>(c) * h + iy) * wd + ix];
                    }
                }
            }
        }
    }

    TensorT<T> out({cout, ho, wo});
    gemm<T>(false, false, cout, static_cast<int>(m_sz), static_cast<int>(k_sz), T(1), w.ptr(),
            cols->data(), T(0), out.ptr());
    if (b.defined()) {
        T* po = out.ptr();
        for (int c = 0; c < cout; ++c)
            for (std::int64_t i = 0; i < m_sz; ++i) po[c * m_sz + i] += b.ptr()[c];
    }

    std::vector<TensorT<T>> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    autodiff::attach<T>(out, "conv2d", parents,
                        [x, w, b, cols, cin, h, wd, cout, kh, kw, stride, padding, ho, wo, k_sz,
                         m_sz](TensorImpl<T>& o) {
        auto xi = x.impl();
        auto wi = w.impl();
        const T* g = o.grad.data();
        if (wi->needs_grad) {
            autodiff::ensure_grad(*wi);
            gemm<T>(false, true, cout, static_cast<int>(k_sz), static_cast<int>(m_sz), T(1), g,
                    cols->data(), T(1), wi->grad.data());
        }
        if (b.defined() && b.impl()->needs_grad) {
            auto bi = b.impl();
            autodiff::ensure_grad(*bi);
            for (int c = 0; c < cout; ++c)
                for (std::int64_t i = 0; i < m_sz; ++i)
                    bi->grad[static_cast<std::size_t>(c)] += g[c * m_sz + i];
        }
        if (xi->needs_grad) {
            autodiff::ensure_grad(*xi);
            std::vector<T> gcols(static_cast<std::size_t>(k_sz * m_sz));
            gemm<T>(true, false, static_cast<int>(k_sz), static_cast<int>(m_sz), cout, T(1),
                    wi->data.data(), g, T(0), gcols.data());
            for (int c = 0; c < cin; ++c) {
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        const std::int64_t row = (static_cast<std::int64_t>(c) * kh + ky) * kw + kx;
                        const T* src = gcols.data() + row * m_sz;
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * stride - padding + kx;
                                if (ix < 0 || ix >= wd) continue;
                                xi->grad[static_cast<std::size_t>(
                                    (static_cast<std::int64_t>(c) * h + iy) * wd + ix)] +=
                                    src[static_cast<std::int64_t>(oy) * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    TensorT<T> out = TensorT<T>::scalar(acc);
    autodiff::attach<T>(out, "sum", {x}, [x](TensorImpl<T>& o) {
        auto xi = x.impl();
        if (!xi->needs_grad) return;
        autodiff::ensure_grad(*xi);
        const T g = o.grad[0];
        for (auto& v : xi->grad) v += g;
    });
    return out;
}

template <typename T>
TensorT<T> mean(const TensorT<T>& x) {
    const T inv = T(1) / T(x.numel());
    T acc = T(0);
    for (T v : x.data()) acc += v;
    TensorT<T> out = TensorT<T>::scalar(acc * inv);
    autodiff::attach<T>(out, "mean", {x}, [x, inv](TensorImpl<T>& o) {
        auto xi = x.impl();
        if (!xi->needs_grad) return;
        autodiff::ensure_grad(*xi);
        const T g = o.grad[0] * inv;
        for (auto& v : xi->grad) v += g;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    TensorT<T> out = TensorT<T>::from_data(std::move(shape), x.data());
    autodiff::attach<T>(out, "reshape", {x}, [x](TensorImpl<T>& o) {
        auto xi = x.impl();
        if (!xi->needs_grad) return;
        autodiff::ensure_grad(*xi);
        const std::size_t n = o.grad.size();
        for (std::size_t i = 0; i < n; ++i) xi->grad[i] += o.grad[i];
    });
    return out;
}

namespace detail {

// Permutes data of shape `in_shape` by `perm` into `dst`. When the last axis
// is kept, inner runs are copied contiguously.
template <typename T>
void permute_copy(const T* src, T* dst, const Shape& in_shape, const std::vector<int>& perm,
                  bool accumulate_into_src_layout = false) {
    const int r = static_cast<int>(in_shape.size());
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<std::size_t>(i)] =
            in_strides[static_cast<std::size_t>(i + 1)] * in_shape[static_cast<std::size_t>(i + 1)];
    // stride in the source for each output axis
    std::vector<std::int64_t> src_stride(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) src_stride[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    const bool last_kept = perm[static_cast<std::size_t>(r - 1)] == r - 1;
    const std::int64_t run = last_kept ? out_shape[static_cast<std::size_t>(r - 1)] : 1;
    const int loop_r = last_kept ? r - 1 : r;
    std::int64_t total = 1;
    for (int i = 0; i < loop_r; ++i) total *= out_shape[static_cast<std::size_t>(i)];

    std::vector<std::int64_t> idx(static_cast<std::size_t>(std::max(loop_r, 1)), 0);
    std::int64_t src_off = 0;
    std::int64_t dst_off = 0;
    for (std::int64_t c = 0; c < total; ++c) {
        if (last_kept) {
            if (accumulate_into_src_layout) {
                for (std::int64_t i = 0; i < run; ++i) dst[src_off + i] += src[dst_off + i];
            } else {
                std::copy(src + src_off, src + src_off + run, dst + dst_off);
            }
        } else {
            if (accumulate_into_src_layout) dst[src_off] += src[dst_off];
            else dst[dst_off] = src[src_off];
        }
        dst_off += run;
        for (int d = loop_r - 1; d >= 0; --d) {
            src_off += src_stride[static_cast<std::size_t>(d)];
            if (++idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
            idx[static_cast<std::size_t>(d)] = 0;
            src_off -= src_stride[static_cast<std::size_t>(d)] * out_shape[static_cast<std::size_t>(d)];
        }
    }
}

} // namespace detail

/// Permute axes; perm[i] names the source axis that becomes output axis i.
template <typename T>
TensorT<T> transpose(const TensorT<T>& x, std::vector<int> perm) {
    const int r = x.rank();
    if (static_cast<int>(perm.size()) != r)
        throw std::invalid_argument("transpose: perm size " + std::to_string(perm.size()) +
                                    " != rank of " + shape_str(x.shape()));
    std::vector<bool> seen(static_cast<std::size_t>(r), false);
    for (int p : perm) {
        if (p < 0 || p >= r || seen[static_cast<std::size_t>(p)])
            throw std::invalid_argument("transpose: invalid permutation for " + shape_str(x.shape()));
        seen[static_cast<std::size_t>(p)] = true;
    }
    Shape out_shape(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = x.dim(perm[static_cast<std::size_t>(i)]);
    TensorT<T> out(out_shape);
    detail::permute_copy(x.ptr(), out.ptr(), x.shape(), perm);
    autodiff::attach<T>(out, "transpose", {x}, [x, perm](TensorImpl<T>& o) {
        auto xi = x.impl();
        if (!xi->needs_grad) return;
        autodiff::ensure_grad(*xi);
        detail::permute_copy(o.grad.data(), xi->grad.data(), xi->shape, perm, true);
    });
    return out;
}

/// 2-d matrix transpose shorthand.
template <typename T>
TensorT<T> transpose(const TensorT<T>& x) {
    return transpose(x, {1, 0});
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input list");
    const int r = xs[0].rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("concat: axis out of range");
    Shape out_shape = xs[0].shape();
    for (std::size_t i = 1; i < xs.size(); ++i) {
        Shape s = xs[i].shape();
        if (static_cast<int>(s.size()) != r)
            throw std::invalid_argument("concat: rank mismatch " + shape_str(out_shape) + " vs " +
                                        shape_str(s));
        for (int d = 0; d < r; ++d)
            if (d != axis && s[static_cast<std::size_t>(d)] != out_shape[static_cast<std::size_t>(d)])
                throw std::invalid_argument("concat: shape mismatch " + shape_str(xs[0].shape()) +
                                            " vs " + shape_str(s));
        out_shape[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
    }
    const auto runs = detail::axis_runs(out_shape, axis);
    TensorT<T> out(out_shape);
    T* po = out.ptr();
    std::int64_t off = 0;
    for (const auto& x : xs) {
        const std::int64_t len_i = x.dim(axis);
        const T* px = x.ptr();
        for (std::int64_t o = 0; o < runs.outer; ++o)
            std::copy(px + o * len_i * runs.inner, px + (o + 1) * len_i * runs.inner,
                      po + (o * runs.len + off) * runs.inner);
        off += len_i;
    }
    autodiff::attach<T>(out, "concat", xs, [xs, runs, axis](TensorImpl<T>& o) {
        std::int64_t off = 0;
        for (const auto& x : xs) {
            auto xi = x.impl();
            const std::int64_t len_i = x.dim(axis);
            if (xi->needs_grad) {
                autodiff::ensure_grad(*xi);
                for (std::int64_t ou = 0; ou < runs.outer; ++ou) {
                    const T* src = o.grad.data() + (ou * runs.len + off) * runs.inner;
                    T* dst = xi->grad.data() + ou * len_i * runs.inner;
                    for (std::int64_t i = 0; i < len_i * runs.inner; ++i) dst[i] += src[i];
                }
            }
            off += len_i;
        }
    });
    return out;
}

template <typename T>
TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len) {
    const int r = x.rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) throw std::invalid_argument("slice: axis out of range");
    if (start < 0 || len <= 0 || start + len > x.dim(axis))
        throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of bounds for " +
                                    shape_str(x.shape()));
    const auto runs = detail::axis_runs(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(axis)] = len;
    TensorT<T> out(out_shape);
    const T* px = x.ptr();
    T* po = out.ptr();
    for (std::int64_t o = 0; o < runs.outer; ++o)
        std::copy(px + (o * runs.len + start) * runs.inner,
                  px + (o * runs.len + start + len) * runs.inner, po + o * len * runs.inner);
    autodiff::attach<T>(out, "slice", {x}, [x, runs, start, len](TensorImpl<T>& o) {
        auto xi = x.impl();
        if (!xi->needs_grad) return;
        autodiff::ensure_grad(*xi);
        for (std::int64_t ou = 0; ou < runs.outer; ++ou) {
            const T* src = o.grad.data() + ou * len * runs.inner;
            T* dst = xi->grad.data() + (ou * runs.len + start) * runs.inner;
            for (std::int64_t i = 0; i < len * runs.inner; ++i) dst[i] += src[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Sampling and loss

/// Bilinear read of a [d, H, W] feature map at continuous (row, col)
/// coordinates in feature-grid units. Points outside [0, H-1] x [0, W-1]
/// yield a zero vector. Differentiable in the feature map; coordinates are
/// constants.
template <typename T>
TensorT<T> bilinear_sample(const TensorT<T>& fmap, const std::vector<std::array<T, 2>>& coords) {
    if (fmap.rank() != 3)
        throw std::invalid_argument("bilinear_sample: feature map must be [d, H, W], got " +
                                    shape_str(fmap.shape()));
    if (coords.empty()) throw std::invalid_argument("bilinear_sample: empty coordinate list");
    const int d = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2);
    for (const auto& c : coords)
        if (!std::isfinite(static_cast<double>(c[0])) || !std::isfinite(static_cast<double>(c[1])))
            throw std::invalid_argument("bilinear_sample: non-finite coordinate");
    const int n = static_cast<int>(coords.size());
    TensorT<T> out({n, d});

    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const T* pf = fmap.ptr();
    T* po = out.ptr();
    std::fill(po, po + static_cast<std::int64_t>(n) * d, T(0));
    for (int i = 0; i < n; ++i) {
        const T r = coords[static_cast<std::size_t>(i)][0];
        const T c = coords[static_cast<std::size_t>(i)][1];
        if (r < T(0) || r > T(h - 1) || c < T(0) || c > T(w - 1)) continue;
        const int r0 = std::min(static_cast<int>(r), h - 1);
        const int c0 = std::min(static_cast<int>(c), w - 1);
        const int r1 = std::min(r0 + 1, h - 1);
        const int c1 = std::min(c0 + 1, w - 1);
        const T dr = r - T(r0), dc = c - T(c0);
        const T w00 = (T(1) - dr) * (T(1) - dc), w01 = (T(1) - dr) * dc;
        const T w10 = dr * (T(1) - dc), w11 = dr * dc;
        for (int ch = 0; ch < d; ++ch) {
            const T* base = pf + ch * plane;
            po[static_cast<std::int64_t>(i) * d + ch] =
                w00 * base[r0 * w + c0] + w01 * base[r0 * w + c1] + w10 * base[r1 * w + c0] +
                w11 * base[r1 * w + c1];
        }
    }
    autodiff::attach<T>(out, "bilinear_sample", {fmap}, [fmap, coords, d, h, w, plane](TensorImpl<T>& o) {
        auto fi = fmap.impl();
        if (!fi->needs_grad) return;
        autodiff::ensure_grad(*fi);
        const int n = static_cast<int>(coords.size());
        for (int i = 0; i < n; ++i) {
            const T r = coords[static_cast<std::size_t>(i)][0];
            const T c = coords[static_cast<std::size_t>(i)][1];
            if (r < T(0) || r > T(h - 1) || c < T(0) || c > T(w - 1)) continue;
            const int r0 = std::min(static_cast<int>(r), h - 1);
            const int c0 = std::min(static_cast<int>(c), w - 1);
            const int r1 = std::min(r0 + 1, h - 1);
            const int c1 = std::min(c0 + 1, w - 1);
            const T dr = r - T(r0), dc = c - T(c0);
            const T w00 = (T(1) - dr) * (T(1) - dc), w01 = (T(1) - dr) * dc;
            const T w10 = dr * (T(1) - dc), w11 = dr * dc;
            for (int ch = 0; ch < d; ++ch) {
                const T g = o.grad[static_cast<std::size_t>(static_cast<std::int64_t>(i) * d + ch)];
                T* base = fi->grad.data() + ch * plane;
                base[r0 * w + c0] += g * w00;
                base[r0 * w + c1] += g * w01;
                base[r1 * w + c0] += g * w10;
                base[r1 * w + c1] += g * w11;
            }
        }
    });
    return out;
}

/// Mean binary cross-entropy on logits, numerically stable for |logit| well
/// beyond 50. Positive targets are weighted by pos_weight. Targets must be
/// exactly 0 or 1 and are treated as constants.
template <typename T>
TensorT<T> bce_with_logits(const TensorT<T>& logits, const TensorT<T>& targets, T pos_weight = T(1)) {
    detail::check_same_shape("bce_with_logits", logits.shape(), targets.shape());
    if (pos_weight <= T(0)) throw std::invalid_argument("bce_with_logits: pos_weight must be positive");
    const std::int64_t n = logits.numel();
    const T* pz = logits.ptr();
    const T* py = targets.ptr();
    // softplus(t) = max(t, 0) + log1p(exp(-|t|))
    auto softplus = [](T t) { return std::max(t, T(0)) + std::log1p(std::exp(-std::abs(t))); };
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        const T y = py[i];
        if (y != T(0) && y != T(1))
            throw std::invalid_argument("bce_with_logits: target value " + std::to_string(static_cast<double>(y)) +
                                        " is not binary");
        acc += y == T(1) ? pos_weight * softplus(-pz[i]) : softplus(pz[i]);
    }
    TensorT<T> out = TensorT<T>::scalar(acc / T(n));
    autodiff::attach<T>(out, "bce_with_logits", {logits}, [logits, targets, pos_weight, n](TensorImpl<T>& o) {
        auto zi = logits.impl();
        if (!zi->needs_grad) return;
        autodiff::ensure_grad(*zi);
        const T g = o.grad[0] / T(n);
        const T* pz = zi->data.data();
        const T* py = targets.ptr();
        for (std::int64_t i = 0; i < n; ++i) {
            const T z = pz[i];
            const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
            zi->grad[static_cast<std::size_t>(i)] +=
                g * (py[i] == T(1) ? pos_weight * (s - T(1)) : s);
        }
    });
    return out;
}

} // namespace bev
