// Copyright (c) 2026 The bevlift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "bevlift/ops.hpp"
#include "bevlift/rng.hpp"
#include "bevlift/tensor.hpp"

namespace bevtest {

template <typename T>
bev::TensorT<T> random_tensor(bev::Shape shape, bev::Rng& rng, double lo = -1.0, double hi = 1.0) {
    bev::TensorT<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

/// Central-difference gradient of a scalar-valued closure with respect to x.
/// The closure must rebuild its graph from the current contents of x.
template <typename T>
std::vector<T> numeric_grad(const std::function<bev::TensorT<T>()>& forward, bev::TensorT<T>& x, T h) {
    bev::autodiff::NoGradGuard ng;
    std::vector<T> grad(static_cast<std::size_t>(x.numel()));
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const T orig = x.data()[static_cast<std::size_t>(i)];
        x.data()[static_cast<std::size_t>(i)] = orig + h;
        const T fp = forward().item();
        x.data()[static_cast<std::size_t>(i)] = orig - h;
        const T fm = forward().item();
        x.data()[static_cast<std::size_t>(i)] = orig;
        grad[static_cast<std::size_t>(i)] = (fp - fm) / (T(2) * h);
    }
    return grad;
}

/// Runs backward once and compares every input's analytic gradient against
/// central differences. Returns the worst mixed abs/rel discrepancy ratio
/// (<= 1 means within tolerance).
template <typename T>
double check_gradients(const std::function<bev::TensorT<T>()>& forward,
                       std::vector<bev::TensorT<T>> inputs, T h, double rtol, double atol) {
    for (auto& x : inputs) x.set_requires_grad(true);
    auto loss = forward();
    bev::backward(loss);
    double worst = 0.0;
    for (auto& x : inputs) {
        const auto num = numeric_grad<T>(forward, x, h);
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            const double a = static_cast<double>(x.grad()[static_cast<std::size_t>(i)]);
            const double n = static_cast<double>(num[static_cast<std::size_t>(i)]);
            const double tol = rtol * std::max(std::abs(a), std::abs(n)) + atol;
            worst = std::max(worst, std::abs(a - n) / tol);
        }
    }
    return worst;
}

} // namespace bevtest
