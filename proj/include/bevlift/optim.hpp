// Copyright (c) 2026 The bevlift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "bevlift/tensor.hpp"

namespace bev {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay. Holds first/second moments only for
/// trainable parameters; frozen parameters are never read or written.
class AdamW {
public:
    AdamW(const std::vector<Parameter>& params, AdamWConfig cfg = {}) : cfg_(cfg) {
        if (cfg.beta1 < 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 < 0.0 || cfg.beta2 >= 1.0)
            throw std::invalid_argument("adamw: betas must lie in [0, 1)");
        if (cfg.eps <= 0.0 || cfg.weight_decay < 0.0)
            throw std::invalid_argument("adamw: eps must be positive, weight_decay non-negative");
        for (const auto& p : params) {
            if (!p.trainable) continue;
            slots_.push_back(Slot{p.value,
                                  std::vector<float>(static_cast<std::size_t>(p.value.numel()), 0.0f),
                                  std::vector<float>(static_cast<std::size_t>(p.value.numel()), 0.0f)});
        }
    }

    /// One update with the given learning rate. Parameters whose gradient was
    /// not populated this step are treated as having zero gradient.
    void step(double lr) {
        ++step_count_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        for (auto& s : slots_) {
            float* w = s.value.ptr();
            const bool has_grad = s.value.has_grad();
            const float* g = has_grad ? s.value.grad().data() : nullptr;
            const std::int64_t n = s.value.numel();
            for (std::int64_t i = 0; i < n; ++i) {
                const double gi = g ? static_cast<double>(g[i]) : 0.0;
                double m = cfg_.beta1 * s.m[static_cast<std::size_t>(i)] + (1.0 - cfg_.beta1) * gi;
                double v = cfg_.beta2 * s.v[static_cast<std::size_t>(i)] + (1.0 - cfg_.beta2) * gi * gi;
                s.m[static_cast<std::size_t>(i)] = static_cast<float>(m);
                s.v[static_cast<std::size_t>(i)] = static_cast<float>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                double wi = static_cast<double>(w[i]);
                wi -= lr * cfg_.weight_decay * wi;
                wi -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                w[i] = static_cast<float>(wi);
            }
        }
    }

    std::int64_t step_count() const { return step_count_; }
    std::size_t slot_count() const { return slots_.size(); }

private:
    struct Slot {
        Tensor value;
        std::vector<float> m, v;
    };

    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    std::int64_t step_count_ = 0;
};

/// One-cycle learning rate: cosine ramp from max_lr/initial_div up to max_lr
/// over the warmup fraction, then cosine anneal down to
/// (max_lr/initial_div)/final_div. Continuous in the step index.
struct OneCycleSchedule {
    double max_lr = 1e-3;
    std::int64_t total_steps = 1;
    double warmup_fraction = 0.3;
    double initial_div = 25.0;
    double final_div = 1e4;

    OneCycleSchedule() = default;
    OneCycleSchedule(double max_lr_, std::int64_t total_steps_, double warmup_fraction_ = 0.3,
                     double initial_div_ = 25.0, double final_div_ = 1e4)
        : max_lr(max_lr_), total_steps(total_steps_), warmup_fraction(warmup_fraction_),
          initial_div(initial_div_), final_div(final_div_) {
        if (max_lr <= 0.0 || total_steps <= 0 || warmup_fraction <= 0.0 || warmup_fraction >= 1.0 ||
            initial_div <= 1.0 || final_div <= 1.0)
            throw std::invalid_argument("one_cycle: invalid schedule parameters");
    }

    double lr(double step) const {
        const double initial = max_lr / initial_div;
        const double floor_lr = initial / final_div;
        const double warm = warmup_fraction * static_cast<double>(total_steps);
        if (step <= 0.0) return initial;
        if (step >= static_cast<double>(total_steps)) return floor_lr;
        constexpr double kPi = 3.14159265358979323846;
        if (step <= warm) {
            const double t = step / warm;
            return initial + (max_lr - initial) * 0.5 * (1.0 - std::cos(kPi * t));
        }
        const double t = (step - warm) / (static_cast<double>(total_steps) - warm);
        return floor_lr + (max_lr - floor_lr) * 0.5 * (1.0 + std::cos(kPi * t));
    }
};

} // namespace bev
