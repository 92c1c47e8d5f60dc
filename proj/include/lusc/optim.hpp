#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lusc/model.hpp"
#include "lusc/tensor.hpp"

namespace lusc {

// theta <- theta - eta * (grad + lambda * theta); decoupled weight decay.
template <class S>
void sgd_step(std::vector<NamedParam<S>>& params, const GradientMap<S>& grads, S lr,
              S weight_decay) {
    for (auto& p : params) {
        auto g = grads.grad(p.tensor);
        auto& theta = p.tensor.mutable_data();
        const auto& gv = g.data();
        for (std::size_t i = 0; i < theta.size(); ++i)
            theta[i] -= lr * (gv[i] + weight_decay * theta[i]);
    }
}

template <class S>
struct AdamState {
    std::uint64_t step = 0;
    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;

    static AdamState init(const std::vector<NamedParam<S>>& params) {
        AdamState s;
        for (const auto& p : params) {
            s.m.emplace_back(p.tensor.size(), S(0));
            s.v.emplace_back(p.tensor.size(), S(0));
        }
        return s;
    }
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Bias-corrected moment update with decoupled weight decay.
template <class S>
void adam_step(std::vector<NamedParam<S>>& params, const GradientMap<S>& grads,
               AdamState<S>& state, S lr, S beta1, S beta2, S eps, S weight_decay) {
    state.step += 1;
    S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta1),
                                           static_cast<double>(state.step)));
    S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(beta2),
                                           static_cast<double>(state.step)));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto g = grads.grad(params[pi].tensor);
        auto& theta = params[pi].tensor.mutable_data();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        const auto& gv = g.data();
        for (std::size_t i = 0; i < theta.size(); ++i) {
            m[i] = beta1 * m[i] + (S(1) - beta1) * gv[i];
            v[i] = beta2 * v[i] + (S(1) - beta2) * gv[i] * gv[i];
            S mhat = m[i] / bc1;
            S vhat = v[i] / bc2;
            theta[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * theta[i]);
        }
    }
}

enum class LrScheduleKind { kConstant, kStep, kCosine };

struct LrSchedule {
    LrScheduleKind kind = LrScheduleKind::kConstant;
    double step_factor = 0.1;
    int step_every = 20;
};

// Learning rate for a zero-based epoch index.
inline double lr_at(double base_lr, const LrSchedule& schedule, int epoch, int max_epochs) {
    switch (schedule.kind) {
        case LrScheduleKind::kConstant:
            return base_lr;
        case LrScheduleKind::kStep:
            return base_lr * std::pow(schedule.step_factor, epoch / schedule.step_every);
        case LrScheduleKind::kCosine: {
            if (max_epochs <= 1) return base_lr;
            double t = static_cast<double>(epoch) / static_cast<double>(max_epochs);
            return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * t));
        }
    }
    return base_lr;
}

}  // namespace lusc
