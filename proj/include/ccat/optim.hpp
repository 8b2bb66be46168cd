#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "ccat/blocks.hpp"
#include "ccat/errors.hpp"

namespace ccat {

struct OptimizerConfig {
    double lr0 = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int64_t batch = 5;

    void validate() const {
        if (lr0 <= 0) throw ParameterError("optimizer: lr0 must be positive");
        if (momentum < 0 || momentum >= 1) throw ParameterError("optimizer: momentum must lie in [0,1)");
        if (weight_decay < 0) throw ParameterError("optimizer: negative weight decay");
        if (batch < 1) throw ParameterError("optimizer: batch must be at least 1");
    }
};

struct ScheduleConfig {
    int64_t warmup_steps = 0;
    int64_t total_steps = 1;
    double poly_power = 0.9;

    void validate() const {
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw ParameterError("schedule: need 0 <= warmup_steps < total_steps");
        if (poly_power <= 0) throw ParameterError("schedule: poly_power must be positive");
    }
};

// Linear warmup from 0 to lr0, then polynomial decay to 0 at total_steps.
inline double lr_at(int64_t step, const OptimizerConfig& oc, const ScheduleConfig& sc) {
    oc.validate();
    sc.validate();
    if (step < 0 || step > sc.total_steps) throw ParameterError("lr_at: step out of [0, total_steps]");
    if (step < sc.warmup_steps) return oc.lr0 * double(step) / double(sc.warmup_steps);
    const double prog = double(step - sc.warmup_steps) / double(sc.total_steps - sc.warmup_steps);
    return oc.lr0 * std::pow(1.0 - prog, sc.poly_power);
}

// Same-structure copy with every tensor zeroed; used for momentum buffers.
template <typename T>
ModelParamsT<T> zeros_like(const ModelParamsT<T>& params) {
    ModelParamsT<T> out;
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& e = params.entry(i);
        out.add(e.name, TensorT<T>(e.value.shape), e.trainable, e.decay);
    }
    return out;
}

// SGD with momentum and decoupled-skip weight decay:
//   buffer <- momentum * buffer + (grad + wd * param); param <- param - lr * buffer.
// Decay is skipped for entries registered with decay=false (normalization
// scale/shift and biases). Parameters without a gradient on this tape are
// left untouched.
template <typename T>
void sgd_step(ModelParamsT<T>& params, ModelParamsT<T>& momentum, const SessionT<T>& s, double lr,
              const OptimizerConfig& oc) {
    oc.validate();
    if (!params.same_names(momentum)) throw StateError("sgd_step: momentum buffers do not match parameters");
    for (size_t i = 0; i < params.size(); ++i) {
        auto& e = params.entry(i);
        if (!e.trainable) continue;
        const TensorT<T>* g = s.grad(e.name);
        if (!g) continue;
        auto& buf = momentum.entry(i).value;
        const double wd = e.decay ? oc.weight_decay : 0.0;
        for (int64_t j = 0; j < e.value.numel(); ++j) {
            const double gj = static_cast<double>((*g)[j]);
            if (!std::isfinite(gj)) throw NumericError("sgd_step: non-finite gradient in " + e.name);
            const double b = oc.momentum * static_cast<double>(buf[j]) + (gj + wd * static_cast<double>(e.value[j]));
            buf[j] = static_cast<T>(b);
            e.value[j] = static_cast<T>(static_cast<double>(e.value[j]) - lr * b);
        }
    }
}

}  // namespace ccat
