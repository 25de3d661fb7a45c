#include "cascade/optim.hpp"

#include <cmath>
#include <numbers>

namespace cascade {

void LRSchedule::validate() const {
    if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
    if (!(cycle_decay > 0 && cycle_decay <= 1)) throw ConfigError("cycle_decay must be in (0, 1]");
    if (!(cycle_len_epochs > 0)) throw ConfigError("cycle_len_epochs must be > 0");
    if (steps_per_epoch < 1) throw ConfigError("steps_per_epoch must be >= 1");
}

double lr_at(const LRSchedule& sched, std::int64_t global_step) {
    if (global_step < 0) throw ConfigError("lr_at: negative step");
    auto cycle_steps = static_cast<std::int64_t>(std::llround(sched.cycle_len_epochs * sched.steps_per_epoch));
    if (cycle_steps < 1) cycle_steps = 1;
    const std::int64_t cycle = global_step / cycle_steps;
    const std::int64_t t = global_step % cycle_steps;
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) /
                                                static_cast<double>(cycle_steps)));
    return sched.base_lr * std::pow(sched.cycle_decay, static_cast<double>(cycle)) * cosine;
}

template <typename T>
void nesterov_update(std::span<T> w, std::span<const T> grad, std::span<T> velocity, double lr,
                     double momentum, double weight_decay) {
    const T lr_t = static_cast<T>(lr), mu = static_cast<T>(momentum), wd = static_cast<T>(weight_decay);
    for (std::size_t i = 0; i < w.size(); ++i) {
        const T g = grad[i] + wd * w[i];
        velocity[i] = mu * velocity[i] + g;
        w[i] -= lr_t * (g + mu * velocity[i]);
    }
}

template <typename T>
void rmsprop_update(std::span<T> w, std::span<const T> grad, std::span<T> square_avg, double lr, double rho,
                    double eps) {
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double g = grad[i];
        square_avg[i] = static_cast<T>(rho * square_avg[i] + (1.0 - rho) * g * g);
        w[i] = static_cast<T>(w[i] - lr * g / (std::sqrt(static_cast<double>(square_avg[i])) + eps));
    }
}

template void nesterov_update(std::span<float>, std::span<const float>, std::span<float>, double, double, double);
template void nesterov_update(std::span<double>, std::span<const double>, std::span<double>, double, double,
                              double);
template void rmsprop_update(std::span<float>, std::span<const float>, std::span<float>, double, double, double);
template void rmsprop_update(std::span<double>, std::span<const double>, std::span<double>, double, double,
                             double);

void Optimizer::step(std::span<Parameter<float>* const> params, double lr) {
    for (Parameter<float>* p : params) {
        if (!p->trainable) continue;
        if (!p->grad.same_shape(p->value))
            throw ShapeError("optimizer: gradient shape mismatch for " + p->name);
        auto [it, fresh] = buffers_.try_emplace(p->name, Tensor<float>::zeros(p->value.shape()));
        if (!it->second.same_shape(p->value)) throw ShapeError("optimizer: buffer shape mismatch for " + p->name);
        if (cfg_.kind == OptimizerKind::sgd_nesterov) {
            nesterov_update<float>(p->value.data(), p->grad.data(), it->second.data(), lr, cfg_.momentum,
                                   p->decay ? cfg_.weight_decay : 0.0);
        } else {
            // decay folded into the gradient, as for SGD
            Tensor<float> g = p->grad;
            if (p->decay)
                for (std::size_t i = 0; i < g.numel(); ++i)
                    g[i] += static_cast<float>(cfg_.weight_decay) * p->value[i];
            rmsprop_update<float>(p->value.data(), g.data(), it->second.data(), lr, cfg_.rho, cfg_.epsilon);
        }
    }
}

}  // namespace cascade
