#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cascade/autodiff.hpp"

namespace cascade {

/// Cosine annealing with warm restarts; each restart scales the peak by
/// `cycle_decay`. lr = base * decay^c * (1 + cos(pi * t / T)) / 2.
struct LRSchedule {
    double base_lr = 0.008;
    double cycle_len_epochs = 5;
    double cycle_decay = 0.9;
    std::int64_t steps_per_epoch = 1;

    void validate() const;
};

double lr_at(const LRSchedule& sched, std::int64_t global_step);

// Elementwise update rules, shared by the weight optimizer and the
// importance-score optimizer.

/// Nesterov momentum with L2 decay folded into the gradient:
///   g' = g + wd * w;  v = mu * v + g';  w -= lr * (g' + mu * v)
template <typename T>
void nesterov_update(std::span<T> w, std::span<const T> grad, std::span<T> velocity, double lr,
                     double momentum, double weight_decay);

///   s = rho * s + (1 - rho) * g^2;  w -= lr * g / (sqrt(s) + eps)
template <typename T>
void rmsprop_update(std::span<T> w, std::span<const T> grad, std::span<T> square_avg, double lr, double rho,
                    double eps);

enum class OptimizerKind { sgd_nesterov, rmsprop };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::sgd_nesterov;
    double momentum = 0.9;
    double weight_decay = 0.0004;
    double rho = 0.9;
    double epsilon = 1e-8;
};

/// Per-parameter buffers keyed by parameter name.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

    /// Applies one update to every trainable parameter in `params` using its
    /// accumulated grad. Weight decay only touches parameters with decay set.
    void step(std::span<Parameter<float>* const> params, double lr);

    const OptimizerConfig& config() const noexcept { return cfg_; }
    std::map<std::string, Tensor<float>>& buffers() noexcept { return buffers_; }
    const std::map<std::string, Tensor<float>>& buffers() const noexcept { return buffers_; }

private:
    OptimizerConfig cfg_;
    std::map<std::string, Tensor<float>> buffers_;
};

}  // namespace cascade
