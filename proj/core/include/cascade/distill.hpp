#pragma once

#include <span>
#include <vector>

#include "cascade/autodiff.hpp"

namespace cascade {

struct DistillConfig {
    double tau = 15.0;
    double lambda_kd = 0.4;
    double lambda_hint = 0.001;
    /// Weight the task term by (1 - lambda_kd) instead of 1.
    bool complement_task_weight = false;

    void validate() const;
};

/// Mean over pairs of the per-pair mean squared error; teacher maps are
/// constants. Pairing is positional.
template <typename T>
Var<T> hint_loss(std::span<const Var<T>> student_maps, std::span<const Tensor<T>> teacher_maps);

template <typename T>
struct SlotLoss {
    Var<T> total;
    double task = 0;
    double kd = 0;
    double hint = 0;
};

/// What a slot is distilled from. Tensors are plain values, so nothing
/// flows back into the teacher.
template <typename T>
struct TeacherSignal {
    const Tensor<T>* logits = nullptr;
    std::span<const Tensor<T>> hints;
};

/// task + lambda_kd * kd + lambda_hint * hint. Without a teacher the loss is
/// the task term alone. Zero-weighted terms are reported but not added to the graph.
template <typename T>
SlotLoss<T> slot_loss(Var<T> logits, std::span<const Var<T>> hints, const Tensor<T>& one_hot,
                      const TeacherSignal<T>& teacher, const DistillConfig& cfg);

}  // namespace cascade
