#include "cascade/distill.hpp"

#include <string>

namespace cascade {

void DistillConfig::validate() const {
    if (!(tau > 0)) throw ConfigError("tau must be > 0");
    if (lambda_kd < 0 || lambda_hint < 0) throw ConfigError("distillation weights must be >= 0");
    if (complement_task_weight && lambda_kd > 1) throw ConfigError("lambda_kd must be <= 1 with complement weighting");
}

template <typename T>
Var<T> hint_loss(std::span<const Var<T>> student_maps, std::span<const Tensor<T>> teacher_maps) {
    if (student_maps.size() != teacher_maps.size())
        throw ShapeError("hint_loss: " + std::to_string(student_maps.size()) + " student maps vs " +
                         std::to_string(teacher_maps.size()) + " teacher maps");
    if (student_maps.empty()) throw ShapeError("hint_loss needs at least one feature-map pair");
    Var<T> acc = mse_loss(student_maps[0], teacher_maps[0]);
    for (std::size_t i = 1; i < student_maps.size(); ++i) acc = add(acc, mse_loss(student_maps[i], teacher_maps[i]));
    return student_maps.size() == 1 ? acc : scale(acc, T(1) / static_cast<T>(student_maps.size()));
}

template <typename T>
SlotLoss<T> slot_loss(Var<T> logits, std::span<const Var<T>> hints, const Tensor<T>& one_hot,
                      const TeacherSignal<T>& teacher, const DistillConfig& cfg) {
    SlotLoss<T> out;
    Var<T> task = softmax_cross_entropy(logits, one_hot);
    out.task = task.value()[0];
    if (!teacher.logits) {
        out.total = task;
        return out;
    }
    const double task_weight = cfg.complement_task_weight ? 1.0 - cfg.lambda_kd : 1.0;
    out.total = task_weight == 1.0 ? task : scale(task, static_cast<T>(task_weight));

    Var<T> kd = kd_loss(logits, *teacher.logits, static_cast<T>(cfg.tau));
    out.kd = kd.value()[0];
    if (cfg.lambda_kd != 0) out.total = add(out.total, scale(kd, static_cast<T>(cfg.lambda_kd)));

    if (!hints.empty()) {
        Var<T> h = hint_loss(hints, teacher.hints);
        out.hint = h.value()[0];
        if (cfg.lambda_hint != 0) out.total = add(out.total, scale(h, static_cast<T>(cfg.lambda_hint)));
    }
    return out;
}

template Var<float> hint_loss(std::span<const Var<float>>, std::span<const Tensor<float>>);
template Var<double> hint_loss(std::span<const Var<double>>, std::span<const Tensor<double>>);
template SlotLoss<float> slot_loss(Var<float>, std::span<const Var<float>>, const Tensor<float>&,
                                   const TeacherSignal<float>&, const DistillConfig&);
template SlotLoss<double> slot_loss(Var<double>, std::span<const Var<double>>, const Tensor<double>&,
                                    const TeacherSignal<double>&, const DistillConfig&);

}  // namespace cascade
