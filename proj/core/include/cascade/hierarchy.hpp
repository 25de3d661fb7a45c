#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include "cascade/network.hpp"
#include "cascade/pruning.hpp"

namespace cascade {

/// [r0, 1 + (r0-1)/d for each divisor, 1.0]; throws ConfigError unless the
/// result is strictly increasing.
std::vector<double> derive_ta_keep_ratios(double r0, const std::vector<double>& divisors);

struct ModelSlot {
    double keep_ratio = 1.0;
    Parameter<float> first_conv;
    std::vector<BatchNormState<float>> bn;
    std::vector<Parameter<float>> dense;
    std::optional<ImportanceScores> scores;  // absent on the top slot
    FilterMask mask;
    std::vector<Tensor<float>> mask_tensors;  // per maskable conv
    ScoreOptimizer score_opt;
};

struct HierarchyConfig {
    std::vector<double> keep_ratios;  // student first, last must be 1.0
    std::size_t min_filters_per_layer = 1;
    ScoreOptimizer score_optimizer;
};

/// Weight-shared models over one network. Every conv except the first is a
/// single shared Parameter; each slot owns its first conv, BN layers,
/// classifier, scores and mask. The frozen teacher is a private copy of the
/// pre-trained model.
class ModelHierarchy {
public:
    ModelHierarchy(Network net, const StandaloneModel& pretrained, const HierarchyConfig& cfg);

    const Network& net() const noexcept { return net_; }
    std::size_t size() const noexcept { return slots_.size(); }
    ModelSlot& slot(std::size_t i) { return slots_.at(i); }
    const ModelSlot& slot(std::size_t i) const { return slots_.at(i); }
    std::vector<Parameter<float>>& shared_conv() noexcept { return shared_; }
    const std::vector<Parameter<float>>& shared_conv() const noexcept { return shared_; }
    StandaloneModel& frozen() noexcept { return frozen_; }
    const StandaloneModel& frozen() const noexcept { return frozen_; }
    std::size_t min_filters_per_layer() const noexcept { return min_filters_; }

    ModelView view(std::size_t i);
    ModelView frozen_view() { return frozen_.view(true); }
    /// Shared conv weight of conv index `ci` (ci >= 1).
    Parameter<float>& shared(std::size_t ci) { return shared_.at(ci - 1); }
    const Parameter<float>& shared(std::size_t ci) const { return shared_.at(ci - 1); }

    std::vector<Parameter<float>*> shared_parameters();
    /// First conv, BN scale/offset, classifier of one slot.
    std::vector<Parameter<float>*> slot_parameters(std::size_t i);

    /// Rebuilds the cached 0/1 tensors after a mask change.
    void sync_mask_tensors(std::size_t i);

private:
    Network net_;
    std::vector<Parameter<float>> shared_;
    std::vector<ModelSlot> slots_;
    StandaloneModel frozen_;
    std::size_t min_filters_;
};

struct SlotPass {
    std::unique_ptr<Graph<float>> graph;
    ForwardOutput out;
};

struct HierarchyPass {
    std::vector<SlotPass> slots;
    Tensor<float> frozen_logits;
    std::vector<Tensor<float>> frozen_hints;
};

struct ForwardAllOptions {
    ForwardOptions forward;
    bool with_frozen = true;
};

/// One graph per slot, in slot order, plus the frozen teacher's outputs as values.
HierarchyPass forward_all(ModelHierarchy& h, const Tensor<float>& images, const ForwardAllOptions& opt);

/// Saved tensors of one masked conv after backward.
struct LayerContext {
    std::size_t layer_id = 0;
    Tensor<float> x;
    Tensor<float> w;
    Tensor<float> conv;   // ungated activation at the gate (see MaskSite)
    Tensor<float> dl_dy;  // gradient at the gated output
    long stride = 1;
    Padding padding = Padding::same;
};

struct SlotContext {
    std::vector<LayerContext> layers;
};

/// Copies every slot's masked-conv tensors; call after each slot's backward.
std::vector<SlotContext> capture_contexts(const ModelHierarchy& h, const HierarchyPass& pass);

/// Score gradient for every slot with scores: slot i's gradient is the
/// straight-through reduction over slot i+1's saved context. With
/// `own_gradient` slot i's own reduction is added. Entry N-1 is empty.
std::vector<std::vector<std::vector<double>>> route_gamma_gradients(const ModelHierarchy& h,
                                                                   const std::vector<SlotContext>& contexts,
                                                                   bool own_gradient = false);

void apply_score_updates(ModelHierarchy& h, const std::vector<std::vector<std::vector<double>>>& grads,
                         double lr_scale);

/// Rebuilds every scored slot's mask at its keep ratio.
void refresh_masks(ModelHierarchy& h);

}  // namespace cascade
