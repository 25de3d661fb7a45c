#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "cascade/autodiff.hpp"
#include "cascade/optim.hpp"

namespace cascade {

/// Conv layer that never receives a mask (e.g. the stem); always all-ones.
struct ExcludedLayer {
    std::size_t layer_id = 0;
    std::size_t filters = 0;
};

struct LayerScores {
    std::size_t layer_id = 0;
    std::vector<double> gamma;
};

/// Per-filter importance scores of every maskable conv layer, in network order.
struct ImportanceScores {
    std::vector<LayerScores> layers;
    std::vector<ExcludedLayer> excluded;

    std::size_t total_filters() const;
    void validate() const;
};

struct LayerMask {
    std::size_t layer_id = 0;
    bool maskable = true;
    std::vector<std::uint8_t> keep;

    std::size_t kept() const;
    bool operator==(const LayerMask&) const = default;
};

struct FilterMask {
    std::vector<LayerMask> layers;

    const LayerMask* find(std::size_t layer_id) const;
    std::size_t kept_maskable() const;
    std::size_t total_maskable() const;
    /// Number of maskable filters whose bit differs; layers must line up.
    std::size_t hamming(const FilterMask& other) const;
    bool operator==(const FilterMask&) const = default;
};

/// Keep ratio is the fraction of maskable filters retained.
struct PruneConfig {
    double keep_ratio = 1.0;
    std::size_t min_filters_per_layer = 1;

    void validate() const;
    static PruneConfig from_prune_ratio(double p) { return PruneConfig{1.0 - p, 1}; }
};

/// round(keep_ratio * F) for F maskable filters.
std::size_t keep_count(double keep_ratio, std::size_t total_filters);

/// Global top-k threshold over all maskable layers. Ties prefer the lower
/// layer, then the lower filter index. Layers left under the per-layer floor
/// are repaired by swapping in their best filters against the globally
/// weakest kept filters of layers above the floor, so the kept count is exact.
FilterMask build_mask(const ImportanceScores& scores, const PruneConfig& cfg);

/// Mask vector as a 0/1 channel scale for channel_scale().
template <typename T>
Tensor<T> mask_tensor(const LayerMask& mask);

/// conv2d(x, w) with output channel n zeroed where mask[n] == 0.
template <typename T>
Tensor<T> masked_conv2d(const Tensor<T>& x, const Tensor<T>& w, const LayerMask& mask, long stride,
                        Padding padding);

/// Graph form. `conv` is the unmasked X*W, `out` the masked result whose
/// gradient is the dL/dY of the score update.
template <typename T>
struct MaskedConv {
    Var<T> conv;
    Var<T> out;
};

template <typename T>
MaskedConv<T> masked_conv2d(Var<T> x, Var<T> w, const Tensor<T>& mask, long stride, Padding padding);

/// Straight-through score gradient g[n] = sum over batch and space of
/// dL/dY[., n, ., .] * (X*W)[., n, ., .]. Uses the unmasked product, so
/// currently pruned filters still receive a signal.
template <typename T>
std::vector<double> surrogate_gamma_grad(const Tensor<T>& dl_dy, const Tensor<T>& x, const Tensor<T>& w,
                                         long stride, Padding padding);

/// Same reduction with the unmasked conv output already at hand.
template <typename T>
std::vector<double> surrogate_gamma_grad(const Tensor<T>& dl_dy, const Tensor<T>& conv_out);

enum class ScoreOptimizerKind { sgd, rmsprop };

struct ScoreOptimizer {
    ScoreOptimizerKind kind = ScoreOptimizerKind::sgd;
    double lr = 0.1;
    double rho = 0.9;
    double epsilon = 1e-8;
    /// RMSProp second moments, one per layer; created on first use.
    std::vector<std::vector<double>> square_avg;
};

/// Gradient step on the scores. Scores never receive weight decay. The mask
/// is not rebuilt here.
ImportanceScores apply_gamma_update(const ImportanceScores& scores, const std::vector<std::vector<double>>& grads,
                                    ScoreOptimizer& opt, double lr_scale = 1.0);

/// Per-filter L1 norms of a K,K,C_in,C_out weight, scaled to unit mean.
std::vector<double> l1_filter_scores(const Tensor<float>& weight);

}  // namespace cascade
