#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "cascade/arch.hpp"
#include "cascade/autodiff.hpp"

namespace cascade {

/// Trainable view of an ArchSpec. Supports conv, bn, relu, max/global
/// pooling, dense layers and residual blocks; anything else is rejected.
class Network {
public:
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

    struct ConvInfo {
        std::size_t layer_id;
        ConvDesc desc;
        std::size_t mask_index;  // npos when not maskable
    };
    struct BnInfo {
        std::size_t layer_id;
        std::size_t channels;
    };

    explicit Network(ArchSpec arch);

    const ArchSpec& arch() const noexcept { return arch_; }
    const std::vector<ConvInfo>& convs() const noexcept { return convs_; }
    const std::vector<BnInfo>& bns() const noexcept { return bns_; }
    const std::vector<DenseDesc>& denses() const noexcept { return denses_; }
    /// Conv indices of the maskable layers, in network order.
    const std::vector<std::size_t>& maskable() const noexcept { return maskable_; }
    std::size_t conv_index(std::size_t layer_id) const;
    std::size_t bn_index(std::size_t layer_id) const;
    std::size_t dense_index(std::size_t layer_id) const;
    std::size_t class_count() const { return denses_.back().out; }

    /// Layer ids whose activations feed the hint loss by default: the last
    /// three residual blocks when the net has blocks, else the last three convs.
    std::vector<std::size_t> default_hint_layers() const;
    /// Throws ConfigError if an id is not a top-level conv or block.
    void check_hint_layers(const std::vector<std::size_t>& ids) const;

private:
    ArchSpec arch_;
    std::vector<ConvInfo> convs_;
    std::vector<BnInfo> bns_;
    std::vector<DenseDesc> denses_;
    std::vector<std::size_t> dense_ids_;
    std::vector<std::size_t> maskable_;
};

/// Borrowed parameters of one model. `masks` holds one 0/1 channel scale per
/// maskable conv; when null every conv runs unmasked. A frozen view enters
/// its parameters as graph constants.
struct ModelView {
    std::vector<Parameter<float>*> conv;
    std::vector<BatchNormState<float>*> bn;
    std::vector<Parameter<float>*> dense;
    const std::vector<Tensor<float>>* masks = nullptr;
    bool frozen = false;
};

/// Forward quantities of one masked conv site.
struct MaskSite {
    std::size_t conv_index = 0;
    Var<float> x;     // conv input
    Var<float> conv;  // ungated activation: X*W, or BN(X*W) when a BN follows the conv
    Var<float> out;   // mask * conv
};

struct ForwardOutput {
    Var<float> logits;
    std::vector<Var<float>> hints;
    std::vector<MaskSite> sites;  // one per maskable conv, network order; empty when unmasked
};

struct ForwardOptions {
    Mode mode = Mode::train;
    BatchNormConfig bn;
    const std::vector<std::size_t>* hint_layers = nullptr;
};

/// Records the forward pass of `view` on `images` into `g`. A masked conv is
/// gated after the batch norm that directly follows it, so pruned channels stay
/// exactly zero downstream.
ForwardOutput forward(Graph<float>& g, const Network& net, const ModelView& view, const Tensor<float>& images,
                      const ForwardOptions& opt);

/// Self-contained parameter set of a whole network.
struct StandaloneModel {
    std::vector<Parameter<float>> conv;
    std::vector<BatchNormState<float>> bn;
    std::vector<Parameter<float>> dense;

    /// He-normal convs, 1/sqrt(fan_in) dense, unit BN scale.
    static StandaloneModel init(const Network& net, std::uint64_t seed);
    ModelView view(bool frozen = false);
    std::vector<Parameter<float>*> parameters();
};

/// Index of the largest logit per row; ties go to the lower class.
std::vector<int> argmax_rows(const Tensor<float>& logits);

}  // namespace cascade
