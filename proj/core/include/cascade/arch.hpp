#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include "cascade/kernels.hpp"
#include "cascade/pruning.hpp"

namespace cascade {

struct ConvDesc {
    std::size_t kernel = 3, in = 0, out = 0, stride = 1;
    Padding padding = Padding::same;
    bool maskable = true;
};

struct DepthwiseConvDesc {
    std::size_t kernel = 3, channels = 0, stride = 1;
    Padding padding = Padding::same;
};

struct DenseDesc {
    std::size_t in = 0, out = 0;
};

struct BatchNormDesc {};
struct ReluDesc {};

enum class PoolKind { max, avg, global };

struct PoolDesc {
    PoolKind kind = PoolKind::max;
    std::size_t kernel = 2, stride = 2;
    Padding padding = Padding::valid;
};

/// Marks the start of the classification head.
struct ClassifierDesc {};

struct Layer;

/// Residual block: `body` runs in sequence and is summed with the shortcut,
/// which is either the identity or a projection conv.
struct BlockDesc {
    std::vector<Layer> body;
    std::vector<Layer> shortcut;  // empty or one ConvDesc
};

struct Layer {
    std::size_t id = 0;  // pre-order position, block headers included
    int line = 0;
    std::string name;
    std::variant<ConvDesc, DepthwiseConvDesc, DenseDesc, BatchNormDesc, ReluDesc, PoolDesc, ClassifierDesc, BlockDesc>
        desc;

    const char* kind() const;
    template <typename D>
    const D* as() const { return std::get_if<D>(&desc); }
};

struct FeatureShape {
    std::size_t c = 0, h = 0, w = 0;
    bool operator==(const FeatureShape&) const = default;
};

struct ArchSpec {
    std::string name;
    FeatureShape input;
    std::vector<Layer> layers;

    /// All conv layers (projection shortcuts included) in pre-order.
    std::vector<const Layer*> conv_layers() const;
    const Layer* find(std::size_t id) const;
};

/// Parses the line-oriented arch format:
///   input c=3 h=32 w=32
///   conv k=3 in=3 out=64 stride=1 pad=same maskable=false
///   block
///     conv k=1 in=64 out=64
///     shortcut k=1 in=64 out=256 stride=1
/// Indented lines belong to the preceding block. Shapes are validated.
ArchSpec parse_arch(std::istream& in);
ArchSpec parse_arch_string(const std::string& text);
ArchSpec load_arch(const std::string& path);
std::string format_arch(const ArchSpec& arch);

struct LayerStats {
    std::size_t layer_id = 0;
    std::string name;
    std::string kind;
    std::int64_t params = 0;
    std::int64_t flops = 0;  // one multiply-accumulate counts as one FLOP
    FeatureShape out;
    std::vector<LayerStats> children;
};

struct Totals {
    std::int64_t params = 0;
    std::int64_t flops = 0;
};

struct ArchStats {
    std::vector<LayerStats> layers;  // top level; blocks carry their children
    Totals totals;
};

/// Counts conv, depthwise and dense weights (no biases). Normalization,
/// pooling, activations and residual adds are free. With a mask, each conv
/// uses its kept output count and the kept output count of the preceding
/// conv as its input width; residual joins take the larger of branch and
/// shortcut.
ArchStats count_stats(const ArchSpec& arch, const FilterMask* mask = nullptr);

struct CompressionReport {
    double param_ratio = 1.0;  // baseline / pruned
    double flops_ratio = 1.0;
    double param_percent = 100.0;  // pruned as a percentage of baseline
    double flops_percent = 100.0;
};

CompressionReport compression_report(const Totals& baseline, const Totals& pruned);

/// "14.98M", "3.85B", "231M" style rendering.
std::string human_count(std::int64_t n, int decimals = 2);

}  // namespace cascade
