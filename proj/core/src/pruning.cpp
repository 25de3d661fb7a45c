#include "cascade/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace cascade {

std::size_t ImportanceScores::total_filters() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.gamma.size();
    return n;
}

void ImportanceScores::validate() const {
    for (const auto& l : layers) {
        if (l.gamma.empty()) throw ConfigError("layer " + std::to_string(l.layer_id) + " has no filters");
        for (double v : l.gamma)
            if (!std::isfinite(v))
                throw ConfigError("non-finite importance score in layer " + std::to_string(l.layer_id));
    }
}

std::size_t LayerMask::kept() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

const LayerMask* FilterMask::find(std::size_t layer_id) const {
    for (const auto& l : layers)
        if (l.layer_id == layer_id) return &l;
    return nullptr;
}

std::size_t FilterMask::kept_maskable() const {
    std::size_t n = 0;
    for (const auto& l : layers)
        if (l.maskable) n += l.kept();
    return n;
}

std::size_t FilterMask::total_maskable() const {
    std::size_t n = 0;
    for (const auto& l : layers)
        if (l.maskable) n += l.keep.size();
    return n;
}

std::size_t FilterMask::hamming(const FilterMask& other) const {
    if (layers.size() != other.layers.size()) throw ShapeError("hamming: masks cover different layers");
    std::size_t d = 0;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& a = layers[i].keep;
        const auto& b = other.layers[i].keep;
        if (a.size() != b.size()) throw ShapeError("hamming: layer size mismatch");
        for (std::size_t j = 0; j < a.size(); ++j) d += a[j] != b[j];
    }
    return d;
}

void PruneConfig::validate() const {
    if (!(keep_ratio > 0.0 && keep_ratio <= 1.0))
        throw ConfigError("keep_ratio must be in (0, 1], got " + std::to_string(keep_ratio));
    if (min_filters_per_layer < 1) throw ConfigError("min_filters_per_layer must be >= 1");
}

std::size_t keep_count(double keep_ratio, std::size_t total_filters) {
    return static_cast<std::size_t>(std::llround(keep_ratio * static_cast<double>(total_filters)));
}

namespace {

struct Slot {
    double score;
    std::size_t layer;
    std::size_t index;
};

// Keep-preference order: larger score, then lower layer, then lower index.
bool keep_before(const Slot& a, const Slot& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.index < b.index;
}

}  // namespace

FilterMask build_mask(const ImportanceScores& scores, const PruneConfig& cfg) {
    cfg.validate();
    scores.validate();
    const std::size_t L = scores.layers.size();
    const std::size_t total = scores.total_filters();
    const std::size_t n_keep = keep_count(cfg.keep_ratio, total);

    std::vector<std::size_t> floor(L);
    std::size_t floor_sum = 0;
    for (std::size_t l = 0; l < L; ++l) {
        floor[l] = std::min(cfg.min_filters_per_layer, scores.layers[l].gamma.size());
        floor_sum += floor[l];
    }
    if (n_keep < floor_sum)
        throw ConfigError("keep ratio " + std::to_string(cfg.keep_ratio) + " keeps " + std::to_string(n_keep) +
                          " filters, below the per-layer floor total " + std::to_string(floor_sum));

    std::vector<Slot> order;
    order.reserve(total);
    for (std::size_t l = 0; l < L; ++l)
        for (std::size_t i = 0; i < scores.layers[l].gamma.size(); ++i)
            order.push_back({scores.layers[l].gamma[i], l, i});
    std::sort(order.begin(), order.end(), keep_before);

    std::vector<std::vector<std::uint8_t>> keep(L);
    std::vector<std::size_t> kept(L, 0);
    for (std::size_t l = 0; l < L; ++l) keep[l].assign(scores.layers[l].gamma.size(), 0);
    for (std::size_t k = 0; k < n_keep; ++k) {
        keep[order[k].layer][order[k].index] = 1;
        ++kept[order[k].layer];
    }

    // Floor repair, lowest layer first.
    for (std::size_t l = 0; l < L; ++l) {
        while (kept[l] < floor[l]) {
            const auto& g = scores.layers[l].gamma;
            std::size_t best = g.size();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (!keep[l][i] && (best == g.size() || g[i] > g[best])) best = i;
            // globally weakest kept filter among layers that can spare one
            const Slot* victim = nullptr;
            for (auto it = order.rbegin(); it != order.rend(); ++it) {
                if (it->layer == l || !keep[it->layer][it->index] || kept[it->layer] <= floor[it->layer]) continue;
                victim = &*it;
                break;
            }
            if (!victim || best == g.size()) throw ConfigError("mask repair failed: no filter available to swap");
            keep[l][best] = 1;
            ++kept[l];
            keep[victim->layer][victim->index] = 0;
            --kept[victim->layer];
        }
    }

    FilterMask mask;
    std::size_t li = 0, ei = 0;
    // merge maskable and excluded layers in layer-id order
    while (li < L || ei < scores.excluded.size()) {
        const bool take_excluded =
            ei < scores.excluded.size() && (li == L || scores.excluded[ei].layer_id < scores.layers[li].layer_id);
        if (take_excluded) {
            const auto& e = scores.excluded[ei++];
            mask.layers.push_back({e.layer_id, false, std::vector<std::uint8_t>(e.filters, 1)});
        } else {
            mask.layers.push_back({scores.layers[li].layer_id, true, std::move(keep[li])});
            ++li;
        }
    }
    return mask;
}

template <typename T>
Tensor<T> mask_tensor(const LayerMask& mask) {
    Tensor<T> t({mask.keep.size()});
    for (std::size_t i = 0; i < mask.keep.size(); ++i) t[i] = mask.keep[i] ? T(1) : T(0);
    return t;
}

template <typename T>
Tensor<T> masked_conv2d(const Tensor<T>& x, const Tensor<T>& w, const LayerMask& mask, long stride,
                        Padding padding) {
    const auto geo = conv_geometry(x.shape(), w.shape(), stride, padding);
    if (mask.keep.size() != geo.out_c)
        throw ShapeError("mask length " + std::to_string(mask.keep.size()) + " does not match " +
                         std::to_string(geo.out_c) + " filters");
    Tensor<T> y = conv2d_forward(x, w, geo);
    const std::size_t plane = geo.out_pixels();
    for (std::size_t n = 0; n < geo.batch; ++n)
        for (std::size_t c = 0; c < geo.out_c; ++c) {
            if (mask.keep[c]) continue;
            T* p = y.data().data() + (n * geo.out_c + c) * plane;
            std::fill(p, p + plane, T(0));
        }
    return y;
}

template <typename T>
MaskedConv<T> masked_conv2d(Var<T> x, Var<T> w, const Tensor<T>& mask, long stride, Padding padding) {
    if (w.shape().size() != 4 || mask.numel() != w.shape()[3])
        throw ShapeError("mask length " + std::to_string(mask.numel()) + " does not match weight " +
                         shape_str(w.shape()));
    auto z = conv2d(x, w, stride, padding);
    return {z, channel_scale(z, mask)};
}

template <typename T>
std::vector<double> surrogate_gamma_grad(const Tensor<T>& dl_dy, const Tensor<T>& conv_out) {
    if (dl_dy.rank() != 4 || dl_dy.shape() != conv_out.shape())
        throw ShapeError("surrogate_gamma_grad: dL/dY " + shape_str(dl_dy.shape()) + " vs X*W " +
                         shape_str(conv_out.shape()));
    const auto& s = dl_dy.shape();
    const std::size_t plane = s[2] * s[3];
    std::vector<double> g(s[1], 0.0);
    for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t c = 0; c < s[1]; ++c) {
            const std::size_t off = (n * s[1] + c) * plane;
            double acc = 0.0;
            for (std::size_t i = 0; i < plane; ++i)
                acc += static_cast<double>(dl_dy[off + i]) * static_cast<double>(conv_out[off + i]);
            g[c] += acc;
        }
    return g;
}

template <typename T>
std::vector<double> surrogate_gamma_grad(const Tensor<T>& dl_dy, const Tensor<T>& x, const Tensor<T>& w,
                                         long stride, Padding padding) {
    const auto geo = conv_geometry(x.shape(), w.shape(), stride, padding);
    return surrogate_gamma_grad(dl_dy, conv2d_forward(x, w, geo));
}

ImportanceScores apply_gamma_update(const ImportanceScores& scores, const std::vector<std::vector<double>>& grads,
                                    ScoreOptimizer& opt, double lr_scale) {
    if (grads.size() != scores.layers.size())
        throw ShapeError("score gradient covers " + std::to_string(grads.size()) + " layers, expected " +
                         std::to_string(scores.layers.size()));
    ImportanceScores out = scores;
    const double lr = opt.lr * lr_scale;
    if (opt.kind == ScoreOptimizerKind::rmsprop && opt.square_avg.size() != scores.layers.size()) {
        opt.square_avg.clear();
        for (const auto& l : scores.layers) opt.square_avg.emplace_back(l.gamma.size(), 0.0);
    }
    for (std::size_t l = 0; l < grads.size(); ++l) {
        auto& gamma = out.layers[l].gamma;
        if (grads[l].size() != gamma.size())
            throw ShapeError("score gradient length mismatch in layer " + std::to_string(out.layers[l].layer_id));
        if (opt.kind == ScoreOptimizerKind::sgd) {
            for (std::size_t i = 0; i < gamma.size(); ++i) gamma[i] -= lr * grads[l][i];
        } else {
            rmsprop_update<double>(gamma, grads[l], opt.square_avg[l], lr, opt.rho, opt.epsilon);
        }
    }
    return out;
}

std::vector<double> l1_filter_scores(const Tensor<float>& weight) {
    if (weight.rank() != 4) throw ShapeError("l1_filter_scores expects a K,K,C_in,C_out weight");
    const std::size_t out_c = weight.dim(3);
    std::vector<double> s(out_c, 0.0);
    for (std::size_t i = 0; i < weight.numel(); ++i) s[i % out_c] += std::abs(static_cast<double>(weight[i]));
    const double mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(out_c);
    if (mean > 0)
        for (auto& v : s) v /= mean;
    return s;
}

template Tensor<float> mask_tensor(const LayerMask&);
template Tensor<double> mask_tensor(const LayerMask&);
template Tensor<float> masked_conv2d(const Tensor<float>&, const Tensor<float>&, const LayerMask&, long, Padding);
template Tensor<double> masked_conv2d(const Tensor<double>&, const Tensor<double>&, const LayerMask&, long,
                                      Padding);
template MaskedConv<float> masked_conv2d(Var<float>, Var<float>, const Tensor<float>&, long, Padding);
template MaskedConv<double> masked_conv2d(Var<double>, Var<double>, const Tensor<double>&, long, Padding);
template std::vector<double> surrogate_gamma_grad(const Tensor<float>&, const Tensor<float>&);
template std::vector<double> surrogate_gamma_grad(const Tensor<double>&, const Tensor<double>&);
template std::vector<double> surrogate_gamma_grad(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                                  long, Padding);
template std::vector<double> surrogate_gamma_grad(const Tensor<double>&, const Tensor<double>&,
                                                  const Tensor<double>&, long, Padding);

}  // namespace cascade
