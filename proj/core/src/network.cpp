#include "cascade/network.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>

#include "cascade/error.hpp"
#include "cascade/rng.hpp"

namespace cascade {

namespace {

[[noreturn]] void unsupported(const Layer& l, const std::string& why) {
    throw ConfigError("layer " + std::to_string(l.id) + " (" + l.kind() + "): " + why);
}

}  // namespace

Network::Network(ArchSpec arch) : arch_(std::move(arch)) {
    std::size_t channels = arch_.input.c;
    auto walk = [&](auto& self, const std::vector<Layer>& layers) -> void {
        for (const Layer& l : layers) {
            if (const auto* c = l.as<ConvDesc>()) {
                std::size_t mask = npos;
                if (c->maskable) {
                    mask = maskable_.size();
                    maskable_.push_back(convs_.size());
                }
                convs_.push_back({l.id, *c, mask});
                channels = c->out;
            } else if (l.as<BatchNormDesc>()) {
                bns_.push_back({l.id, channels});
            } else if (const auto* d = l.as<DenseDesc>()) {
                denses_.push_back(*d);
                dense_ids_.push_back(l.id);
                channels = d->out;
            } else if (const auto* p = l.as<PoolDesc>()) {
                if (p->kind == PoolKind::avg) unsupported(l, "average pooling is not trainable");
                if (p->kind == PoolKind::max && p->padding != Padding::valid)
                    unsupported(l, "max pooling must use pad=valid for training");
            } else if (l.as<DepthwiseConvDesc>()) {
                unsupported(l, "depthwise convolution is analysis-only");
            } else if (const auto* b = l.as<BlockDesc>()) {
                const std::size_t in = channels;
                self(self, b->body);
                const std::size_t out = channels;
                channels = in;
                self(self, b->shortcut);
                channels = out;
            }
        }
    };
    walk(walk, arch_.layers);
    if (convs_.empty()) throw ConfigError("network has no conv layers");
    if (denses_.empty()) throw ConfigError("network has no dense layers");
}

std::size_t Network::conv_index(std::size_t layer_id) const {
    for (std::size_t i = 0; i < convs_.size(); ++i)
        if (convs_[i].layer_id == layer_id) return i;
    return npos;
}

std::size_t Network::bn_index(std::size_t layer_id) const {
    for (std::size_t i = 0; i < bns_.size(); ++i)
        if (bns_[i].layer_id == layer_id) return i;
    return npos;
}

std::size_t Network::dense_index(std::size_t layer_id) const {
    for (std::size_t i = 0; i < dense_ids_.size(); ++i)
        if (dense_ids_[i] == layer_id) return i;
    return npos;
}

std::vector<std::size_t> Network::default_hint_layers() const {
    std::vector<std::size_t> blocks, convs;
    for (const Layer& l : arch_.layers) {
        if (l.as<BlockDesc>()) blocks.push_back(l.id);
        if (l.as<ConvDesc>()) convs.push_back(l.id);
    }
    auto& src = blocks.empty() ? convs : blocks;
    const std::size_t n = std::min<std::size_t>(3, src.size());
    return {src.end() - static_cast<std::ptrdiff_t>(n), src.end()};
}

void Network::check_hint_layers(const std::vector<std::size_t>& ids) const {
    for (std::size_t id : ids) {
        bool ok = false;
        for (const Layer& l : arch_.layers)
            if (l.id == id && (l.as<ConvDesc>() || l.as<BlockDesc>())) ok = true;
        if (!ok) throw ConfigError("hint layer " + std::to_string(id) + " is not a top-level conv or block");
    }
}

namespace {

struct Forwarder {
    Graph<float>& g;
    const Network& net;
    const ModelView& view;
    const ForwardOptions& opt;
    ForwardOutput out;
    struct Pending {
        std::size_t conv_index;
        Var<float> x;
    };
    std::optional<Pending> pending;  // masked conv awaiting its gate
    const Tensor<float>* pending_mask = nullptr;

    Var<float> leaf(Parameter<float>& p) { return view.frozen ? g.constant(p.value) : g.parameter(p); }

    bool is_hint(std::size_t id) const {
        return opt.hint_layers && std::find(opt.hint_layers->begin(), opt.hint_layers->end(), id) !=
                                      opt.hint_layers->end();
    }

    Var<float> run(const std::vector<Layer>& layers, Var<float> x, bool top) {
        bool capture = false;
        for (std::size_t k = 0; k < layers.size(); ++k) {
            const Layer& l = layers[k];
            const bool passthrough = l.as<BatchNormDesc>() || l.as<ReluDesc>();
            if (capture && !passthrough) {
                out.hints.push_back(x);
                capture = false;
            }
            x = apply(l, x);
            if (pending) {
                // Gate after the BN when one follows: train-mode BN is invariant to a
                // per-channel scale of its input, which would zero the score gradient.
                if (k + 1 < layers.size() && layers[k + 1].as<BatchNormDesc>()) x = apply(layers[++k], x);
                Var<float> y = channel_scale(x, *pending_mask);
                out.sites.push_back({pending->conv_index, pending->x, x, y});
                pending.reset();
                x = y;
            }
            if (top && is_hint(l.id)) capture = true;
        }
        if (capture) out.hints.push_back(x);
        return x;
    }

    Var<float> apply(const Layer& l, Var<float> x) {
        if (const auto* c = l.as<ConvDesc>()) {
            const std::size_t ci = net.conv_index(l.id);
            const auto& info = net.convs()[ci];
            Var<float> w = leaf(*view.conv[ci]);
            const long stride = static_cast<long>(c->stride);
            if (info.mask_index == Network::npos || !view.masks) return conv2d(x, w, stride, c->padding);
            pending_mask = &(*view.masks)[info.mask_index];
            pending = Pending{ci, x};
            return conv2d(x, w, stride, c->padding);
        }
        if (l.as<BatchNormDesc>()) {
            BatchNormState<float>& st = *view.bn[net.bn_index(l.id)];
            const Mode mode = view.frozen ? Mode::eval : opt.mode;
            return batch_norm(x, st, leaf(st.gamma), leaf(st.beta), mode, opt.bn);
        }
        if (l.as<ReluDesc>()) return relu(x);
        if (const auto* p = l.as<PoolDesc>()) {
            if (p->kind == PoolKind::global) return global_avg_pool(x);
            return max_pool(x, p->kernel, p->stride);
        }
        if (l.as<DenseDesc>()) {
            if (x.value().rank() != 2) x = flatten(x);
            return dense(x, leaf(*view.dense[net.dense_index(l.id)]));
        }
        if (const auto* b = l.as<BlockDesc>()) {
            Var<float> body = run(b->body, x, false);
            Var<float> shortcut = b->shortcut.empty() ? x : run(b->shortcut, x, false);
            return add(body, shortcut);
        }
        return x;  // classifier marker
    }
};

}  // namespace

ForwardOutput forward(Graph<float>& g, const Network& net, const ModelView& view, const Tensor<float>& images,
                      const ForwardOptions& opt) {
    const auto& in = net.arch().input;
    if (images.rank() != 4 || images.dim(1) != in.c || images.dim(2) != in.h || images.dim(3) != in.w)
        throw ShapeError("forward: input " + shape_str(images.shape()) + " does not match arch input [N," +
                         std::to_string(in.c) + "," + std::to_string(in.h) + "," + std::to_string(in.w) + "]");
    if (view.conv.size() != net.convs().size() || view.bn.size() != net.bns().size() ||
        view.dense.size() != net.denses().size())
        throw ShapeError("forward: parameter view does not match the network");
    if (view.masks && view.masks->size() != net.maskable().size())
        throw ShapeError("forward: expected " + std::to_string(net.maskable().size()) + " masks, got " +
                         std::to_string(view.masks->size()));
    Forwarder f{g, net, view, opt, {}, std::nullopt, nullptr};
    f.out.logits = f.run(net.arch().layers, g.constant(images), true);
    return std::move(f.out);
}

StandaloneModel StandaloneModel::init(const Network& net, std::uint64_t seed) {
    StandaloneModel m;
    std::uint64_t ordinal = 0;
    auto normal = [&](Shape shape, double stddev) {
        std::mt19937_64 gen(counter_hash(seed, kStreamInit, 0, ordinal++));
        std::normal_distribution<double> dist(0.0, stddev);
        Tensor<float> t(std::move(shape));
        for (auto& v : t.data()) v = static_cast<float>(dist(gen));
        return t;
    };
    for (std::size_t i = 0; i < net.convs().size(); ++i) {
        const auto& d = net.convs()[i].desc;
        const double fan_in = static_cast<double>(d.kernel * d.kernel * d.in);
        m.conv.emplace_back("conv" + std::to_string(i), normal({d.kernel, d.kernel, d.in, d.out}, std::sqrt(2.0 / fan_in)));
    }
    for (std::size_t i = 0; i < net.bns().size(); ++i)
        m.bn.emplace_back("bn" + std::to_string(i), net.bns()[i].channels);
    for (std::size_t i = 0; i < net.denses().size(); ++i) {
        const auto& d = net.denses()[i];
        m.dense.emplace_back("dense" + std::to_string(i),
                             normal({d.in, d.out}, 1.0 / std::sqrt(static_cast<double>(d.in))));
    }
    return m;
}

ModelView StandaloneModel::view(bool frozen) {
    ModelView v;
    for (auto& p : conv) v.conv.push_back(&p);
    for (auto& s : bn) v.bn.push_back(&s);
    for (auto& p : dense) v.dense.push_back(&p);
    v.frozen = frozen;
    return v;
}

std::vector<Parameter<float>*> StandaloneModel::parameters() {
    std::vector<Parameter<float>*> out;
    for (auto& p : conv) out.push_back(&p);
    for (auto& s : bn) {
        out.push_back(&s.gamma);
        out.push_back(&s.beta);
    }
    for (auto& p : dense) out.push_back(&p);
    return out;
}

std::vector<int> argmax_rows(const Tensor<float>& logits) {
    if (logits.rank() != 2) throw ShapeError("argmax_rows expects [N,K] logits");
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (logits[i * k + j] > logits[i * k + best]) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

}  // namespace cascade
