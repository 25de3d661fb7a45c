#include "cascade/hierarchy.hpp"

#include <cmath>
#include <string>

#include "cascade/error.hpp"

namespace cascade {

std::vector<double> derive_ta_keep_ratios(double r0, const std::vector<double>& divisors) {
    if (!(r0 > 0.0 && r0 < 1.0)) throw ConfigError("student keep ratio must be in (0, 1), got " + std::to_string(r0));
    std::vector<double> out{r0};
    for (double d : divisors) {
        if (!(d > 0) || !std::isfinite(d)) throw ConfigError("TA divisor must be a positive number");
        out.push_back(1.0 + (r0 - 1.0) / d);
    }
    out.push_back(1.0);
    for (std::size_t i = 1; i < out.size(); ++i)
        if (!(out[i] > out[i - 1]))
            throw ConfigError("TA divisors give non-increasing keep ratios (" + std::to_string(out[i - 1]) + " then " +
                              std::to_string(out[i]) + "); divisors must be increasing and > 1");
    return out;
}

namespace {

std::string slot_prefix(std::size_t i) { return "slot" + std::to_string(i) + "/"; }

FilterMask all_ones(const Network& net) {
    FilterMask m;
    for (const auto& c : net.convs())
        m.layers.push_back({c.layer_id, c.mask_index != Network::npos, std::vector<std::uint8_t>(c.desc.out, 1)});
    return m;
}

}  // namespace

ModelHierarchy::ModelHierarchy(Network net, const StandaloneModel& pretrained, const HierarchyConfig& cfg)
    : net_(std::move(net)), frozen_(pretrained), min_filters_(cfg.min_filters_per_layer) {
    const auto& r = cfg.keep_ratios;
    if (r.size() < 2) throw ConfigError("a hierarchy needs at least two models");
    if (r.back() != 1.0) throw ConfigError("the last keep ratio must be 1.0");
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (!(r[i] > 0 && r[i] <= 1)) throw ConfigError("keep ratios must be in (0, 1]");
        if (i > 0 && r[i] < r[i - 1]) throw ConfigError("keep ratios must be non-decreasing");
    }
    if (net_.convs().front().mask_index != Network::npos)
        throw ConfigError("the first conv layer is per-model and must be maskable=false");
    if (net_.maskable().empty()) throw ConfigError("network has no maskable conv layers");
    if (pretrained.conv.size() != net_.convs().size() || pretrained.bn.size() != net_.bns().size() ||
        pretrained.dense.size() != net_.denses().size())
        throw ConfigError("pre-trained model does not match the network");

    for (std::size_t ci = 1; ci < pretrained.conv.size(); ++ci) {
        Parameter<float> p = pretrained.conv[ci];
        p.name = "shared/conv" + std::to_string(ci);
        p.zero_grad();
        shared_.push_back(std::move(p));
    }

    ImportanceScores init;
    for (const auto& c : net_.convs()) {
        const std::size_t ci = &c - net_.convs().data();
        if (c.mask_index != Network::npos)
            init.layers.push_back({c.layer_id, l1_filter_scores(pretrained.conv[ci].value)});
        else
            init.excluded.push_back({c.layer_id, c.desc.out});
    }

    for (std::size_t i = 0; i < r.size(); ++i) {
        ModelSlot s;
        s.keep_ratio = r[i];
        const std::string pre = slot_prefix(i);
        s.first_conv = pretrained.conv[0];
        s.first_conv.name = pre + "conv0";
        s.first_conv.zero_grad();
        for (std::size_t b = 0; b < pretrained.bn.size(); ++b) {
            BatchNormState<float> st = pretrained.bn[b];
            st.gamma.name = pre + "bn" + std::to_string(b) + "/gamma";
            st.beta.name = pre + "bn" + std::to_string(b) + "/beta";
            st.gamma.zero_grad();
            st.beta.zero_grad();
            s.bn.push_back(std::move(st));
        }
        for (std::size_t d = 0; d < pretrained.dense.size(); ++d) {
            Parameter<float> p = pretrained.dense[d];
            p.name = pre + "dense" + std::to_string(d);
            p.zero_grad();
            s.dense.push_back(std::move(p));
        }
        s.score_opt = cfg.score_optimizer;
        s.score_opt.square_avg.clear();
        if (i + 1 < r.size()) {
            s.scores = init;
            s.mask = build_mask(*s.scores, {s.keep_ratio, min_filters_});
        } else {
            s.mask = all_ones(net_);
        }
        slots_.push_back(std::move(s));
        sync_mask_tensors(i);
    }
}

void ModelHierarchy::sync_mask_tensors(std::size_t i) {
    ModelSlot& s = slots_.at(i);
    s.mask_tensors.clear();
    for (std::size_t ci : net_.maskable()) {
        const LayerMask* lm = s.mask.find(net_.convs()[ci].layer_id);
        if (!lm) throw ShapeError("slot " + std::to_string(i) + " mask lacks conv layer " +
                                  std::to_string(net_.convs()[ci].layer_id));
        s.mask_tensors.push_back(mask_tensor<float>(*lm));
    }
}

ModelView ModelHierarchy::view(std::size_t i) {
    ModelSlot& s = slots_.at(i);
    ModelView v;
    v.conv.push_back(&s.first_conv);
    for (auto& p : shared_) v.conv.push_back(&p);
    for (auto& b : s.bn) v.bn.push_back(&b);
    for (auto& p : s.dense) v.dense.push_back(&p);
    v.masks = &s.mask_tensors;
    return v;
}

std::vector<Parameter<float>*> ModelHierarchy::shared_parameters() {
    std::vector<Parameter<float>*> out;
    for (auto& p : shared_) out.push_back(&p);
    return out;
}

std::vector<Parameter<float>*> ModelHierarchy::slot_parameters(std::size_t i) {
    ModelSlot& s = slots_.at(i);
    std::vector<Parameter<float>*> out{&s.first_conv};
    for (auto& b : s.bn) {
        out.push_back(&b.gamma);
        out.push_back(&b.beta);
    }
    for (auto& p : s.dense) out.push_back(&p);
    return out;
}

HierarchyPass forward_all(ModelHierarchy& h, const Tensor<float>& images, const ForwardAllOptions& opt) {
    HierarchyPass pass;
    if (opt.with_frozen) {
        Graph<float> g;
        ModelView fv = h.frozen_view();
        ForwardOutput fo = forward(g, h.net(), fv, images, opt.forward);
        pass.frozen_logits = fo.logits.value();
        for (const auto& v : fo.hints) pass.frozen_hints.push_back(v.value());
    }
    for (std::size_t i = 0; i < h.size(); ++i) {
        SlotPass sp;
        sp.graph = std::make_unique<Graph<float>>();
        ModelView v = h.view(i);
        sp.out = forward(*sp.graph, h.net(), v, images, opt.forward);
        pass.slots.push_back(std::move(sp));
    }
    return pass;
}

std::vector<SlotContext> capture_contexts(const ModelHierarchy& h, const HierarchyPass& pass) {
    std::vector<SlotContext> out;
    for (const auto& sp : pass.slots) {
        SlotContext ctx;
        for (const auto& site : sp.out.sites) {
            const auto& info = h.net().convs()[site.conv_index];
            LayerContext lc;
            lc.layer_id = info.layer_id;
            lc.x = site.x.value();
            lc.w = h.shared(site.conv_index).value;
            lc.conv = site.conv.value();
            lc.dl_dy = site.out.grad();
            lc.stride = static_cast<long>(info.desc.stride);
            lc.padding = info.desc.padding;
            ctx.layers.push_back(std::move(lc));
        }
        out.push_back(std::move(ctx));
    }
    return out;
}

std::vector<std::vector<std::vector<double>>> route_gamma_gradients(const ModelHierarchy& h,
                                                                   const std::vector<SlotContext>& contexts,
                                                                   bool own_gradient) {
    const std::size_t n = h.size();
    const std::size_t layers = h.net().maskable().size();
    if (contexts.size() != n)
        throw ShapeError("route_gamma_gradients: " + std::to_string(contexts.size()) + " saved contexts for " +
                         std::to_string(n) + " slots");
    for (std::size_t i = 0; i < n; ++i)
        if (contexts[i].layers.size() != layers)
            throw ShapeError("route_gamma_gradients: slot " + std::to_string(i) + " is missing saved context");
    std::vector<std::vector<std::vector<double>>> grads(n);
    for (std::size_t i = 0; i + 1 < n; ++i) {
        if (!h.slot(i).scores) continue;
        const SlotContext& src = contexts[i + 1];
        for (std::size_t l = 0; l < layers; ++l) {
            std::vector<double> g = surrogate_gamma_grad(src.layers[l].dl_dy, src.layers[l].conv);
            if (own_gradient) {
                const auto own = surrogate_gamma_grad(contexts[i].layers[l].dl_dy, contexts[i].layers[l].conv);
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += own[k];
            }
            grads[i].push_back(std::move(g));
        }
    }
    return grads;
}

void apply_score_updates(ModelHierarchy& h, const std::vector<std::vector<std::vector<double>>>& grads,
                         double lr_scale) {
    if (grads.size() != h.size()) throw ShapeError("apply_score_updates: one gradient set per slot expected");
    for (std::size_t i = 0; i < h.size(); ++i) {
        ModelSlot& s = h.slot(i);
        if (!s.scores) continue;
        s.scores = apply_gamma_update(*s.scores, grads[i], s.score_opt, lr_scale);
    }
}

void refresh_masks(ModelHierarchy& h) {
    for (std::size_t i = 0; i < h.size(); ++i) {
        ModelSlot& s = h.slot(i);
        if (!s.scores) continue;
        s.mask = build_mask(*s.scores, {s.keep_ratio, h.min_filters_per_layer()});
        h.sync_mask_tensors(i);
    }
}

}  // namespace cascade
