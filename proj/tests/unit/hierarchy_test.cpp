#include <gtest/gtest.h>

#include <random>

#include "cascade/error.hpp"
#include "cascade/hierarchy.hpp"
#include "scenarios.hpp"

using namespace cascade;

namespace {

ModelHierarchy make(std::vector<double> ratios, std::uint64_t seed = 1) {
    Network net = scenario::tiny_network();
    HierarchyConfig hc;
    hc.keep_ratios = std::move(ratios);
    return ModelHierarchy(net, StandaloneModel::init(net, seed), hc);
}

Tensor<float> images(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Tensor<float> t({n, 3, 8, 8});
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = u(rng);
    return t;
}

}  // namespace

TEST(TaRatios, TwoDivisors) {
    auto r = derive_ta_keep_ratios(0.3, {1.5, 2.5});
    ASSERT_EQ(r.size(), 4u);
    EXPECT_DOUBLE_EQ(r[0], 0.3);
    EXPECT_NEAR(r[1], 0.5333333333333333, 1e-15);
    EXPECT_NEAR(r[2], 0.72, 1e-15);
    EXPECT_EQ(r[3], 1.0);
}

TEST(TaRatios, NoDivisors) { EXPECT_EQ(derive_ta_keep_ratios(0.3, {}), (std::vector<double>{0.3, 1.0})); }

TEST(TaRatios, ExplicitListAccepted) {
    auto h = make({0.3, 0.5, 1.0});
    EXPECT_EQ(h.size(), 3u);
    EXPECT_DOUBLE_EQ(h.slot(1).keep_ratio, 0.5);
}

TEST(TaRatios, NearOneCollapsesTowardOne) {
    auto r = derive_ta_keep_ratios(0.999999, {1.5, 2.5});
    for (double v : r) EXPECT_NEAR(v, 1.0, 2e-6);
}

TEST(TaRatios, RejectsNonIncreasing) {
    EXPECT_THROW(derive_ta_keep_ratios(0.3, {2.5, 1.5}), ConfigError);
    EXPECT_THROW(derive_ta_keep_ratios(0.3, {0.5}), ConfigError);
    EXPECT_THROW(derive_ta_keep_ratios(1.0, {}), ConfigError);
}

TEST(Hierarchy, RejectsBadRatioLists) {
    EXPECT_THROW(make({0.5}), ConfigError);
    EXPECT_THROW(make({0.5, 0.9}), ConfigError);
    EXPECT_THROW(make({0.8, 0.5, 1.0}), ConfigError);
}

TEST(Hierarchy, WeightsAreSharedAndTopMaskIsFull) {
    auto h = make({0.5, 0.75, 1.0});
    EXPECT_EQ(h.shared_conv().size(), 2u);
    EXPECT_EQ(h.view(0).conv[1], h.view(2).conv[1]);
    EXPECT_NE(h.view(0).conv[0], h.view(2).conv[0]);
    EXPECT_FALSE(h.slot(2).scores.has_value());
    EXPECT_EQ(h.slot(2).mask.kept_maskable(), h.slot(2).mask.total_maskable());
}

TEST(Hierarchy, IdenticalSlotsGiveIdenticalLogits) {
    auto h = make({1.0, 1.0});
    ForwardAllOptions fo;
    fo.forward.mode = Mode::eval;
    auto pass = forward_all(h, images(4, 2), fo);
    EXPECT_TRUE(pass.slots[0].out.logits.value().identical(pass.slots[1].out.logits.value()));
}

TEST(Hierarchy, PrunedChannelsAreExactlyZero) {
    auto h = make({0.5, 1.0});
    ForwardAllOptions fo;
    auto pass = forward_all(h, images(3, 3), fo);
    const auto& sites = pass.slots[0].out.sites;
    ASSERT_EQ(sites.size(), 2u);
    std::size_t zeroed = 0;
    for (std::size_t l = 0; l < sites.size(); ++l) {
        const auto& keep = h.slot(0).mask.find(h.net().convs()[sites[l].conv_index].layer_id)->keep;
        const auto& y = sites[l].out.value();
        const std::size_t plane = y.dim(2) * y.dim(3);
        for (std::size_t b = 0; b < y.dim(0); ++b)
            for (std::size_t c = 0; c < y.dim(1); ++c)
                for (std::size_t p = 0; p < plane; ++p) {
                    const float v = y[(b * y.dim(1) + c) * plane + p];
                    if (!keep[c]) {
                        EXPECT_EQ(v, 0.0f);
                        ++zeroed;
                    }
                }
    }
    EXPECT_GT(zeroed, 0u);
}

TEST(Hierarchy, EvalForwardIsRepeatable) {
    auto h = make({0.5, 0.75, 1.0});
    ForwardAllOptions fo;
    fo.forward.mode = Mode::eval;
    auto a = forward_all(h, images(5, 4), fo);
    auto b = forward_all(h, images(5, 4), fo);
    for (std::size_t i = 0; i < 3; ++i)
        EXPECT_TRUE(a.slots[i].out.logits.value().identical(b.slots[i].out.logits.value()));
    EXPECT_TRUE(a.frozen_logits.identical(b.frozen_logits));
}

TEST(Routing, ThreeSlotsUseNextSlotContext) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto r = scenario::routing_check(seed);
        EXPECT_TRUE(r.routed_matches_context) << seed;
        EXPECT_TRUE(r.applied_matches_routed) << seed;
        EXPECT_TRUE(r.cross_wired_differs) << seed;
        EXPECT_TRUE(r.silent_teacher_gives_zero) << seed;
    }
}

TEST(Routing, OwnGradientAddsSlotTerm) {
    auto h = make({0.5, 1.0});
    ForwardAllOptions fo;
    auto pass = forward_all(h, images(4, 5), fo);
    Tensor<float> y({4, 3});
    for (std::size_t i = 0; i < 4; ++i) y.at2(i, i % 3) = 1;
    for (auto& s : pass.slots) s.graph->backward(softmax_cross_entropy(s.out.logits, y));
    const auto ctx = capture_contexts(h, pass);
    const auto plain = route_gamma_gradients(h, ctx);
    const auto own = route_gamma_gradients(h, ctx, true);
    for (std::size_t l = 0; l < plain[0].size(); ++l) {
        const auto mine = surrogate_gamma_grad(ctx[0].layers[l].dl_dy, ctx[0].layers[l].conv);
        for (std::size_t k = 0; k < mine.size(); ++k) EXPECT_EQ(own[0][l][k], plain[0][l][k] + mine[k]);
    }
}

TEST(Routing, MissingContextThrows) {
    auto h = make({0.5, 1.0});
    EXPECT_THROW(route_gamma_gradients(h, {SlotContext{}}), ShapeError);
}

TEST(Refresh, CardinalityPerSlot) {
    auto h = make({0.3, 0.6, 1.0}, 7);
    std::mt19937_64 rng(7);
    for (std::size_t i = 0; i < 2; ++i)
        for (auto& l : h.slot(i).scores->layers)
            for (auto& g : l.gamma) g = std::normal_distribution<double>()(rng);
    refresh_masks(h);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto& m = h.slot(i).mask;
        EXPECT_EQ(m.kept_maskable(), keep_count(h.slot(i).keep_ratio, m.total_maskable())) << i;
    }
    EXPECT_EQ(h.slot(2).mask.kept_maskable(), h.slot(2).mask.total_maskable());
}

TEST(Refresh, IdenticalScoresNest) {
    auto h = make({0.3, 0.6, 1.0}, 8);
    std::mt19937_64 rng(8);
    ImportanceScores s = *h.slot(0).scores;
    for (int trial = 0; trial < 50; ++trial) {
        for (auto& l : s.layers)
            for (auto& g : l.gamma) g = std::normal_distribution<double>()(rng);
        h.slot(0).scores = s;
        h.slot(1).scores = s;
        refresh_masks(h);
        for (std::size_t l = 0; l < h.slot(0).mask.layers.size(); ++l) {
            const auto& a = h.slot(0).mask.layers[l].keep;
            const auto& b = h.slot(1).mask.layers[l].keep;
            for (std::size_t k = 0; k < a.size(); ++k) EXPECT_TRUE(!a[k] || b[k]);
        }
    }
}

TEST(Refresh, SlotsAreIndependent) {
    auto h = make({0.5, 0.75, 1.0}, 9);
    const FilterMask m1 = h.slot(1).mask;
    for (auto& l : h.slot(0).scores->layers)
        for (std::size_t k = 0; k < l.gamma.size(); ++k) l.gamma[k] = static_cast<double>(k % 3);
    refresh_masks(h);
    EXPECT_EQ(h.slot(1).mask, m1);
}

TEST(Refresh, MaskTensorsFollowMask) {
    auto h = make({0.5, 1.0}, 10);
    for (auto& l : h.slot(0).scores->layers)
        for (std::size_t k = 0; k < l.gamma.size(); ++k) l.gamma[k] = -static_cast<double>(k);
    refresh_masks(h);
    const auto& net = h.net();
    for (std::size_t j = 0; j < net.maskable().size(); ++j) {
        const auto& keep = h.slot(0).mask.find(net.convs()[net.maskable()[j]].layer_id)->keep;
        for (std::size_t k = 0; k < keep.size(); ++k) EXPECT_EQ(h.slot(0).mask_tensors[j][k], keep[k] ? 1.0f : 0.0f);
    }
}
