#include <gtest/gtest.h>

#include <cmath>
#include <string>

#include "cascade/arch.hpp"
#include "cascade/error.hpp"

using namespace cascade;

namespace {

ArchSpec shipped(const std::string& id) { return load_arch(std::string(CASCADE_TEST_ARCHS) + "/" + id + ".arch"); }

// |value - shown| <= half a unit of the last displayed digit
bool rounds_to(std::int64_t value, double shown, double unit) {
    return std::abs(static_cast<double>(value) - shown) <= 0.5 * unit + 1e-6;
}

struct Row {
    double flops_m;
    double params_m;
};

}  // namespace

TEST(ResNet50, EveryRowMatchesReferenceCounts) {
    const auto stats = count_stats(shipped("resnet50"));
    // stem, blocks 0..15, classifier; FLOPs in M (whole), params in M (2 decimals)
    const std::vector<Row> table = {
        {118, 0.01},  {231, 0.07},  {218, 0.07},  {218, 0.07},  {295, 0.38},  {218, 0.28},
        {218, 0.28},  {218, 0.28},  {295, 1.51},  {218, 1.11},  {218, 1.11},  {218, 1.11},
        {218, 1.11},  {218, 1.11},  {295, 6.03},  {218, 4.46},  {218, 4.46},  {2.05, 2.05},
    };
    std::vector<const LayerStats*> rows;
    for (const auto& l : stats.layers)
        if (l.kind == "conv" || l.kind == "block" || l.kind == "dense") rows.push_back(&l);
    ASSERT_EQ(rows.size(), table.size());
    for (std::size_t i = 0; i < table.size(); ++i) {
        const double flop_unit = i + 1 == table.size() ? 0.01e6 : 1e6;
        EXPECT_TRUE(rounds_to(rows[i]->flops, table[i].flops_m * 1e6, flop_unit)) << rows[i]->name << " " << rows[i]->flops;
        EXPECT_TRUE(rounds_to(rows[i]->params, table[i].params_m * 1e6, 0.01e6)) << rows[i]->name << " " << rows[i]->params;
    }
}

TEST(ResNet50, StemAndBlockExactCounts) {
    const auto stats = count_stats(shipped("resnet50"));
    const auto& stem = stats.layers.front();
    EXPECT_EQ(stem.params, 7 * 7 * 3 * 64);
    EXPECT_EQ(stem.flops, 7LL * 7 * 3 * 64 * 112 * 112);
}

TEST(ResNet50, TotalsRoundToReferenceFigures) {
    const auto t = count_stats(shipped("resnet50")).totals;
    EXPECT_TRUE(rounds_to(t.params, 25.5e6, 0.1e6)) << t.params;
    // the exact total displays as 3.86B
    EXPECT_TRUE(rounds_to(t.flops, 3.86e9, 0.01e9)) << t.flops;
    EXPECT_EQ(human_count(t.flops), "3.86B");
}

TEST(ResNet50, TotalIsSumOfRows) {
    const auto stats = count_stats(shipped("resnet50"));
    std::int64_t f = 0, p = 0;
    for (const auto& l : stats.layers) {
        f += l.flops;
        p += l.params;
    }
    EXPECT_EQ(f, stats.totals.flops);
    EXPECT_EQ(p, stats.totals.params);
}

TEST(Vgg16, Totals) {
    const auto t = count_stats(shipped("vgg16-cifar10")).totals;
    EXPECT_TRUE(rounds_to(t.params, 14.98e6, 0.01e6)) << t.params;
    EXPECT_TRUE(rounds_to(t.flops, 313e6, 1e6)) << t.flops;
}

TEST(Compression, ReferenceRatios) {
    auto r = compression_report({14'980'000, 313'000'000}, {7'760'000, 134'000'000});
    EXPECT_EQ(std::round(r.param_ratio * 100) / 100, 1.93);
    EXPECT_EQ(std::round(r.flops_ratio * 100) / 100, 2.34);
    EXPECT_EQ(std::round(r.param_ratio * 10) / 10, 1.9);
    EXPECT_EQ(std::round(r.flops_ratio * 10) / 10, 2.3);
    auto big = compression_report({25'500'000, 3'860'000'000}, {7'120'000, 1'040'000'000});
    EXPECT_EQ(std::round(big.flops_ratio * 100) / 100, 3.71);
}

TEST(Compression, IdentityIsOne) {
    auto r = compression_report({100, 10}, {100, 10});
    EXPECT_EQ(r.param_ratio, 1.0);
    EXPECT_EQ(r.flops_ratio, 1.0);
    EXPECT_EQ(r.param_percent, 100.0);
}

TEST(Counting, SinglePixelConv) {
    auto a = parse_arch_string("input c=1 h=1 w=1\nconv k=1 in=1 out=1 stride=1 pad=same\n");
    auto s = count_stats(a);
    EXPECT_EQ(s.totals.flops, 1);
    EXPECT_EQ(s.totals.params, 1);
}

TEST(Counting, HalfInputsAndOutputsQuarterFlops) {
    auto a = parse_arch_string(
        "input c=3 h=8 w=8\n"
        "conv k=3 in=3 out=8 maskable=true name=a\n"
        "conv k=3 in=8 out=8 maskable=true name=b\n");
    const auto full = count_stats(a);
    FilterMask m;
    m.layers.push_back({a.layers[0].id, true, {1, 1, 1, 1, 0, 0, 0, 0}});
    m.layers.push_back({a.layers[1].id, true, {1, 0, 1, 0, 1, 0, 1, 0}});
    const auto half = count_stats(a, &m);
    EXPECT_EQ(half.layers[1].flops * 4, full.layers[1].flops);
    EXPECT_EQ(half.layers[1].params * 4, full.layers[1].params);
    EXPECT_EQ(half.layers[0].flops * 2, full.layers[0].flops);
}

TEST(Counting, FewerKeptFiltersNeverCostMore) {
    auto a = shipped("vgg16-cifar10");
    std::vector<const Layer*> convs = a.conv_layers();
    FilterMask m;
    for (const auto* c : convs) m.layers.push_back({c->id, true, std::vector<std::uint8_t>(c->as<ConvDesc>()->out, 1)});
    auto prev = count_stats(a, &m).totals;
    for (std::size_t step = 0; step < 12; ++step) {
        auto& keep = m.layers[1 + step % (m.layers.size() - 1)].keep;
        for (std::size_t k = 0; k < keep.size(); k += 3 + step % 4) keep[k] = 0;
        auto now = count_stats(a, &m).totals;
        EXPECT_LE(now.flops, prev.flops);
        EXPECT_LE(now.params, prev.params);
        prev = now;
    }
}

TEST(Counting, ResidualJoinTakesWiderSide) {
    auto a = parse_arch_string(
        "input c=4 h=4 w=4\n"
        "block\n"
        "  conv k=1 in=4 out=4 maskable=true name=body\n"
        "conv k=1 in=4 out=2 maskable=true name=after\n");
    FilterMask m;
    m.layers.push_back({a.layers[0].as<BlockDesc>()->body[0].id, true, {1, 0, 0, 0}});
    m.layers.push_back({a.layers[1].id, true, {1, 1}});
    auto s = count_stats(a, &m);
    // identity shortcut carries all 4 channels, so the next conv still sees 4 inputs
    EXPECT_EQ(s.layers[1].params, 4 * 2);
}

TEST(Parse, ErrorsCarryLineNumbers) {
    auto line_of = [](const std::string& text) {
        try {
            parse_arch_string(text);
        } catch (const ParseError& e) {
            return e.line();
        }
        return -1;
    };
    EXPECT_EQ(line_of("input c=3 h=8 w=8\nconv k=3 in=3 out=8\nwidget x=1\n"), 3);
    EXPECT_EQ(line_of("input c=3 h=8 w=8\nconv k=3 in=3\n"), 2);
    EXPECT_EQ(line_of("input c=3 h=8 w=8\nconv k=3 in=3 out=8 pad=circular\n"), 2);
    EXPECT_EQ(line_of("conv k=3 in=3 out=8\n"), 1);
    EXPECT_EQ(line_of("input c=3 h=8 w=8\n  conv k=3 in=3 out=8\n"), 2);
    EXPECT_EQ(line_of("input c=3 h=8 w=8\nconv k=3 in=3 out=8 k=5\n"), 2);
}

TEST(Parse, ShapeMismatchIsReported) {
    EXPECT_THROW(parse_arch_string("input c=3 h=8 w=8\nconv k=3 in=4 out=8\n"), ParseError);
    EXPECT_THROW(parse_arch_string("input c=3 h=8 w=8\nconv k=3 in=3 out=8\ndense in=9 out=2\n"), ParseError);
}

TEST(Parse, FormatRoundTrips) {
    for (const char* id : {"resnet50", "vgg16-cifar10", "toy4"}) {
        auto a = shipped(id);
        auto b = parse_arch_string(format_arch(a));
        EXPECT_EQ(format_arch(b), format_arch(a)) << id;
        EXPECT_EQ(count_stats(b).totals.flops, count_stats(a).totals.flops) << id;
    }
}

TEST(HumanCount, Units) {
    EXPECT_EQ(human_count(14'977'728), "14.98M");
    EXPECT_EQ(human_count(313'463'808, 0), "313M");
    EXPECT_EQ(human_count(9'408), "9.41K");
    EXPECT_EQ(human_count(12), "12");
}
