#include <benchmark/benchmark.h>

#include <random>
#include <string>

#include "cascade/arch.hpp"
#include "cascade/kernels.hpp"
#include "cascade/pruning.hpp"

using namespace cascade;

namespace {

Tensor<float> noise(Shape s, std::uint64_t seed) {
    Tensor<float> t(std::move(s));
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> d;
    for (auto& v : t.data()) v = d(rng);
    return t;
}

// args: batch, channels in/out, spatial side, stride
void BM_ConvForward(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1));
    const auto hw = static_cast<std::size_t>(state.range(2));
    const long stride = state.range(3);
    const auto x = noise({n, c, hw, hw}, 1);
    const auto w = noise({3, 3, c, c}, 2);
    const auto g = conv_geometry(x.shape(), w.shape(), stride, Padding::same);
    for (auto _ : state) benchmark::DoNotOptimize(conv2d_forward(x, w, g));
    state.counters["MAC/s"] = benchmark::Counter(
        static_cast<double>(g.batch * g.out_pixels() * g.out_c * g.patch()), benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_ConvForward)->Args({64, 12, 16, 1})->Args({64, 24, 8, 1})->Args({16, 64, 32, 1})->Args({16, 64, 32, 2});

void BM_ConvBackward(benchmark::State& state) {
    const auto x = noise({64, 24, 8, 8}, 1);
    const auto w = noise({3, 3, 24, 24}, 2);
    const auto g = conv_geometry(x.shape(), w.shape(), 1, Padding::same);
    const auto dy = noise({64, 24, 8, 8}, 3);
    Tensor<float> dx, dw;
    for (auto _ : state) {
        conv2d_backward(x, w, dy, g, &dx, &dw);
        benchmark::DoNotOptimize(dw);
    }
}
BENCHMARK(BM_ConvBackward);

void BM_CountStats(benchmark::State& state) {
    const ArchSpec a = load_arch(std::string(CASCADE_BENCH_ARCHS) + "/resnet50.arch");
    for (auto _ : state) benchmark::DoNotOptimize(count_stats(a));
}
BENCHMARK(BM_CountStats);

// args: layers, filters per layer
void BM_BuildMask(benchmark::State& state) {
    ImportanceScores s;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u;
    for (long l = 0; l < state.range(0); ++l) {
        LayerScores ls{static_cast<std::size_t>(l), {}};
        for (long f = 0; f < state.range(1); ++f) ls.gamma.push_back(u(rng));
        s.layers.push_back(std::move(ls));
    }
    for (auto _ : state) benchmark::DoNotOptimize(build_mask(s, {0.4, 2}));
}
BENCHMARK(BM_BuildMask)->Args({13, 512})->Args({53, 1024});

}  // namespace

BENCHMARK_MAIN();
