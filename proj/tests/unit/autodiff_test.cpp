#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "cascade/autodiff.hpp"
#include "cascade/error.hpp"
#include "oracles.hpp"

using namespace cascade;

namespace {

Tensor<double> t(Shape s, std::vector<double> v) { return Tensor<double>(std::move(s), std::move(v)); }

}  // namespace

TEST(Conv2d, IdentityPixel) {
    Graph<double> g;
    auto y = conv2d(g.constant(t({1, 1, 1, 1}, {1})), g.constant(t({1, 1, 1, 1}, {1})), 1, Padding::same);
    EXPECT_EQ(y.value().shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(y.value()[0], 1.0);
}

TEST(Conv2d, SumOfOnes) {
    Graph<double> g;
    auto y = conv2d(g.constant(Tensor<double>::ones({1, 1, 2, 2})), g.constant(Tensor<double>::ones({2, 2, 1, 1})), 1,
                    Padding::valid);
    ASSERT_EQ(y.value().numel(), 1u);
    EXPECT_EQ(y.value()[0], 4.0);
}

TEST(Conv2d, RejectsChannelMismatch) {
    Graph<double> g;
    EXPECT_THROW(conv2d(g.constant(Tensor<double>::ones({1, 2, 3, 3})), g.constant(Tensor<double>::ones({3, 3, 1, 1})),
                        1, Padding::same),
                 ShapeError);
}

TEST(Dense, DiagonalWeights) {
    Graph<double> g;
    auto y = dense(g.constant(t({2, 2}, {1, 0, 0, 1})), g.constant(t({2, 2}, {3, 0, 0, 5})));
    EXPECT_TRUE(y.value().identical(t({2, 2}, {3, 0, 0, 5})));
}

TEST(Dense, ZerosInZerosOut) {
    Graph<double> g;
    std::mt19937_64 rng(3);
    auto y = dense(g.constant(Tensor<double>::zeros({3, 4})), g.constant(oracle::random_tensor({4, 2}, rng)));
    for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Dense, MatchesLoopProduct) {
    std::mt19937_64 rng(11);
    auto a = oracle::random_tensor({4, 8}, rng), b = oracle::random_tensor({8, 3}, rng);
    Graph<double> g;
    auto y = dense(g.constant(a), g.constant(b));
    auto want = oracle::matmul(a, b);
    for (std::size_t i = 0; i < want.numel(); ++i) EXPECT_NEAR(y.value()[i], want[i], 1e-12);
}

TEST(BatchNorm, EvalWithUnitStatisticsIsIdentity) {
    std::mt19937_64 rng(5);
    auto x = oracle::random_tensor({2, 3, 4, 4}, rng);
    BatchNormState<double> st("bn", 3);
    Graph<double> g;
    BatchNormConfig cfg;
    auto y = batch_norm(g.constant(x), st, g.constant(Tensor<double>::ones({3})), g.constant(Tensor<double>::zeros({3})),
                        Mode::eval, cfg);
    const double s = 1.0 / std::sqrt(1.0 + cfg.epsilon);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y.value()[i], x[i] * s, 1e-15);
}

TEST(BatchNorm, TrainOnConstantInputIsZero) {
    BatchNormState<double> st("bn", 2);
    Graph<double> g;
    auto y = batch_norm(g.constant(Tensor<double>({3, 2, 2, 2}, 4.25)), st, g.constant(Tensor<double>::ones({2})),
                        g.constant(Tensor<double>::zeros({2})), Mode::train);
    for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, TrainNormalizesEachChannel) {
    std::mt19937_64 rng(9);
    auto x = oracle::random_tensor({4, 3, 5, 5}, rng, -3.0, 7.0);
    BatchNormState<double> st("bn", 3);
    Graph<double> g;
    auto y = batch_norm(g.constant(x), st, g.constant(Tensor<double>::ones({3})), g.constant(Tensor<double>::zeros({3})),
                        Mode::train)
                 .value();
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, v = 0;
        const double n = 4 * 25;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t j = 0; j < 5; ++j) m += y.at4(b, c, i, j);
        m /= n;
        for (std::size_t b = 0; b < 4; ++b)
            for (std::size_t i = 0; i < 5; ++i)
                for (std::size_t j = 0; j < 5; ++j) v += (y.at4(b, c, i, j) - m) * (y.at4(b, c, i, j) - m);
        v /= n;
        EXPECT_NEAR(m, 0.0, 1e-5);
        EXPECT_NEAR(v, 1.0, 1e-5);
    }
}

TEST(BatchNorm, TrainUpdatesRunningStatistics) {
    BatchNormState<double> st("bn", 1);
    Graph<double> g;
    batch_norm(g.constant(t({2, 1, 1, 1}, {1.0, 3.0})), st, g.constant(Tensor<double>::ones({1})),
               g.constant(Tensor<double>::zeros({1})), Mode::train);
    // momentum 0.9 on the old value: mean 0.9*0 + 0.1*2
    EXPECT_NEAR(st.running_mean[0], 0.2, 1e-15);
}

TEST(Pointwise, Relu) {
    Graph<double> g;
    auto y = relu(g.constant(t({2}, {-1, 2})));
    EXPECT_TRUE(y.value().identical(t({2}, {0, 2})));
}

TEST(Pointwise, MaxPool) {
    Graph<double> g;
    auto y = max_pool(g.constant(t({1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2);
    EXPECT_TRUE(y.value().identical(t({1, 1, 1, 1}, {4})));
}

TEST(Pointwise, GlobalAvgPoolIsSpatialMean) {
    std::mt19937_64 rng(1);
    auto x = oracle::random_tensor({2, 3, 4, 5}, rng);
    Graph<double> g;
    auto y = global_avg_pool(g.constant(x)).value();
    ASSERT_EQ(y.shape(), (Shape{2, 3}));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 3; ++c) {
            double s = 0;
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = 0; j < 5; ++j) s += x.at4(b, c, i, j);
            EXPECT_NEAR(y.at2(b, c), s / 20.0, 1e-14);
        }
}

TEST(CrossEntropy, UniformLogits) {
    Graph<double> g;
    Tensor<double> y({1, 10});
    y[3] = 1;
    auto l = softmax_cross_entropy(g.constant(Tensor<double>({1, 10}, 0.7)), y);
    EXPECT_NEAR(l.value()[0], std::log(10.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginIsNearZero) {
    Graph<double> g;
    Tensor<double> z({1, 4}), y({1, 4});
    z[2] = 100;
    y[2] = 1;
    EXPECT_LT(softmax_cross_entropy(g.constant(z), y).value()[0], 1e-10);
}

TEST(CrossEntropy, MatchesLogSumExp) {
    std::mt19937_64 rng(21);
    auto z = oracle::random_tensor({3, 4}, rng, -4, 4);
    Tensor<double> y({3, 4});
    const std::size_t labels[] = {0, 3, 1};
    double want = 0;
    for (std::size_t r = 0; r < 3; ++r) {
        y.at2(r, labels[r]) = 1;
        want += oracle::cross_entropy_row({z.at2(r, 0), z.at2(r, 1), z.at2(r, 2), z.at2(r, 3)}, labels[r]);
    }
    Graph<double> g;
    EXPECT_NEAR(softmax_cross_entropy(g.constant(z), y).value()[0], want / 3, 1e-10);
}

TEST(Backward, SumGivesOnes) {
    Parameter<double> w("w", t({2, 3}, {1, -2, 3, 0.5, 7, -1}));
    Graph<double> g;
    g.backward(sum(g.parameter(w)));
    for (double v : w.grad.values()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, ConvWeightGradCountsValidPositions) {
    // x all ones, same padding: dL/dw[kh,kw,i,o] is the number of output
    // positions whose receptive field tap (kh,kw) lands inside the image.
    const std::size_t h = 4, w = 5, k = 3, n = 2;
    Parameter<double> wt("w", Tensor<double>({k, k, 2, 3}, 0.3));
    Graph<double> g;
    g.backward(sum(conv2d(g.constant(Tensor<double>::ones({n, 2, h, w})), g.parameter(wt), 1, Padding::same)));
    auto inside = [](std::size_t tap, std::size_t extent) {
        std::size_t c = 0;
        for (std::size_t o = 0; o < extent; ++o) {
            const long p = static_cast<long>(o + tap) - 1;
            c += p >= 0 && p < static_cast<long>(extent);
        }
        return c;
    };
    for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw)
            for (std::size_t i = 0; i < 2; ++i)
                for (std::size_t o = 0; o < 3; ++o)
                    EXPECT_EQ(wt.grad.at4(kh, kw, i, o), static_cast<double>(n * inside(kh, h) * inside(kw, w)));
}

TEST(Backward, SmallNetworkMatchesFiniteDifferences) {
    std::mt19937_64 rng(42);
    for (int trial = 0; trial < 5; ++trial) {
        auto x = oracle::random_tensor({3, 2, 5, 5}, rng);
        auto w1 = oracle::random_tensor({3, 3, 2, 4}, rng, -0.5, 0.5);
        auto w2 = oracle::random_tensor({1, 1, 4, 3}, rng, -0.5, 0.5);
        auto gamma = oracle::random_tensor({4}, rng, 0.5, 1.5);
        auto beta = oracle::random_tensor({4}, rng);
        auto fc = oracle::random_tensor({3, 5}, rng);
        Tensor<double> y({3, 5});
        y.at2(0, 1) = y.at2(1, 4) = y.at2(2, 0) = 1;
        const double err = oracle::gradient_error(
            [&](Graph<double>&, const std::vector<Var<double>>& v) {
                BatchNormState<double> st("bn", 4);
                auto h1 = relu(batch_norm(conv2d(v[0], v[1], 1, Padding::same), st, v[3], v[4], Mode::train));
                auto h2 = conv2d(max_pool(h1, 2, 2), v[2], 1, Padding::valid);
                return softmax_cross_entropy(dense(global_avg_pool(h2), v[5]), y);
            },
            {x, w1, w2, gamma, beta, fc});
        EXPECT_LT(err, 1e-4) << "trial " << trial;
    }
}

TEST(Backward, EveryOpMatchesFiniteDifferences) {
    for (const auto& r : oracle::gradient_suite(50, 7)) {
        EXPECT_EQ(r.instances, 50) << r.op;
        EXPECT_LT(r.worst, 1e-4) << r.op;
    }
}

TEST(Backward, GradientIsLinearInLossScale) {
    std::mt19937_64 rng(4);
    auto a = oracle::random_tensor({2, 6}, rng), target = oracle::random_tensor({2, 6}, rng);
    Parameter<double> p1("a", a), p2("a", a);
    {
        Graph<double> g;
        g.backward(mse_loss(g.parameter(p1), target));
    }
    {
        Graph<double> g;
        g.backward(scale(mse_loss(g.parameter(p2), target), 2.0));
    }
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_DOUBLE_EQ(p2.grad[i], 2.0 * p1.grad[i]);
}

TEST(Backward, ReplayIsBitwiseIdentical) {
    std::mt19937_64 rng(8);
    auto x = oracle::random_tensor({2, 3, 6, 6}, rng).cast<float>();
    auto w = oracle::random_tensor({3, 3, 3, 5}, rng).cast<float>();
    auto run = [&] {
        Parameter<float> p("w", w);
        Graph<float> g;
        auto y = global_avg_pool(relu(conv2d(g.constant(x), g.parameter(p), 2, Padding::same)));
        g.backward(sum(y));
        return p.grad;
    };
    EXPECT_TRUE(run().identical(run()));
}

TEST(Backward, ParameterGradientsAccumulateAcrossGraphs) {
    Parameter<double> w("w", t({2}, {1, 2}));
    for (int i = 0; i < 3; ++i) {
        Graph<double> g;
        g.backward(sum(g.parameter(w)));
    }
    EXPECT_EQ(w.grad[0], 3.0);
    EXPECT_EQ(w.grad[1], 3.0);
}

TEST(Backward, RejectsNonScalarLoss) {
    Graph<double> g;
    auto v = g.constant(Tensor<double>::ones({2}));
    EXPECT_THROW(g.backward(v), ShapeError);
}
