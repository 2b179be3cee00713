#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dpd/gradcheck.hpp"
#include "dpd/ops.hpp"
#include "dpd/tensor.hpp"
#include "oracles.hpp"

using namespace dpd;

TEST(Tensor, SizeMatchesShapeProduct) {
    Tensor t({2, 3, 4});
    EXPECT_EQ(t.size(), 24u);
    EXPECT_EQ(t.rank(), 3u);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>(5, 0.0)), ShapeError);
}

TEST(Tensor, ChwIndexingIsRowMajor) {
    Tensor t = Tensor::chw(2, 3, 4);
    t.at(1, 2, 3) = 7.0;
    EXPECT_EQ(t[(1 * 3 + 2) * 4 + 3], 7.0);
    EXPECT_EQ(shape_string(t.shape()), "[2,3,4]");
}

TEST(Conv2d, AllOnesCentreSumsNine) {
    Tensor in = Tensor::chw(1, 3, 3, 1.0);
    Tensor k({1, 1, 3, 3}, 1.0);
    Tensor b({1});
    const Tensor out = ops::conv2d(in, k, b, 1, 1);
    EXPECT_DOUBLE_EQ(out.at(0, 1, 1), 9.0);
    EXPECT_DOUBLE_EQ(out.at(0, 0, 0), 4.0);
}

TEST(Conv2d, IdentityKernelCopiesInput) {
    std::mt19937_64 rng(3);
    const Tensor in = oracle::random_tensor({1, 5, 6}, rng);
    Tensor k({1, 1, 3, 3});
    k[4] = 1.0;
    const Tensor out = ops::conv2d(in, k, Tensor({1}), 1, 1);
    EXPECT_EQ(out, in);
}

TEST(Conv2d, MatchesNestedLoopOracleOnRandomCase) {
    std::mt19937_64 rng(11);
    const Tensor in = oracle::random_tensor({2, 4, 4}, rng);
    const Tensor k = oracle::random_tensor({3, 2, 3, 3}, rng);
    const Tensor b = oracle::random_tensor({3}, rng);
    const Tensor got = ops::conv2d(in, k, b, 1, 1);
    const Tensor want = oracle::conv2d(in, k, b, 1, 1);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
}

TEST(Conv2d, ExhaustiveSmallShapeSweep) {
    std::mt19937_64 rng(5);
    std::size_t cases = 0;
    for (std::size_t cin : {1, 2, 3})
        for (std::size_t cout : {1, 2})
            for (std::size_t k : {1, 3, 5})
                for (std::size_t stride : {1, 2})
                    for (std::size_t pad : {std::size_t{0}, (k - 1) / 2})
                        for (std::size_t h = 1; h <= 6; ++h)
                            for (std::size_t w = 1; w <= 6; ++w) {
                                if (h + 2 * pad < k || w + 2 * pad < k) continue;
                                const Tensor in = oracle::random_tensor({cin, h, w}, rng);
                                const Tensor ker = oracle::random_tensor({cout, cin, k, k}, rng);
                                const Tensor b = oracle::random_tensor({cout}, rng);
                                const Tensor got = ops::conv2d(in, ker, b, stride, pad);
                                const Tensor want =
                                    oracle::conv2d(in, ker, b, static_cast<int>(stride), static_cast<int>(pad));
                                ASSERT_EQ(got.shape(), want.shape());
                                EXPECT_EQ(got.dim(1), (h + 2 * pad - k) / stride + 1);
                                for (std::size_t i = 0; i < got.size(); ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
                                ++cases;
                            }
    EXPECT_GT(cases, 1000u);
}

TEST(Conv2d, ShapeErrorsNameTheAxes) {
    Tensor in = Tensor::chw(2, 4, 4);
    Tensor k({1, 3, 3, 3});
    try {
        ops::conv2d(in, k, Tensor({1}), 1, 1);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("axis 1"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("axis 0"), std::string::npos);
    }
    EXPECT_THROW(ops::conv2d(in, Tensor({1, 2, 2, 2}), Tensor({1}), 1, 0), ShapeError);
    EXPECT_THROW(ops::conv2d(in, Tensor({1, 2, 3, 3}), Tensor({2}), 1, 1), ShapeError);
    EXPECT_THROW(ops::conv2d(in, Tensor({1, 2, 3, 3}), Tensor({1}), 3, 1), ShapeError);
}

TEST(Elementwise, ReluAndSigmoidExamples) {
    EXPECT_EQ(ops::relu(Tensor({1}, -2.5))[0], 0.0);
    EXPECT_EQ(ops::relu(Tensor({1}, 1.5))[0], 1.5);
    EXPECT_EQ(ops::sigmoid(0.0), 0.5);
    for (double z = -30.0; z <= 30.0; z += 0.5) {
        const double s = ops::sigmoid(z);
        EXPECT_GT(s, 0.0);
        EXPECT_LT(s, 1.0);
    }
    EXPECT_TRUE(std::isfinite(ops::sigmoid(-1000.0)));
    EXPECT_TRUE(std::isfinite(ops::sigmoid(1000.0)));
}

TEST(Bilinear, TwoByTwoRampMatchesClosedForm) {
    const Tensor in({1, 2, 2}, std::vector<double>{0, 1, 2, 3});
    const Tensor out = ops::bilinear_upsample(in, 2);
    ASSERT_EQ(out.shape(), (Shape{1, 4, 4}));
    // Corner-aligned sampling of the plane v(y, x) = 2y + x.
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j)
            EXPECT_NEAR(out.at(0, i, j), 2.0 * (i / 3.0) + j / 3.0, 1e-15) << i << "," << j;
    EXPECT_EQ(out.at(0, 0, 0), 0.0);
    EXPECT_EQ(out.at(0, 0, 3), 1.0);
    EXPECT_EQ(out.at(0, 3, 0), 2.0);
    EXPECT_EQ(out.at(0, 3, 3), 3.0);
}

TEST(Bilinear, FactorOneIsIdentityAndCornersArePreserved) {
    std::mt19937_64 rng(8);
    const Tensor in = oracle::random_tensor({2, 3, 5}, rng);
    EXPECT_EQ(ops::bilinear_upsample(in, 1), in);
    const Tensor up = ops::bilinear_upsample(in, 4);
    for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_DOUBLE_EQ(up.at(c, 0, 0), in.at(c, 0, 0));
        EXPECT_DOUBLE_EQ(up.at(c, 11, 19), in.at(c, 2, 4));
    }
}

TEST(Pooling, AveragePoolMatchesBlockMeans) {
    std::mt19937_64 rng(9);
    const Tensor in = oracle::random_tensor({2, 8, 4}, rng);
    const Tensor out = ops::avg_pool(in, 4);
    ASSERT_EQ(out.shape(), (Shape{2, 2, 1}));
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t by = 0; by < 2; ++by) {
            double s = 0.0;
            for (std::size_t y = 0; y < 4; ++y)
                for (std::size_t x = 0; x < 4; ++x) s += in.at(c, by * 4 + y, x);
            EXPECT_NEAR(out.at(c, by, 0), s / 16.0, 1e-15);
        }
}

namespace {

// Loss = sum(w * op(x)) with fixed random weights w.
double weighted_sum(const Tensor& y, const Tensor& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
    return s;
}

}  // namespace

class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, ConvAgreesWithFiniteDifferences) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()));
    for (std::size_t stride : {1, 2}) {
        Param x("x", {2, 6, 5}), k("k", {3, 2, 3, 3}), b("b", {3});
        x.value = oracle::random_tensor(x.value.shape(), rng);
        k.value = oracle::random_tensor(k.value.shape(), rng);
        b.value = oracle::random_tensor(b.value.shape(), rng);
        const Tensor w = oracle::random_tensor(ops::conv2d(x.value, k.value, b.value, stride, 1).shape(), rng);
        Param* ps[] = {&x, &k, &b};
        auto loss = [&](bool acc) {
            const Tensor y = ops::conv2d(x.value, k.value, b.value, stride, 1);
            if (acc) ops::conv2d_backward(x.value, k.value, stride, 1, w, &x.grad, k.grad, b.grad);
            return weighted_sum(y, w);
        };
        const auto r = grad_check(loss, ps, 1e-6, 200, static_cast<std::uint64_t>(GetParam()));
        EXPECT_LT(r.max_relative_error, 1e-4) << r.worst;
    }
}

TEST_P(OpGradients, ElementwiseAndResamplingAgree) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(GetParam()) + 100);
    Param x("x", {2, 4, 4});
    x.value = oracle::random_tensor(x.value.shape(), rng);
    // Keep relu inputs away from the kink.
    for (auto& v : x.value.data())
        if (std::abs(v) < 0.05) v = 0.1;
    Param* ps[] = {&x};
    const double eps = 1e-6;

    const Tensor w4 = oracle::random_tensor({2, 4, 4}, rng);
    auto relu_loss = [&](bool acc) {
        if (acc) x.grad += ops::relu_backward(x.value, w4);
        return weighted_sum(ops::relu(x.value), w4);
    };
    EXPECT_LT(grad_check(relu_loss, ps, eps).max_relative_error, 1e-4);

    auto sig_loss = [&](bool acc) {
        const Tensor y = ops::sigmoid(x.value);
        if (acc) x.grad += ops::sigmoid_backward(y, w4);
        return weighted_sum(y, w4);
    };
    EXPECT_LT(grad_check(sig_loss, ps, eps).max_relative_error, 1e-4);

    const Tensor w16 = oracle::random_tensor({2, 16, 16}, rng);
    auto up_loss = [&](bool acc) {
        if (acc) x.grad += ops::bilinear_upsample_backward(x.value.shape(), 4, w16);
        return weighted_sum(ops::bilinear_upsample(x.value, 4), w16);
    };
    EXPECT_LT(grad_check(up_loss, ps, eps).max_relative_error, 1e-4);

    const Tensor w1 = oracle::random_tensor({2, 1, 1}, rng);
    auto pool_loss = [&](bool acc) {
        if (acc) x.grad += ops::avg_pool_backward(x.value.shape(), 4, w1);
        return weighted_sum(ops::avg_pool(x.value, 4), w1);
    };
    EXPECT_LT(grad_check(pool_loss, ps, eps).max_relative_error, 1e-4);

    Param g("gate", {1, 4, 4});
    g.value = oracle::random_tensor(g.value.shape(), rng, 0.0, 1.0);
    Param* pg[] = {&x, &g};
    auto mod_loss = [&](bool acc) {
        if (acc) {
            auto [gf, gg] = ops::modulate_backward(x.value, g.value, w4);
            x.grad += gf;
            g.grad += gg;
        }
        return weighted_sum(ops::modulate(x.value, g.value), w4);
    };
    EXPECT_LT(grad_check(mod_loss, pg, eps).max_relative_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(TenSeeds, OpGradients, ::testing::Range(0, 10));

TEST(GradCheck, RejectsBadEpsilonAndNonFiniteLoss) {
    Param p("p", {1});
    p.value.fill(1.0);
    Param* ps[] = {&p};
    auto ok = [&](bool) { return p.value[0]; };
    EXPECT_THROW(grad_check(ok, ps, 1e-3), ConfigError);
    EXPECT_THROW(grad_check(ok, ps, 1e-9), ConfigError);
    auto bad = [&](bool) { return std::nan(""); };
    EXPECT_THROW(grad_check(bad, ps, 1e-6), NumericError);
}

TEST(GradCheck, DetectsAWrongGradient) {
    Param p("p", {3});
    p.value.fill(0.5);
    Param* ps[] = {&p};
    auto wrong = [&](bool acc) {
        double s = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            s += p.value[i] * p.value[i];
            if (acc) p.grad[i] += p.value[i];  // should be 2x
        }
        return s;
    };
    EXPECT_GT(grad_check(wrong, ps, 1e-6).max_relative_error, 0.1);
}

TEST(Init, GlorotUniformStaysInsideItsBound) {
    std::mt19937_64 rng(1);
    Tensor w({8, 3, 3, 3});
    glorot_uniform(w, 27, 72, rng);
    const double a = std::sqrt(6.0 / 99.0);
    double mx = 0.0;
    for (double v : w.data()) {
        EXPECT_LE(std::abs(v), a);
        mx = std::max(mx, std::abs(v));
    }
    EXPECT_GT(mx, 0.5 * a);
}

TEST(Finiteness, OpsKeepFiniteInputsFinite) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor x = oracle::random_tensor({3, 8, 8}, rng, -50.0, 50.0);
        const Tensor k = oracle::random_tensor({4, 3, 3, 3}, rng);
        EXPECT_TRUE(ops::conv2d(x, k, Tensor({4}), 2, 1).all_finite());
        EXPECT_TRUE(ops::sigmoid(x).all_finite());
        EXPECT_TRUE(ops::bilinear_upsample(x, 4).all_finite());
        EXPECT_TRUE(ops::avg_pool(x, 4).all_finite());
    }
}
